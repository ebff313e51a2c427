//! Saliency benchmark metrics: PR curve, F-measure, ROC/AUC and MAE.
//!
//! Maps are thresholded in byte form at every `t ∈ 0..=255` with `s ≥ t`.
//! Per-threshold precision, recall, TPR and FPR are averaged over frames
//! first; F is then computed from the averaged precision and recall.
//! `maxF` is the best F over the 256 thresholds and `avgF` their mean.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const THRESHOLDS: usize = 256;
pub const BETA2: f64 = 0.3;
/// Guard added to precision/recall denominators.
pub const DENOM_EPS: f64 = 1e-8;

/// Saliency map with values normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{} values for a {height}×{width} saliency map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("saliency value {v} outside [0, 1]")));
        }
        Ok(SaliencyMap { height, width, values })
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        SaliencyMap::new(height, width, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `round(255·s)` per pixel.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    /// `1×h×w×1` tensor view of the map.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, self.height, self.width, 1], self.values.clone()).expect("map dims")
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> SaliencyMap {
        let values = bilinear(&self.values, self.height, self.width, height, width);
        SaliencyMap { height, width, values }
    }
}

fn bilinear(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let coord = |o: usize, s: usize, d: usize| -> (usize, usize, f64) {
        let f = ((o as f64 + 0.5) * s as f64 / d as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = f.floor() as usize;
        let hi = (lo + 1).min(s - 1);
        (lo, hi, f - lo as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, sw, dw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    out
}

/// Binary mask with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

pub type GroundTruth = BinaryMask;

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!("{} values for a {height}×{width} mask", bits.len())));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| f64::from(b)).collect();
        Tensor::from_vec([1, self.height, self.width, 1], data).expect("mask dims")
    }

    /// The mask read as a saliency map (0 → 0.0, 1 → 1.0).
    pub fn as_map(&self) -> SaliencyMap {
        SaliencyMap {
            height: self.height,
            width: self.width,
            values: self.bits.iter().map(|&b| f64::from(b)).collect(),
        }
    }
}

fn same_size(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{}×{} vs {}×{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

/// `M(i,j) = 1` iff `S(i,j) ≥ t`, on byte-form values.
pub fn binarize(bytes: &[u8], height: usize, width: usize, t: u32) -> Result<BinaryMask> {
    if t > 255 {
        return Err(Error::invalid(format!("threshold {t} outside 0..=255")));
    }
    BinaryMask::new(height, width, bytes.iter().map(|&b| u8::from(u32::from(b) >= t)).collect())
}

fn overlap(m: &BinaryMask, g: &BinaryMask) -> usize {
    m.bits.iter().zip(&g.bits).filter(|(&a, &b)| a == 1 && b == 1).count()
}

/// `(|M∩G| / (|M|+ε), |M∩G| / (|G|+ε))`.
pub fn precision_recall(m: &BinaryMask, g: &GroundTruth) -> Result<(f64, f64)> {
    same_size((m.height, m.width), (g.height, g.width))?;
    let inter = overlap(m, g) as f64;
    Ok((
        inter / (m.count() as f64 + DENOM_EPS),
        inter / (g.count() as f64 + DENOM_EPS),
    ))
}

/// Weighted harmonic mean of precision and recall; 0 when both are 0.
pub fn f_measure(p: f64, r: f64, beta2: f64) -> f64 {
    let denom = beta2 * p + r;
    if denom <= 0.0 {
        0.0
    } else {
        (1.0 + beta2) * p * r / denom
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(TPR, FPR) = (|M∩G| / |G|, |M∩Ḡ| / |Ḡ|)`; a rate with an empty denominator is 0.
pub fn roc_point(m: &BinaryMask, g: &GroundTruth) -> Result<(f64, f64)> {
    same_size((m.height, m.width), (g.height, g.width))?;
    let tp = overlap(m, g);
    let fp = m.count() - tp;
    let pos = g.count();
    Ok((ratio(tp, pos), ratio(fp, g.len() - pos)))
}

/// Trapezoidal area under `(fpr, tpr)` points after sorting by FPR (then TPR).
pub fn auc(points: &[(f64, f64)]) -> f64 {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Mean absolute error between a normalized map and a binary mask.
pub fn mae(s: &SaliencyMap, g: &GroundTruth) -> Result<f64> {
    same_size((s.height, s.width), (g.height, g.width))?;
    if g.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = s.values.iter().zip(&g.bits).map(|(&v, &b)| (v - f64::from(b)).abs()).sum();
    Ok(total / g.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub f: Vec<f64>,
    pub max_f: f64,
    pub avg_f: f64,
    pub auc: f64,
    pub mae: f64,
    pub frames: usize,
    /// Number of maps resampled to their ground truth's size.
    pub resized: usize,
}

#[derive(Clone)]
struct FrameCurves {
    precision: [f64; THRESHOLDS],
    recall: [f64; THRESHOLDS],
    tpr: [f64; THRESHOLDS],
    fpr: [f64; THRESHOLDS],
}

fn frame_curves(bytes: &[u8], g: &GroundTruth) -> FrameCurves {
    // Histograms of byte values over foreground / background pixels.
    let mut pos = [0usize; THRESHOLDS];
    let mut neg = [0usize; THRESHOLDS];
    for (&b, &m) in bytes.iter().zip(&g.bits) {
        if m == 1 {
            pos[b as usize] += 1;
        } else {
            neg[b as usize] += 1;
        }
    }
    let n_pos: usize = pos.iter().sum();
    let n_neg: usize = neg.iter().sum();
    let mut c = FrameCurves {
        precision: [0.0; THRESHOLDS],
        recall: [0.0; THRESHOLDS],
        tpr: [0.0; THRESHOLDS],
        fpr: [0.0; THRESHOLDS],
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    for t in (0..THRESHOLDS).rev() {
        tp += pos[t];
        fp += neg[t];
        c.precision[t] = tp as f64 / ((tp + fp) as f64 + DENOM_EPS);
        c.recall[t] = tp as f64 / (n_pos as f64 + DENOM_EPS);
        c.tpr[t] = ratio(tp, n_pos);
        c.fpr[t] = ratio(fp, n_neg);
    }
    c
}

/// Scores aligned lists of maps and ground truths. Maps whose size differs
/// from their ground truth are bilinearly resized first.
pub fn evaluate_set(maps: &[SaliencyMap], gts: &[GroundTruth]) -> Result<EvalReport> {
    if maps.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} maps for {} ground truths",
            maps.len(),
            gts.len()
        )));
    }
    if maps.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let n = maps.len() as f64;
    let mut sum_p = [0.0; THRESHOLDS];
    let mut sum_r = [0.0; THRESHOLDS];
    let mut sum_tpr = [0.0; THRESHOLDS];
    let mut sum_fpr = [0.0; THRESHOLDS];
    let mut sum_mae = 0.0;
    let mut resized = 0;
    for (s, g) in maps.iter().zip(gts) {
        let owned;
        let s = if (s.height, s.width) != (g.height, g.width) {
            log::warn!(
                "resizing {}×{} map to ground-truth size {}×{}",
                s.height,
                s.width,
                g.height,
                g.width
            );
            resized += 1;
            owned = s.resize_bilinear(g.height, g.width);
            &owned
        } else {
            s
        };
        let c = frame_curves(&s.to_bytes(), g);
        for t in 0..THRESHOLDS {
            sum_p[t] += c.precision[t];
            sum_r[t] += c.recall[t];
            sum_tpr[t] += c.tpr[t];
            sum_fpr[t] += c.fpr[t];
        }
        sum_mae += mae(s, g)?;
    }
    let avg = |a: [f64; THRESHOLDS]| a.iter().map(|v| v / n).collect::<Vec<_>>();
    let (precision, recall, tpr, fpr) = (avg(sum_p), avg(sum_r), avg(sum_tpr), avg(sum_fpr));
    let f: Vec<f64> = precision.iter().zip(&recall).map(|(&p, &r)| f_measure(p, r, BETA2)).collect();
    let max_f = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let avg_f = f.iter().sum::<f64>() / THRESHOLDS as f64;
    let mut roc: Vec<(f64, f64)> = fpr.iter().copied().zip(tpr.iter().copied()).collect();
    roc.push((0.0, 0.0));
    roc.push((1.0, 1.0));
    Ok(EvalReport {
        auc: auc(&roc),
        precision,
        recall,
        tpr,
        fpr,
        f,
        max_f,
        avg_f,
        mae: sum_mae / n,
        frames: maps.len(),
        resized,
    })
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format!(
            "frames: {}\nmaxF: {:.5}\navgF: {:.5}\nAUC: {:.5}\nMAE: {:.5}\n",
            self.frames, self.max_f, self.avg_f, self.auc, self.mae
        )
    }

    /// `threshold,precision,recall,F`
    pub fn pr_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall,F\n");
        for t in 0..THRESHOLDS {
            writeln!(out, "{t},{:.10},{:.10},{:.10}", self.precision[t], self.recall[t], self.f[t]).unwrap();
        }
        out
    }

    /// `threshold,FPR,TPR`
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("threshold,FPR,TPR\n");
        for t in 0..THRESHOLDS {
            writeln!(out, "{t},{:.10},{:.10}", self.fpr[t], self.tpr[t]).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::new(1, bits.len(), bits.to_vec()).unwrap()
    }

    #[test]
    fn binarize_boundaries() {
        let bytes = [0u8, 17, 254, 255];
        assert_eq!(binarize(&bytes, 1, 4, 0).unwrap().bits(), &[1, 1, 1, 1]);
        assert_eq!(binarize(&bytes, 1, 4, 255).unwrap().bits(), &[0, 0, 0, 1]);
        let uniform = [128u8; 6];
        assert_eq!(binarize(&uniform, 2, 3, 128).unwrap().count(), 6);
        assert_eq!(binarize(&uniform, 2, 3, 129).unwrap().count(), 0);
        assert!(binarize(&bytes, 1, 4, 256).is_err());
    }

    #[test]
    fn precision_recall_cases() {
        let g = mask(&[1, 0, 1, 0, 0]);
        let (p, r) = precision_recall(&g, &g).unwrap();
        assert!((p - 1.0).abs() < 1e-7 && (r - 1.0).abs() < 1e-7);
        let (p, r) = precision_recall(&mask(&[1; 5]), &g).unwrap();
        assert!((p - 0.4).abs() < 1e-8 && (r - 1.0).abs() < 1e-8);
        let (p, r) = precision_recall(&mask(&[0; 5]), &g).unwrap();
        assert_eq!((p, r), (0.0, 0.0));
        assert!(precision_recall(&mask(&[0; 4]), &g).is_err());
    }

    #[test]
    fn f_measure_cases() {
        for i in 1..=10 {
            let x = i as f64 / 10.0;
            assert!((f_measure(x, x, BETA2) - x).abs() < 1e-15);
        }
        assert_eq!(f_measure(1.0, 0.0, BETA2), 0.0);
        assert_eq!(f_measure(0.0, 0.0, BETA2), 0.0);
        // 1.3·0.8·0.5 / (0.3·0.8 + 0.5) = 0.52 / 0.74
        assert!((f_measure(0.8, 0.5, BETA2) - 0.52 / 0.74).abs() < 1e-15);
        assert!((f_measure(0.8, 0.5, BETA2) - 0.702_702_7).abs() < 1e-7);
    }

    #[test]
    fn roc_and_auc_cases() {
        let g = mask(&[1, 1, 0, 0, 0, 1]);
        let bytes: Vec<u8> = g.bits().iter().map(|&b| b * 255).collect();
        let s = SaliencyMap::from_bytes(1, 6, &bytes).unwrap();
        let r = evaluate_set(&[s], std::slice::from_ref(&g)).unwrap();
        assert!((r.auc - 1.0).abs() < 1e-12);

        let flat = SaliencyMap::new(1, 6, vec![0.4; 6]).unwrap();
        let r = evaluate_set(&[flat], std::slice::from_ref(&g)).unwrap();
        assert!((r.auc - 0.5).abs() < 1e-12);

        let (tpr, fpr) = roc_point(&mask(&[1, 0, 0, 0, 1, 1]), &g).unwrap();
        assert!((tpr - 2.0 / 3.0).abs() < 1e-15 && (fpr - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mae_cases() {
        let g = mask(&[1, 0, 1, 1]);
        assert_eq!(mae(&g.as_map(), &g).unwrap(), 0.0);
        let half = SaliencyMap::new(1, 4, vec![0.5; 4]).unwrap();
        assert_eq!(mae(&half, &g).unwrap(), 0.5);
        let s = SaliencyMap::new(1, 4, vec![0.1, 0.2, 0.3, 1.0]).unwrap();
        assert!((mae(&s, &g).unwrap() - (0.9 + 0.2 + 0.7 + 0.0) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn resize_preserves_constant_maps() {
        let s = SaliencyMap::new(2, 3, vec![0.3; 6]).unwrap();
        let r = s.resize_bilinear(5, 4);
        assert_eq!((r.height(), r.width()), (5, 4));
        assert!(r.values().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn map_values_are_validated() {
        assert!(SaliencyMap::new(1, 2, vec![0.5, 1.5]).is_err());
        assert!(SaliencyMap::new(1, 2, vec![0.5]).is_err());
        assert!(BinaryMask::new(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn evaluate_set_rejects_bad_lists() {
        let g = mask(&[1, 0]);
        assert!(evaluate_set(&[], &[]).is_err());
        assert!(evaluate_set(&[g.as_map()], &[g.clone(), g.clone()]).is_err());
    }
}
