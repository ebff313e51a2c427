//! Frame and ground-truth ingestion, consecutive-frame pairing, manifests
//! and the synthetic moving-square dataset.
//!
//! On-disk layout: `<root>/<sequence>/frames/*.{png,ppm}` and
//! `<root>/<sequence>/gt/*.{png,pgm}`, matched by file stem and ordered by
//! the numeric suffix of the stem.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{GroundTruth, SaliencyMap};
use crate::tensor::Tensor;

const FRAME_EXTS: &[&str] = &["png", "ppm"];
const GT_EXTS: &[&str] = &["png", "pgm"];

fn image_err(path: &Path, msg: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

fn open_8bit(path: &Path) -> Result<DynamicImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    match img {
        DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_)
        | DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_) => Ok(img),
        other => Err(image_err(path, format!("expected an 8-bit image, found {:?}", other.color()))),
    }
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::from_vec([1, h as usize, w as usize, 3], data).expect("rgb buffer dims")
}

/// Reads an 8-bit RGB frame into a `1×h×w×3` tensor scaled to `[0, 1]`.
pub fn load_frame(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    Ok(rgb_to_tensor(&open_8bit(path)?.to_rgb8()))
}

/// Like [`load_frame`], resampled bilinearly to `height × width`.
pub fn load_frame_resized(path: impl AsRef<Path>, height: usize, width: usize) -> Result<Tensor> {
    let path = path.as_ref();
    let img = open_8bit(path)?.to_rgb8();
    if img.dimensions() == (width as u32, height as u32) {
        return Ok(rgb_to_tensor(&img));
    }
    Ok(rgb_to_tensor(&image::imageops::resize(
        &img,
        width as u32,
        height as u32,
        FilterType::Triangle,
    )))
}

/// Writes a `1×h×w×3` tensor as 8-bit RGB; format follows the extension.
pub fn save_frame(path: impl AsRef<Path>, frame: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let s = frame.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape(format!("save_frame needs 1×h×w×3, got {s}")));
    }
    let bytes = frame.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = RgbImage::from_raw(s.w as u32, s.h as u32, bytes).expect("rgb buffer dims");
    img.save(path).map_err(|e| image_err(path, e))
}

fn mask_bits(img: &DynamicImage, flatten: bool) -> Vec<u8> {
    let fg = |v: u8| u8::from(if flatten { v != 0 } else { v >= 128 });
    match img {
        DynamicImage::ImageLuma8(g) => g.as_raw().iter().map(|&v| fg(v)).collect(),
        // Palette masks arrive expanded to colour; a pixel's label is nonzero
        // iff any channel is, and its intensity is the brightest channel.
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| fg(p.0.iter().copied().max().unwrap_or(0)))
            .collect(),
    }
}

/// Reads a mask. `flatten = true` maps every nonzero label to foreground
/// (multi-object annotations); otherwise values ≥ 128 are foreground.
pub fn load_groundtruth(path: impl AsRef<Path>, flatten: bool) -> Result<GroundTruth> {
    let path = path.as_ref();
    let img = open_8bit(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    GroundTruth::new(h, w, mask_bits(&img, flatten))
}

/// Like [`load_groundtruth`], resampled with nearest-neighbour to `height × width`.
pub fn load_groundtruth_resized(path: impl AsRef<Path>, flatten: bool, height: usize, width: usize) -> Result<GroundTruth> {
    let path = path.as_ref();
    let img = open_8bit(path)?;
    if (img.width() as usize, img.height() as usize) == (width, height) {
        return GroundTruth::new(height, width, mask_bits(&img, flatten));
    }
    let resized = img.resize_exact(width as u32, height as u32, FilterType::Nearest);
    GroundTruth::new(height, width, mask_bits(&resized, flatten))
}

pub fn save_mask(path: impl AsRef<Path>, mask: &GroundTruth) -> Result<()> {
    let path = path.as_ref();
    let bytes = mask.bits().iter().map(|&b| b * 255).collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes).expect("mask dims");
    img.save(path).map_err(|e| image_err(path, e))
}

/// Writes a map as 8-bit grayscale with values `round(255·s)`.
pub fn save_map(path: impl AsRef<Path>, map: &SaliencyMap) -> Result<()> {
    let path = path.as_ref();
    let img = GrayImage::from_raw(map.width() as u32, map.height() as u32, map.to_bytes()).expect("map dims");
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn load_map(path: impl AsRef<Path>) -> Result<SaliencyMap> {
    let path = path.as_ref();
    let img = open_8bit(path)?.to_luma8();
    let (w, h) = img.dimensions();
    SaliencyMap::from_bytes(h as usize, w as usize, img.as_raw())
}

/// Numeric suffix of a file stem (`"frame_00012"` → 12).
pub fn stem_index(stem: &str) -> Option<u64> {
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

fn sort_key(stem: &str) -> (Option<u64>, String) {
    (stem_index(stem), stem.to_string())
}

/// Image files in `dir` with one of `exts`, keyed by stem.
pub fn list_images(dir: &Path, exts: &[&str]) -> Result<Vec<(String, PathBuf)>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| exts.contains(&e.to_ascii_lowercase().as_str()));
        if !ext_ok || !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort_by_key(|(stem, _)| sort_key(stem));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameEntry {
    pub stem: String,
    pub frame: PathBuf,
    pub gt: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceIndex {
    pub id: String,
    pub frames: Vec<FrameEntry>,
}

/// File-level view of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub sequences: Vec<SequenceIndex>,
}

/// One line of a manifest: `seq_id<TAB>frame_t<TAB>frame_t1<TAB>gt_path|-`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub seq_id: String,
    pub frame_t: PathBuf,
    pub frame_t1: PathBuf,
    pub gt: Option<PathBuf>,
}

/// Successor index of every position: `(t, t+1)`, and `(n-1, n-1)` at the end.
pub fn pair_indices(n: usize) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return Err(Error::Dataset("cannot pair an empty sequence".into()));
    }
    Ok((0..n).map(|t| (t, (t + 1).min(n - 1))).collect())
}

/// Orders a sequence by the numeric suffix of each stem and pairs
/// consecutive frames; the last frame is paired with itself.
pub fn pair_consecutive(seq: &SequenceIndex) -> Result<Vec<ManifestEntry>> {
    let mut frames = seq.frames.clone();
    frames.sort_by_key(|f| sort_key(&f.stem));
    Ok(pair_indices(frames.len())?
        .into_iter()
        .map(|(a, b)| ManifestEntry {
            seq_id: seq.id.clone(),
            frame_t: frames[a].frame.clone(),
            frame_t1: frames[b].frame.clone(),
            gt: frames[a].gt.clone(),
        })
        .collect())
}

impl DatasetIndex {
    /// Scans `<root>/<sequence>/{frames,gt}`; sequences are sorted by name.
    pub fn scan(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let mut seq_dirs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("frames").is_dir())
            .collect();
        seq_dirs.sort();
        let mut sequences = Vec::new();
        for dir in seq_dirs {
            let id = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let gts: HashMap<String, PathBuf> = if dir.join("gt").is_dir() {
                list_images(&dir.join("gt"), GT_EXTS)?.into_iter().collect()
            } else {
                HashMap::new()
            };
            let frames: Vec<FrameEntry> = list_images(&dir.join("frames"), FRAME_EXTS)?
                .into_iter()
                .map(|(stem, frame)| FrameEntry {
                    gt: gts.get(&stem).cloned(),
                    stem,
                    frame,
                })
                .collect();
            if !frames.is_empty() {
                sequences.push(SequenceIndex { id, frames });
            }
        }
        if sequences.is_empty() {
            return Err(Error::Dataset(format!(
                "no `<sequence>/frames` directories with images under {}",
                root.display()
            )));
        }
        Ok(DatasetIndex { sequences })
    }

    pub fn manifest(&self) -> Result<Vec<ManifestEntry>> {
        let mut out = Vec::new();
        for seq in &self.sequences {
            out.extend(pair_consecutive(seq)?);
        }
        Ok(out)
    }

    /// Rebuilds the index from manifest lines, keeping their order.
    pub fn from_manifest(entries: &[ManifestEntry]) -> Self {
        let mut sequences: Vec<SequenceIndex> = Vec::new();
        for e in entries {
            let frame = FrameEntry {
                stem: e
                    .frame_t
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .to_string(),
                frame: e.frame_t.clone(),
                gt: e.gt.clone(),
            };
            match sequences.last_mut() {
                Some(s) if s.id == e.seq_id => s.frames.push(frame),
                _ => sequences.push(SequenceIndex {
                    id: e.seq_id.clone(),
                    frames: vec![frame],
                }),
            }
        }
        DatasetIndex { sequences }
    }

    /// Loads every frame (and mask, when present) at `height × width`.
    pub fn load(&self, height: usize, width: usize, flatten: bool) -> Result<FrameSet> {
        let mut sequences = Vec::with_capacity(self.sequences.len());
        for seq in &self.sequences {
            let mut frames = Vec::with_capacity(seq.frames.len());
            for f in &seq.frames {
                frames.push(Frame {
                    stem: f.stem.clone(),
                    image: load_frame_resized(&f.frame, height, width)?,
                    gt: f
                        .gt
                        .as_ref()
                        .map(|p| load_groundtruth_resized(p, flatten, height, width))
                        .transpose()?,
                });
            }
            sequences.push(Sequence {
                id: seq.id.clone(),
                frames,
            });
        }
        Ok(FrameSet { sequences })
    }
}

pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let gt = e.gt.as_ref().map_or_else(|| "-".to_string(), |p| p.display().to_string());
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.seq_id,
            e.frame_t.display(),
            e.frame_t1.display(),
            gt
        ));
    }
    out
}

pub fn read_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            let [seq, ft, ft1, gt] = cols[..] else {
                return Err(Error::Dataset(format!(
                    "manifest line {}: expected 4 tab-separated fields, got {}",
                    i + 1,
                    cols.len()
                )));
            };
            Ok(ManifestEntry {
                seq_id: seq.to_string(),
                frame_t: ft.into(),
                frame_t1: ft1.into(),
                gt: (gt != "-").then(|| gt.into()),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub stem: String,
    pub image: Tensor,
    pub gt: Option<GroundTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub frames: Vec<Frame>,
}

/// Decoded frames grouped by sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameSet {
    pub sequences: Vec<Sequence>,
}

/// A paired sample `(I_t, I_{t+1}, G_t)`.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub seq_id: &'a str,
    pub stem: &'a str,
    pub frame_t: &'a Tensor,
    pub frame_t1: &'a Tensor,
    pub gt: Option<&'a GroundTruth>,
}

impl FrameSet {
    pub fn frame_count(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }

    /// One sample per frame, in sequence order.
    pub fn samples(&self) -> Vec<Sample<'_>> {
        let mut out = Vec::with_capacity(self.frame_count());
        for seq in &self.sequences {
            let Ok(pairs) = pair_indices(seq.frames.len()) else { continue };
            for (a, b) in pairs {
                let f = &seq.frames[a];
                out.push(Sample {
                    seq_id: &seq.id,
                    stem: &f.stem,
                    frame_t: &f.image,
                    frame_t1: &seq.frames[b].image,
                    gt: f.gt.as_ref(),
                });
            }
        }
        out
    }

    /// Samples carrying a ground truth; unannotated frames only serve as `I_{t+1}`.
    pub fn annotated(&self) -> Vec<Sample<'_>> {
        self.samples().into_iter().filter(|s| s.gt.is_some()).collect()
    }

    /// Writes the set in the on-disk layout, one PNG per frame and mask.
    pub fn write(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        for seq in &self.sequences {
            let frames = root.join(&seq.id).join("frames");
            let gts = root.join(&seq.id).join("gt");
            fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
            fs::create_dir_all(&gts).map_err(|e| Error::io(&gts, e))?;
            for f in &seq.frames {
                save_frame(frames.join(format!("{}.png", f.stem)), &f.image)?;
                if let Some(g) = &f.gt {
                    save_mask(gts.join(format!("{}.png", f.stem)), g)?;
                }
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic moving-square dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub size: usize,
    /// Square displacement per frame, in pixels.
    pub motion: usize,
    /// Adds a static square of identical appearance that is never salient.
    pub distractor: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            sequences: 4,
            frames_per_sequence: 5,
            size: 64,
            motion: 4,
            distractor: false,
            seed: 0,
        }
    }
}

const SQUARE_RGB: [f64; 3] = [0.95, 0.92, 0.55];

/// Square regions of one synthetic sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    y: usize,
    x: usize,
    side: usize,
}

impl Rect {
    fn contains(&self, y: usize, x: usize) -> bool {
        (self.y..self.y + self.side).contains(&y) && (self.x..self.x + self.side).contains(&x)
    }

    fn overlaps(&self, o: &Rect, margin: usize) -> bool {
        self.y < o.y + o.side + margin
            && o.y < self.y + self.side + margin
            && self.x < o.x + o.side + margin
            && o.x < self.x + self.side + margin
    }
}

/// Deterministic sequences of a bright square moving over a textured,
/// static background, with exact binary masks.
pub fn synth_dataset(spec: &SynthSpec) -> Result<FrameSet> {
    if spec.size < 32 {
        return Err(Error::invalid(format!("synthetic frame size {} below 32", spec.size)));
    }
    if spec.sequences == 0 || spec.frames_per_sequence == 0 {
        return Err(Error::invalid("synthetic dataset needs at least one sequence and frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size;
    let side = n / 5;
    let span = n - side;
    let mut sequences = Vec::with_capacity(spec.sequences);
    for s in 0..spec.sequences {
        // Low-contrast background: two random gratings plus per-pixel noise.
        let tint: [f64; 3] = [rng.gen_range(0.15..0.35), rng.gen_range(0.15..0.35), rng.gen_range(0.15..0.35)];
        let (fy, fx, phase) = (rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5), rng.gen_range(0.0..std::f64::consts::TAU));
        let mut background = vec![0.0; n * n * 3];
        for y in 0..n {
            for x in 0..n {
                let wave = 0.08 * ((y as f64 * fy + phase).sin() + (x as f64 * fx).cos());
                for c in 0..3 {
                    background[(y * n + x) * 3 + c] = (tint[c] + wave + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
                }
            }
        }

        // Start and velocity; the square bounces off the borders.
        let (mut y, mut x) = (rng.gen_range(0..=span) as isize, rng.gen_range(0..=span) as isize);
        let m = spec.motion as isize;
        let (mut vy, mut vx) = (if rng.gen_bool(0.5) { m } else { -m }, if rng.gen_bool(0.5) { m } else { -m });
        let mut path = Vec::with_capacity(spec.frames_per_sequence);
        for _ in 0..spec.frames_per_sequence {
            path.push(Rect {
                y: y as usize,
                x: x as usize,
                side,
            });
            for (p, v) in [(&mut y, &mut vy), (&mut x, &mut vx)] {
                if *p + *v < 0 || *p + *v > span as isize {
                    *v = -*v;
                }
                *p = (*p + *v).clamp(0, span as isize);
            }
        }

        let distractor = if spec.distractor {
            let mut found = None;
            for _ in 0..1000 {
                let r = Rect {
                    y: rng.gen_range(0..=span),
                    x: rng.gen_range(0..=span),
                    side,
                };
                if path.iter().all(|p| !p.overlaps(&r, 2)) {
                    found = Some(r);
                    break;
                }
            }
            found
        } else {
            None
        };

        let mut frames = Vec::with_capacity(spec.frames_per_sequence);
        for (t, rect) in path.iter().enumerate() {
            let mut img = background.clone();
            let mut bits = vec![0u8; n * n];
            for py in 0..n {
                for px in 0..n {
                    let on_square = rect.contains(py, px);
                    if on_square || distractor.is_some_and(|d| d.contains(py, px)) {
                        img[(py * n + px) * 3..][..3].copy_from_slice(&SQUARE_RGB);
                    }
                    bits[py * n + px] = u8::from(on_square);
                }
            }
            frames.push(Frame {
                stem: format!("{t:05}"),
                image: Tensor::from_vec([1, n, n, 3], img)?,
                gt: Some(GroundTruth::new(n, n, bits)?),
            });
        }
        sequences.push(Sequence {
            id: format!("synth{s:02}"),
            frames,
        });
    }
    Ok(FrameSet { sequences })
}
