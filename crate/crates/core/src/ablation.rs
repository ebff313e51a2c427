//! Sweep over where and how many non-local blocks are inserted, recording
//! held-out MAE and mean forward time per configuration.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::FrameSet;
use crate::error::{Error, Result};
use crate::nets::{static_forward, Network, NetworkSpec, MAX_NL_COUNT};
use crate::pipeline::{evaluate_predictions, predict_static};
use crate::train::{static_samples, train_stage, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub blocks: Vec<usize>,
    /// Non-local counts to try; 0 is the plain backbone and is built once.
    pub counts: Vec<usize>,
    pub train: TrainConfig,
    /// Timed passes over the evaluation frames; the first is a warm-up and
    /// is not counted.
    pub timing_rounds: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            blocks: vec![3, 4, 5],
            counts: (0..=MAX_NL_COUNT).collect(),
            train: TrainConfig {
                iterations: 200,
                ..Default::default()
            },
            timing_rounds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    /// `None` for the baseline without non-local blocks.
    pub nl_after_block: Option<usize>,
    pub nl_count: usize,
    pub mae: f64,
    /// Mean wall-clock seconds per frame.
    pub mean_forward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, block: usize, count: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| {
            r.nl_count == count && (count == 0 || r.nl_after_block == Some(block))
        })
    }

    /// `nl_after_block,nl_count,mae,mean_forward_s`; the baseline row has an
    /// empty block field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("nl_after_block,nl_count,mae,mean_forward_s\n");
        for r in &self.rows {
            let block = r.nl_after_block.map_or_else(String::new, |b| b.to_string());
            writeln!(out, "{block},{},{:.6},{:.6}", r.nl_count, r.mae, r.mean_forward).unwrap();
        }
        out
    }

    /// One line per count, an MAE / seconds column pair per block.
    pub fn render(&self) -> String {
        let mut blocks: Vec<usize> = self.rows.iter().filter_map(|r| r.nl_after_block).collect();
        blocks.sort_unstable();
        blocks.dedup();
        let mut counts: Vec<usize> = self.rows.iter().map(|r| r.nl_count).collect();
        counts.sort_unstable();
        counts.dedup();
        let mut out = format!("{:>5}", "count");
        for b in &blocks {
            write!(out, " | {:>10} {:>10}", format!("after{b} MAE"), format!("after{b} s")).unwrap();
        }
        out.push('\n');
        for c in counts {
            write!(out, "{c:>5}").unwrap();
            for &b in &blocks {
                match self.get(b, c) {
                    Some(r) => write!(out, " | {:>10.5} {:>10.4}", r.mae, r.mean_forward).unwrap(),
                    None => write!(out, " | {:>10} {:>10}", "-", "-").unwrap(),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one network per configuration on `train_set`, scores each on
/// `eval_set`, then times forward passes. Timing interleaves the
/// configurations frame by frame so slow drifts of the machine affect all
/// of them alike.
pub fn run_ablation(
    base: &NetworkSpec,
    train_set: &FrameSet,
    eval_set: &FrameSet,
    cfg: &AblationConfig,
    seed: u64,
) -> Result<AblationTable> {
    if cfg.timing_rounds < 2 {
        return Err(Error::Config("timing_rounds must be ≥ 2 (one warm-up round)".into()));
    }
    if eval_set.frame_count() == 0 {
        return Err(Error::Dataset("ablation evaluation set is empty".into()));
    }
    let mut configs: Vec<(Option<usize>, usize)> = Vec::new();
    if cfg.counts.contains(&0) {
        configs.push((None, 0));
    }
    for &b in &cfg.blocks {
        for &c in cfg.counts.iter().filter(|&&c| c > 0) {
            configs.push((Some(b), c));
        }
    }
    let samples = static_samples(train_set);
    let mut nets = Vec::with_capacity(configs.len());
    let mut maes = Vec::with_capacity(configs.len());
    for (i, &(block, count)) in configs.iter().enumerate() {
        let spec = base.clone().with_nl(block.unwrap_or(base.nl_after_block), count);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let mut net = Network::build(spec, &mut rng)?;
        train_stage(&mut net, &samples, &cfg.train, |_, _, _| Ok(true))?;
        let report = evaluate_predictions(eval_set, &predict_static(&net, eval_set)?)?;
        log::info!(
            "ablation block {} count {count}: MAE {:.5}",
            block.map_or_else(|| "-".to_string(), |b| b.to_string()),
            report.mae
        );
        maes.push(report.mae);
        nets.push(net);
    }

    let frames = eval_set.samples();
    let mut totals = vec![0.0; nets.len()];
    for round in 0..cfg.timing_rounds {
        for s in &frames {
            for (net, total) in nets.iter().zip(totals.iter_mut()) {
                let start = Instant::now();
                static_forward(net, s.frame_t)?;
                if round > 0 {
                    *total += start.elapsed().as_secs_f64();
                }
            }
        }
    }
    let timed = ((cfg.timing_rounds - 1) * frames.len()) as f64;
    let rows = configs
        .iter()
        .zip(maes)
        .zip(totals)
        .map(|((&(nl_after_block, nl_count), mae), total)| AblationRow {
            nl_after_block,
            nl_count,
            mae,
            mean_forward: total / timed,
        })
        .collect();
    Ok(AblationTable { rows })
}
