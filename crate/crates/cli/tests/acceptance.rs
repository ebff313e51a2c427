//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero when a gated criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nlsal_core::data::{load_groundtruth, load_map, save_map, synth_dataset, SynthSpec};
use nlsal_core::metrics::{evaluate_set, f_measure, BinaryMask, SaliencyMap, BETA2};
use nlsal_core::nets::{static_forward, Network, NetworkSpec};
use nlsal_core::nonlocal::{nl_attend, nl_block, nl_oracle, EmbedActivation, NonLocalParams};
use nlsal_core::train::{static_samples, train_stage, TrainConfig};
use nlsal_core::Tensor;

const BIN: &str = env!("CARGO_BIN_EXE_nlsal");

type Check = Box<dyn Fn(&Path) -> Result<Outcome, String>>;

struct Outcome {
    pass: bool,
    detail: String,
    /// Reported but not allowed to fail the run.
    advisory: bool,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
        advisory: false,
    }
}

fn nlsal(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("running nlsal");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn nlsal_ok(args: &[&str]) -> Result<String, String> {
    let (code, stdout, stderr) = nlsal(args);
    if code == 0 {
        Ok(stdout)
    } else {
        Err(format!("`nlsal {}` exited {code}: {}", args.join(" "), stderr.trim()))
    }
}

fn summary_value(path: &Path, key: &str) -> Result<f64, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| format!("{key} missing from {}", path.display()))
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn write_cfg(path: &Path, lines: &[&str]) {
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

fn nl_oracle_equivalence() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (h, w, c) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=16));
        let ce = rng.gen_range(1..=c);
        let act = if rng.gen_bool(0.5) {
            EmbedActivation::Linear
        } else {
            EmbedActivation::Rectified
        };
        let x = Tensor::uniform([1, h, w, c], -2.0, 2.0, &mut rng);
        let params = NonLocalParams::init(c, ce, act, &mut rng);
        let (y, _) = nl_attend(&x, &params).map_err(|e| e.to_string())?;
        let (oracle, _) = nl_oracle(&x, &params).map_err(|e| e.to_string())?;
        worst = worst.max(y.max_abs_diff(&oracle).map_err(|e| e.to_string())?);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        worst <= 1e-6 && secs < 30.0,
        format!("1000 cases, max |Δ| {worst:.2e}, {secs:.2} s"),
    ))
}

fn residual_identity() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut exact = 0;
    for _ in 0..200 {
        let (h, w, c) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=16));
        let x = Tensor::uniform([1, h, w, c], -5.0, 5.0, &mut rng);
        let mut params = NonLocalParams::init(c, rng.gen_range(1..=c), EmbedActivation::Linear, &mut rng);
        params.w_z = Tensor::zeros(params.w_z.shape());
        if nl_block(&x, &params).map_err(|e| e.to_string())?.data() == x.data() {
            exact += 1;
        }
    }

    // a trained net with its blocks silenced matches the same backbone without them
    let set = synth_dataset(&SynthSpec {
        sequences: 2,
        frames_per_sequence: 3,
        size: 64,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let mut with_nl = Network::build(NetworkSpec::static_default().with_nl(4, 2), &mut rng).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        iterations: 30,
        ..Default::default()
    };
    train_stage(&mut with_nl, &static_samples(&set), &cfg, |_, _, _| Ok(true)).map_err(|e| e.to_string())?;
    with_nl.zero_nl_output_projections();
    let mut plain = Network::build(NetworkSpec::static_default().with_nl(4, 0), &mut rng).map_err(|e| e.to_string())?;
    let names: Vec<String> = plain.params().names().map(str::to_string).collect();
    for name in names {
        *plain.params_mut().get_mut(&name).unwrap() = with_nl.params().get(&name).unwrap().clone();
    }
    let mut same = true;
    for s in set.samples() {
        let a = static_forward(&with_nl, s.frame_t).map_err(|e| e.to_string())?;
        let b = static_forward(&plain, s.frame_t).map_err(|e| e.to_string())?;
        same &= a.values() == b.values();
    }
    Ok(outcome(
        exact == 200 && same,
        format!("{exact}/200 blocks exact identity; trained net unchanged end-to-end: {same}"),
    ))
}

fn gradient_suite(dir: &Path) -> Result<Outcome, String> {
    let (code, stdout, _) = nlsal(&["gradcheck", "--out", p(&dir.join("gc"))]);
    let lines: Vec<&str> = stdout.lines().collect();
    let all_pass = !lines.is_empty() && lines.iter().all(|l| l.ends_with("PASS"));
    let worst = lines
        .iter()
        .filter_map(|l| l.split_whitespace().nth(1)?.parse::<f64>().ok())
        .fold(0.0, f64::max);
    let (bad_code, bad_out, _) = nlsal(&["gradcheck", "--corrupt", "conv2d_transpose"]);
    let caught = bad_code != 0 && bad_out.lines().any(|l| l.starts_with("conv2d_transpose") && l.ends_with("FAIL"));
    Ok(outcome(
        code == 0 && all_pass && caught,
        format!(
            "{} checks, worst rel. err {worst:.2e}, exit {code}; corrupted backward detected: {caught}",
            lines.len()
        ),
    ))
}

fn mann_whitney(bytes: &[u8], bits: &[u8]) -> (f64, usize, usize) {
    let (mut score, mut np, mut nn) = (0.0, 0, 0);
    for (i, &gi) in bits.iter().enumerate() {
        if gi == 1 {
            np += 1;
        } else {
            nn += 1;
            continue;
        }
        for (j, &gj) in bits.iter().enumerate() {
            if gj == 0 {
                score += match bytes[i].cmp(&bytes[j]) {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    (score / (np * nn) as f64, np, nn)
}

fn metric_correctness(dir: &Path) -> Result<Outcome, String> {
    let mut notes = Vec::new();
    let f_ok = (1..=10).all(|i| {
        let p = f64::from(i) / 10.0;
        (f_measure(p, p, BETA2) - p).abs() < 1e-15
    });
    notes.push(format!("F(p,p)=p: {f_ok}"));

    // perfect predictor through the CLI
    let set = synth_dataset(&SynthSpec {
        sequences: 2,
        frames_per_sequence: 3,
        size: 32,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let gt_root = dir.join("perfect_gt");
    set.write(&gt_root).map_err(|e| e.to_string())?;
    let maps_root = dir.join("perfect_maps");
    for s in set.samples() {
        let d = maps_root.join(s.seq_id);
        fs::create_dir_all(&d).unwrap();
        save_map(d.join(format!("{}.png", s.stem)), &s.gt.unwrap().as_map()).map_err(|e| e.to_string())?;
    }
    let out = dir.join("perfect_eval");
    nlsal_ok(&["eval", "--in", p(&maps_root), "--gt", p(&gt_root), "--out", p(&out)])?;
    let gts: Vec<_> = set.samples().iter().map(|s| s.gt.unwrap().clone()).collect();
    let maps: Vec<_> = gts.iter().map(BinaryMask::as_map).collect();
    let perfect = evaluate_set(&maps, &gts).map_err(|e| e.to_string())?;
    let perfect_ok = (perfect.max_f - 1.0).abs() < 1e-8
        && (perfect.auc - 1.0).abs() <= 1e-12
        && perfect.mae == 0.0
        && summary_value(&out.join("summary.txt"), "maxF")? == 1.0
        && summary_value(&out.join("summary.txt"), "MAE")? == 0.0
        && summary_value(&out.join("summary.txt"), "AUC")? == 1.0;
    notes.push(format!(
        "perfect set maxF {:.10} AUC {:.13} MAE {}: {perfect_ok}",
        perfect.max_f, perfect.auc, perfect.mae
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut auc_ok = 0;
    for _ in 0..100 {
        let bits: Vec<u8> = loop {
            let b: Vec<u8> = (0..64).map(|_| u8::from(rng.gen_bool(0.3))).collect();
            let n = b.iter().filter(|&&v| v == 1).count();
            if n > 0 && n < 64 {
                break b;
            }
        };
        let bytes: Vec<u8> = bits.iter().map(|&b| rng.gen_range(0..200) + b * 40).collect();
        let (expect, np, nn) = mann_whitney(&bytes, &bits);
        let r = evaluate_set(
            &[SaliencyMap::from_bytes(8, 8, &bytes).unwrap()],
            &[BinaryMask::new(8, 8, bits).unwrap()],
        )
        .map_err(|e| e.to_string())?;
        if (r.auc - expect).abs() <= 1.0 / (np * nn) as f64 {
            auc_ok += 1;
        }
    }
    notes.push(format!("rank-statistic AUC {auc_ok}/100"));

    let toy = evaluate_set(
        &[
            SaliencyMap::from_bytes(1, 4, &[255, 0, 128, 64]).unwrap(),
            SaliencyMap::from_bytes(1, 4, &[200, 100, 0, 0]).unwrap(),
            SaliencyMap::from_bytes(1, 4, &[255, 255, 255, 255]).unwrap(),
        ],
        &[
            BinaryMask::new(1, 4, vec![1, 0, 1, 0]).unwrap(),
            BinaryMask::new(1, 4, vec![0, 1, 0, 0]).unwrap(),
            BinaryMask::new(1, 4, vec![1, 1, 0, 0]).unwrap(),
        ],
    )
    .map_err(|e| e.to_string())?;
    let avg_f = (13.0 / 27.0 + 64.0 * 13.0 / 21.0 + 36.0 * 13.0 / 18.0 + 28.0 * 26.0 / 49.0 + 127.0 * 0.5) / 256.0;
    let toy_dev = [
        toy.max_f - 13.0 / 18.0,
        toy.avg_f - avg_f,
        toy.auc - 25.0 / 36.0,
        toy.mae - 88.0 / 255.0,
    ]
    .iter()
    .fold(0.0f64, |m, d| m.max(d.abs()));
    notes.push(format!("3-frame hand report max |Δ| {toy_dev:.1e}"));

    Ok(outcome(f_ok && perfect_ok && auc_ok == 100 && toy_dev <= 1e-7, notes.join("; ")))
}

fn overfit(dir: &Path) -> Result<Outcome, String> {
    let cfg = dir.join("overfit.cfg");
    write_cfg(&cfg, &["stage = static", "synth_sequences = 4", "synth_frames = 5", "resolution = 64", "iterations = 2000"]);
    let out = dir.join("overfit");
    let start = Instant::now();
    nlsal_ok(&["train", "--config", p(&cfg), "--out", p(&out)])?;
    let secs = start.elapsed().as_secs_f64();
    let summary = out.join("static_train_summary.txt");
    let (max_f, mae) = (summary_value(&summary, "maxF")?, summary_value(&summary, "MAE")?);
    let trace: Vec<f64> = fs::read_to_string(out.join("static_loss.txt"))
        .map_err(|e| e.to_string())?
        .lines()
        .filter_map(|l| l.split_whitespace().nth(1)?.parse().ok())
        .collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&trace[..200]), mean(&trace[trace.len() - 200..]));
    Ok(outcome(
        max_f >= 0.95 && mae <= 0.05 && secs < 1800.0 && last < first,
        format!(
            "20 frames, 2000 iterations: maxF {max_f:.4}, MAE {mae:.4}, {secs:.0} s; mean loss {first:.1} → {last:.1}"
        ),
    ))
}

fn dynamic_refinement(dir: &Path) -> Result<Outcome, String> {
    let cfg = dir.join("dynamic.cfg");
    write_cfg(
        &cfg,
        &[
            "stage = both",
            "resolution = 64",
            "synth_sequences = 40",
            "synth_frames = 5",
            "synth_distractor = true",
            "iterations = 1500",
        ],
    );
    let train = dir.join("dyn_train");
    nlsal_ok(&["train", "--config", p(&cfg), "--out", p(&train)])?;
    let heldout = dir.join("dyn_heldout");
    synth_dataset(&SynthSpec {
        sequences: 8,
        frames_per_sequence: 5,
        size: 64,
        motion: 4,
        distractor: true,
        seed: 1000,
    })
    .and_then(|s| s.write(&heldout))
    .map_err(|e| e.to_string())?;
    let (st_w, dy_w) = (train.join("static.nlw"), train.join("dynamic.nlw"));
    let (inf_s, inf_d) = (dir.join("dyn_inf_static"), dir.join("dyn_inf_dynamic"));
    nlsal_ok(&["infer", "--config", p(&cfg), "--stage", "static", "--weights", p(&st_w), "--in", p(&heldout), "--out", p(&inf_s)])?;
    nlsal_ok(&[
        "infer", "--config", p(&cfg), "--stage", "dynamic", "--static-weights", p(&st_w), "--weights", p(&dy_w), "--in",
        p(&heldout), "--out", p(&inf_d),
    ])?;
    let mut maes = Vec::new();
    for (maps, name) in [(&inf_s, "dyn_eval_static"), (&inf_d, "dyn_eval_dynamic")] {
        let out = dir.join(name);
        nlsal_ok(&["eval", "--in", p(maps), "--gt", p(&heldout), "--out", p(&out)])?;
        maes.push(summary_value(&out.join("summary.txt"), "MAE")?);
    }
    Ok(outcome(
        maes[1] <= maes[0],
        format!("held-out MAE static {:.5}, dynamic {:.5}", maes[0], maes[1]),
    ))
}

fn ablation_ordering(dir: &Path) -> Result<Outcome, String> {
    let cfg = dir.join("ablate.cfg");
    write_cfg(
        &cfg,
        &[
            "resolution = 256",
            "synth_sequences = 1",
            "synth_frames = 3",
            "holdout_sequences = 1",
            "ablate_iterations = 2",
            "timing_rounds = 4",
        ],
    );
    let out = dir.join("ablate");
    nlsal_ok(&["ablate", "--config", p(&cfg), "--out", p(&out)])?;
    let csv = fs::read_to_string(out.join("ablation.csv")).map_err(|e| e.to_string())?;
    let mut time = std::collections::HashMap::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let secs: f64 = f[3].parse().map_err(|_| format!("bad row `{line}`"))?;
        time.insert((f[0].to_string(), f[1].to_string()), secs);
    }
    let well_formed = time.len() == 16 && time.contains_key(&(String::new(), "0".to_string()));
    let mut ordered = 0;
    let mut cells = Vec::new();
    for c in 1..=5 {
        let t = |b: usize| time.get(&(b.to_string(), c.to_string())).copied().unwrap_or(f64::NAN);
        let (t3, t4, t5) = (t(3), t(4), t(5));
        if t3 > t4 && t4 > t5 {
            ordered += 1;
        }
        cells.push(format!("{c}: {t3:.3}/{t4:.3}/{t5:.3}"));
    }
    if !well_formed {
        return Ok(outcome(false, format!("malformed ablation table:\n{csv}")));
    }
    Ok(Outcome {
        pass: ordered == 5,
        detail: format!(
            "256×256, mean s per frame after block 3/4/5, by count [{}]; ordered at {ordered}/5 counts",
            cells.join(", ")
        ),
        advisory: true,
    })
}

fn third_party_scoring(dir: &Path) -> Result<Outcome, String> {
    // maps from "another method": noisy soft masks, PGM files in their own
    // layout, one of them at half resolution
    let set = synth_dataset(&SynthSpec {
        sequences: 2,
        frames_per_sequence: 4,
        size: 48,
        seed: 77,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let gt_root = dir.join("tp_gt");
    set.write(&gt_root).map_err(|e| e.to_string())?;
    let maps_root = dir.join("tp_maps");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (i, s) in set.samples().iter().enumerate() {
        let g = s.gt.unwrap();
        let vals = g
            .bits()
            .iter()
            .map(|&b| (0.7 * f64::from(b) + rng.gen_range(0.0..0.3)).min(1.0))
            .collect();
        let mut m = SaliencyMap::new(48, 48, vals).unwrap();
        if i == 0 {
            m = m.resize_bilinear(24, 24);
        }
        let d = maps_root.join(s.seq_id).join("maps");
        fs::create_dir_all(&d).unwrap();
        save_map(d.join(format!("{}.pgm", s.stem)), &m).map_err(|e| e.to_string())?;
    }
    let out = dir.join("tp_eval");
    nlsal_ok(&["eval", "--in", p(&maps_root), "--gt", p(&gt_root), "--out", p(&out)])?;

    let mut maps = Vec::new();
    let mut gts = Vec::new();
    for s in set.samples() {
        maps.push(load_map(maps_root.join(s.seq_id).join("maps").join(format!("{}.pgm", s.stem))).map_err(|e| e.to_string())?);
        gts.push(load_groundtruth(gt_root.join(s.seq_id).join("gt").join(format!("{}.png", s.stem)), false).map_err(|e| e.to_string())?);
    }
    let direct = evaluate_set(&maps, &gts).map_err(|e| e.to_string())?;
    let cli_pr = fs::read_to_string(out.join("pr_curve.csv")).map_err(|e| e.to_string())?;
    let cli_roc = fs::read_to_string(out.join("roc_curve.csv")).map_err(|e| e.to_string())?;
    let summary = fs::read_to_string(out.join("summary.txt")).map_err(|e| e.to_string())?;
    let agree = cli_pr == direct.pr_csv() && cli_roc == direct.roc_csv() && summary == direct.summary();
    Ok(outcome(
        agree && direct.resized == 1 && direct.frames == 8,
        format!(
            "published benchmark figures need pretrained VGG weights and full-dataset GPU training and are not reproduced; \
             third-party map directory scored ({} frames, {} resized, maxF {:.4}, MAE {:.4}), CLI matches direct evaluation: {agree}",
            direct.frames, direct.resized, direct.max_f, direct.mae
        ),
    ))
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(dir: &Path) -> Result<Outcome, String> {
    let cfg = dir.join("det.cfg");
    write_cfg(
        &cfg,
        &["stage = both", "resolution = 32", "synth_sequences = 2", "synth_frames = 3", "iterations = 40", "checkpoint_every = 20"],
    );
    let data = dir.join("det_data");
    synth_dataset(&SynthSpec {
        sequences: 1,
        frames_per_sequence: 4,
        size: 32,
        seed: 9,
        ..Default::default()
    })
    .and_then(|s| s.write(&data))
    .map_err(|e| e.to_string())?;
    let mut compared = 0;
    let mut differing = Vec::new();
    let run = |tag: &str| -> Result<PathBuf, String> {
        let root = dir.join(format!("det_{tag}"));
        let train = root.join("train");
        nlsal_ok(&["train", "--config", p(&cfg), "--out", p(&train)])?;
        let (st, dy) = (train.join("static.nlw"), train.join("dynamic.nlw"));
        let maps = root.join("maps");
        nlsal_ok(&["infer", "--config", p(&cfg), "--static-weights", p(&st), "--weights", p(&dy), "--in", p(&data), "--out", p(&maps)])?;
        nlsal_ok(&["eval", "--in", p(&maps), "--gt", p(&data), "--out", p(&root.join("eval"))])?;
        nlsal_ok(&["gradcheck", "--out", p(&root.join("gc"))])?;
        Ok(root)
    };
    let (a, b) = (run("a")?, run("b")?);
    for rel in files_under(&a) {
        let name = rel.to_string_lossy();
        // wall-clock timings and the resolved output paths legitimately differ
        if name.ends_with("timing.txt") || name.ends_with("infer_meta.txt") || name.ends_with("resolved.cfg") {
            continue;
        }
        compared += 1;
        if fs::read(a.join(&rel)).ok() != fs::read(b.join(&rel)).ok() {
            differing.push(name.into_owned());
        }
    }
    let meta = |r: &Path| {
        fs::read_to_string(r.join("maps/infer_meta.txt"))
            .unwrap_or_default()
            .lines()
            .filter(|l| l.contains("sha256"))
            .map(|l| l.split(" = ").nth(1).unwrap_or("").to_string())
            .collect::<Vec<_>>()
    };
    let hashes_match = meta(&a) == meta(&b) && meta(&a).len() == 2;
    Ok(outcome(
        differing.is_empty() && compared > 10 && hashes_match,
        format!(
            "{compared} artifacts (weights, checkpoints, loss traces, maps, metric CSVs) byte-identical across two runs{}",
            if differing.is_empty() {
                String::new()
            } else {
                format!("; differing: {}", differing.join(", "))
            }
        ),
    ))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();
    let criteria: Vec<(&str, Check)> = vec![
        ("non-local attention equals naive oracle", Box::new(|_| nl_oracle_equivalence())),
        ("zero W_z gives exact residual identity", Box::new(|_| residual_identity())),
        ("gradient suite within 1e-5", Box::new(gradient_suite)),
        ("metric correctness", Box::new(metric_correctness)),
        ("overfit harness", Box::new(overfit)),
        ("dynamic refinement beats static on held-out", Box::new(dynamic_refinement)),
        ("ablation timing ordering", Box::new(ablation_ordering)),
        ("non-reproduction statement and third-party scoring", Box::new(third_party_scoring)),
        ("determinism", Box::new(determinism)),
    ];
    let mut gated_failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check(dir).unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let status = match (o.pass, o.advisory) {
            (true, _) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "FAIL (timing, not gated)",
        };
        println!("criterion {} {status}: {name}: {}", i + 1, o.detail);
        if !o.pass && !o.advisory {
            gated_failures += 1;
        }
    }
    if gated_failures > 0 {
        eprintln!("{gated_failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
