mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use nlsal_core::ablation::{run_ablation, AblationConfig};
use nlsal_core::data::{
    list_images, load_frame, load_frame_resized, load_groundtruth, load_map, save_map, synth_dataset,
    DatasetIndex, Frame, FrameSet, Sequence, SynthSpec,
};
use nlsal_core::metrics::evaluate_set;
use nlsal_core::nets::{dynamic_forward, static_forward, Network};
use nlsal_core::pipeline::{evaluate_predictions, predict_dynamic, predict_static};
use nlsal_core::train::{dynamic_samples, format_loss_trace, static_samples, train_stage, Stage};
use nlsal_core::verify::{run_suite, SuiteOptions, CHECKS};
use nlsal_core::weights;

use config::{RunConfig, StageSel};

/// Bad invocation or configuration; exits with status 1.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "nlsal", version, about = "Video salient-object detection with non-local blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the static and/or dynamic network.
    Train(TrainArgs),
    /// Write saliency maps for a directory of frames.
    Infer(InferArgs),
    /// Score a directory of maps against ground truth.
    Eval(EvalArgs),
    /// Compare every backward pass with finite differences.
    Gradcheck(GradcheckArgs),
    /// Sweep non-local block placement and count.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    stage: Option<StageSel>,
    /// Trained static weights; required for `--stage dynamic`.
    #[arg(long)]
    static_weights: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    stage: Option<StageSel>,
    /// Static weights for `--stage static`, dynamic weights otherwise.
    #[arg(long)]
    weights: PathBuf,
    /// Static weights feeding the dynamic network.
    #[arg(long)]
    static_weights: Option<PathBuf>,
    /// A directory of frames, or a dataset root with `<sequence>/frames`.
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of 8-bit saliency maps.
    #[arg(long = "in")]
    input: PathBuf,
    /// Directory of ground-truth masks.
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Corrupts one operation's backward pass (negative control).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| usage(format!("{}: {e:#}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write(&cfg.out.join("resolved.cfg"), cfg.render())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn keep_sequences(set: FrameSet, ids: &[String]) -> Result<FrameSet> {
    if ids.is_empty() {
        return Ok(set);
    }
    let sequences: Vec<Sequence> = set.sequences.into_iter().filter(|s| ids.contains(&s.id)).collect();
    if sequences.len() != ids.len() {
        bail!("only {} of the {} listed sequences exist", sequences.len(), ids.len());
    }
    Ok(FrameSet { sequences })
}

fn load_root(root: &Path, cfg: &RunConfig) -> Result<FrameSet> {
    let idx = DatasetIndex::scan(root)?;
    Ok(idx.load(cfg.resolution, cfg.resolution, cfg.flatten)?)
}

fn training_set(cfg: &RunConfig) -> Result<FrameSet> {
    match &cfg.dataset {
        None => Ok(synth_dataset(&SynthSpec {
            sequences: cfg.synth_sequences,
            frames_per_sequence: cfg.synth_frames,
            size: cfg.resolution,
            motion: cfg.synth_motion,
            distractor: cfg.synth_distractor,
            seed: cfg.synth_seed,
        })?),
        Some(root) => keep_sequences(load_root(root, cfg)?, &cfg.train_sequences),
    }
}

fn heldout_set(cfg: &RunConfig) -> Result<FrameSet> {
    if let Some(root) = &cfg.eval_dataset {
        return keep_sequences(load_root(root, cfg)?, &cfg.eval_sequences);
    }
    match &cfg.dataset {
        None => Ok(synth_dataset(&SynthSpec {
            sequences: cfg.holdout_sequences,
            frames_per_sequence: cfg.synth_frames,
            size: cfg.resolution,
            motion: cfg.synth_motion,
            distractor: cfg.synth_distractor,
            seed: cfg.holdout_seed,
        })?),
        Some(root) if !cfg.eval_sequences.is_empty() => keep_sequences(load_root(root, cfg)?, &cfg.eval_sequences),
        Some(_) => {
            log::warn!("no held-out data configured; scoring on the training set");
            training_set(cfg)
        }
    }
}

fn load_net(path: &Path, cfg: &RunConfig, stage: Stage) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = Network::build(cfg.spec(stage), &mut rng)?;
    let entries = weights::load(path)?;
    net.load_weights(entries)
        .with_context(|| format!("loading {} weights from {}", stage, path.display()))?;
    Ok(net)
}

fn stage_seed(seed: u64, stage: Stage) -> u64 {
    match stage {
        Stage::Static => seed,
        Stage::Dynamic => seed.wrapping_add(1),
    }
}

fn train_one(cfg: &RunConfig, stage: Stage, set: &FrameSet, static_net: Option<&Network>) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, stage));
    let mut net = Network::build(cfg.spec(stage), &mut rng)?;
    let samples = match static_net {
        None => static_samples(set),
        Some(st) => dynamic_samples(set, st)?,
    };
    let mut tc = cfg.train(stage);
    tc.seed = stage_seed(cfg.seed, stage);
    let ckpt_dir = cfg.out.join("checkpoints");
    let every = cfg.checkpoint_every;
    log::info!("training {stage} network on {} samples for {} iterations", samples.len(), tc.iterations);
    let started = Instant::now();
    let trace = train_stage(&mut net, &samples, &tc, |it, loss, net| {
        if it % 100 == 0 {
            log::info!("{stage} iteration {it}: loss {loss:.4}");
        }
        if every > 0 && it % every == 0 {
            fs::create_dir_all(&ckpt_dir).map_err(|e| nlsal_core::Error::io(&ckpt_dir, e))?;
            weights::save(ckpt_dir.join(format!("{stage}_{it:06}.nlw")), &net.weights())?;
        }
        Ok(true)
    })?;
    log::info!("{stage} training took {:.1} s", started.elapsed().as_secs_f64());
    weights::save(cfg.out.join(format!("{stage}.nlw")), &net.weights())?;
    write(&cfg.out.join(format!("{stage}_loss.txt")), format_loss_trace(&trace))?;

    let preds = match static_net {
        None => predict_static(&net, set)?,
        Some(st) => predict_dynamic(st, &net, set)?,
    };
    let report = evaluate_predictions(set, &preds)?;
    write(&cfg.out.join(format!("{stage}_train_summary.txt")), report.summary())?;
    log::info!("{stage} on training frames: maxF {:.4}, MAE {:.4}", report.max_f, report.mae);
    Ok(net)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(s) = args.stage {
        cfg.stage = s;
    }
    if cfg.stage == StageSel::Dynamic && args.static_weights.is_none() {
        return Err(usage("`--stage dynamic` needs `--static-weights`"));
    }
    prepare_out(&cfg)?;
    let set = training_set(&cfg)?;
    match cfg.stage {
        StageSel::Static => {
            train_one(&cfg, Stage::Static, &set, None)?;
        }
        StageSel::Dynamic => {
            let path = args.static_weights.as_deref().expect("checked above");
            let st = load_net(path, &cfg, Stage::Static)?;
            train_one(&cfg, Stage::Dynamic, &set, Some(&st))?;
        }
        StageSel::Both => {
            let st = train_one(&cfg, Stage::Static, &set, None)?;
            train_one(&cfg, Stage::Dynamic, &set, Some(&st))?;
        }
    }
    Ok(())
}

/// Frames of one output directory: `(relative output dir, [(stem, path)])`.
type FrameGroup = (PathBuf, Vec<(String, PathBuf)>);

fn frame_groups(input: &Path) -> Result<Vec<FrameGroup>> {
    let exts = ["png", "ppm"];
    let direct = list_images(input, &exts)?;
    if !direct.is_empty() {
        return Ok(vec![(PathBuf::new(), direct)]);
    }
    let idx = DatasetIndex::scan(input)?;
    Ok(idx
        .sequences
        .into_iter()
        .map(|s| {
            let frames = s.frames.into_iter().map(|f| (f.stem, f.frame)).collect();
            (PathBuf::from(s.id), frames)
        })
        .collect())
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(s) = args.stage {
        cfg.stage = s;
    }
    let chained = cfg.stage != StageSel::Static;
    if chained && args.static_weights.is_none() {
        return Err(usage("dynamic inference needs `--static-weights` as well as `--weights`"));
    }
    prepare_out(&cfg)?;
    let (static_path, dynamic_path) = if chained {
        (args.static_weights.clone().expect("checked above"), Some(args.weights.clone()))
    } else {
        (args.weights.clone(), None)
    };
    let static_net = load_net(&static_path, &cfg, Stage::Static)?;
    let dynamic_net = dynamic_path
        .as_deref()
        .map(|p| load_net(p, &cfg, Stage::Dynamic))
        .transpose()?;

    let res = cfg.resolution;
    let mut times = Vec::new();
    let mut timing = String::from("frame seconds\n");
    for (rel, frames) in frame_groups(&args.input)? {
        let dir = cfg.out.join(&rel);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut seq = Sequence {
            id: rel.display().to_string(),
            frames: Vec::with_capacity(frames.len()),
        };
        let mut native = Vec::with_capacity(frames.len());
        for (stem, path) in &frames {
            let s = load_frame(path)?.shape();
            native.push((s.h, s.w));
            seq.frames.push(Frame {
                stem: stem.clone(),
                image: load_frame_resized(path, res, res)?,
                gt: None,
            });
        }
        let set = FrameSet { sequences: vec![seq] };
        for (s, &(h, w)) in set.samples().iter().zip(&native) {
            let start = Instant::now();
            let st = static_forward(&static_net, s.frame_t)?;
            let map = match &dynamic_net {
                Some(dn) => dynamic_forward(dn, s.frame_t, s.frame_t1, &st)?,
                None => st,
            };
            let secs = start.elapsed().as_secs_f64();
            times.push(secs);
            timing.push_str(&format!("{} {secs:.6}\n", rel.join(s.stem).display()));
            let map = if (map.height(), map.width()) == (h, w) {
                map
            } else {
                map.resize_bilinear(h, w)
            };
            save_map(dir.join(format!("{}.png", s.stem)), &map)?;
        }
    }
    if times.is_empty() {
        return Err(nlsal_core::Error::Dataset(format!("no frames under {}", args.input.display())).into());
    }
    // the first frame pays for allocator and cache warm-up
    let timed = if times.len() > 1 { &times[1..] } else { &times[..] };
    let mean = timed.iter().sum::<f64>() / timed.len() as f64;
    let mut meta = format!(
        "stage = {}\nframes = {}\nresolution = {res}\nmean_frame_seconds = {mean:.6}\nstatic_weights = {}\nstatic_weights_sha256 = {}\n",
        if chained { "dynamic" } else { "static" },
        times.len(),
        static_path.display(),
        sha256_hex(&static_path)?,
    );
    if let Some(p) = &dynamic_path {
        meta.push_str(&format!("dynamic_weights = {}\ndynamic_weights_sha256 = {}\n", p.display(), sha256_hex(p)?));
    }
    write(&cfg.out.join("infer_meta.txt"), meta)?;
    write(&cfg.out.join("timing.txt"), timing)?;
    println!("{} maps written to {}; mean {mean:.4} s per frame", times.len(), cfg.out.display());
    Ok(())
}

/// Image files under `root`, keyed by their relative path without extension;
/// `frames`, `gt` and `maps` components are dropped so dataset layouts line up.
fn keyed_images(root: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    if !root.is_dir() {
        return Err(nlsal_core::Error::Dataset(format!("{} is not a directory", root.display())).into());
    }
    let mut out = BTreeMap::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.with_context(|| format!("walking {}", root.display()))?;
        let path = entry.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| exts.contains(&e.to_ascii_lowercase().as_str()));
        if !entry.file_type().is_file() || !ext_ok {
            continue;
        }
        let rel = path.strip_prefix(root).expect("walk stays under root").with_extension("");
        let key: Vec<String> = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .filter(|c| !matches!(c.as_str(), "frames" | "gt" | "maps"))
            .collect();
        out.insert(key.join("/"), path.to_path_buf());
    }
    Ok(out)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    prepare_out(&cfg)?;
    let maps = keyed_images(&args.input, &["png", "pgm"])?;
    let gts = keyed_images(&args.gt, &["png", "pgm"])?;
    let matched: Vec<(&String, &PathBuf, &PathBuf)> = maps
        .iter()
        .filter_map(|(k, m)| gts.get(k).map(|g| (k, m, g)))
        .collect();
    if matched.is_empty() {
        return Err(nlsal_core::Error::Dataset(format!(
            "no stems shared between {} and {}",
            args.input.display(),
            args.gt.display()
        ))
        .into());
    }
    if matched.len() < maps.len() || matched.len() < gts.len() {
        log::warn!(
            "{} of {} maps and {} ground truths matched",
            matched.len(),
            maps.len(),
            gts.len()
        );
    }
    let mut smaps = Vec::with_capacity(matched.len());
    let mut sgts = Vec::with_capacity(matched.len());
    for (_, m, g) in &matched {
        smaps.push(load_map(m)?);
        sgts.push(load_groundtruth(g, cfg.flatten)?);
    }
    let report = evaluate_set(&smaps, &sgts)?;
    if report.resized > 0 {
        log::warn!("{} maps were resized to their ground-truth size", report.resized);
    }
    write(&cfg.out.join("summary.txt"), report.summary())?;
    write(&cfg.out.join("pr_curve.csv"), report.pr_csv())?;
    write(&cfg.out.join("roc_curve.csv"), report.roc_csv())?;
    print!("{}", report.summary());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let corrupt = match args.corrupt.as_deref() {
        None => None,
        Some(op) => Some(
            *CHECKS
                .iter()
                .find(|&&c| c == op)
                .ok_or_else(|| usage(format!("`--corrupt`: unknown operation `{op}`")))?,
        ),
    };
    let report = run_suite(&SuiteOptions {
        seed: cfg.seed,
        corrupt,
        skip_network: false,
    })?;
    let text = report.render();
    print!("{text}");
    if args.common.out.is_some() || args.common.config.is_some() {
        prepare_out(&cfg)?;
        write(&cfg.out.join("gradcheck.txt"), &text)?;
    }
    if !report.passed() {
        bail!(
            "gradient check failed for {}",
            report
                .checks
                .iter()
                .filter(|c| !c.passed())
                .map(|c| c.name.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    prepare_out(&cfg)?;
    let train_set = training_set(&cfg)?;
    let eval_set = heldout_set(&cfg)?;
    let mut train = cfg.train(Stage::Static);
    train.iterations = cfg.ablate_iterations;
    let acfg = AblationConfig {
        train,
        timing_rounds: cfg.timing_rounds,
        ..Default::default()
    };
    let table = run_ablation(&cfg.spec(Stage::Static), &train_set, &eval_set, &acfg, cfg.seed)?;
    write(&cfg.out.join("ablation.csv"), table.to_csv())?;
    write(&cfg.out.join("ablation.txt"), table.render())?;
    print!("{}", table.render());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

