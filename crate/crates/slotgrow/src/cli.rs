//! Command-line surface: data generation, training, evaluation, mask
//! dumping, and one-factor ablation sweeps.
//!
//! Exit codes: 0 success, 2 usage or missing/invalid input, 3 numerical
//! abort (non-finite loss).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{
    generate_dataset, read_dataset, write_dataset, Featurizer, GenConfig, ShapeKind, VideoSample,
};
use crate::error::{Error, Result};
use crate::inference::{chunked_cyclic_rollout, cyclic_rollout, decode_masks, forward_rollout, write_masks};
use crate::inference::read_masks;
use crate::metrics::{aggregate, evaluate_clip, MetricsReport};
use crate::trainer::{
    config_digest, evaluate, load_checkpoint, train, InferenceMode, TrainOptions, TrainState,
};

fn config_key_help() -> String {
    let mut out = String::from("Config keys and defaults (set via file or --set KEY=VALUE):\n");
    for (k, v) in RunConfig::default().entries() {
        out.push_str(&format!("  {}={}\n", k, v));
    }
    out
}

#[derive(Parser)]
#[command(
    name = "slotgrow",
    version,
    about = "Object-centric video models with a growing slot bank",
    after_help = config_key_help()
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic moving-shapes dataset
    GenData(GenDataArgs),
    /// Train a model, writing a checkpoint and a log
    Train(TrainArgs),
    /// Score a checkpoint (or pre-computed mask dumps) on a dataset
    Eval(EvalArgs),
    /// Dump predicted segmentation masks, one file per clip
    Infer(InferArgs),
    /// Run a one-factor sweep, one training run per cell
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of clips
    #[arg(long, default_value_t = 200)]
    clips: usize,
    /// Base seed; clip i uses seed + i
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output dataset file
    #[arg(long)]
    out: PathBuf,
    /// Frames per clip
    #[arg(long, default_value_t = 6)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Objects per clip as an inclusive range LO-HI
    #[arg(long, default_value = "2-4")]
    objects: String,
    /// Object half-extent range in pixels, LO-HI
    #[arg(long, default_value = "6-12")]
    size: String,
    /// Speed range in pixels per frame, LO-HI
    #[arg(long, default_value = "1-3")]
    speed: String,
    /// Peak background texture deviation
    #[arg(long, default_value_t = 0.08)]
    bg_amplitude: f64,
    /// Comma list drawn from disk,rect,triangle
    #[arg(long, default_value = "disk,rect,triangle")]
    shapes: String,
}

/// Config source flags shared by train/eval/infer/ablate.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file of KEY=VALUE lines; defaults apply for absent keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable); applied after --config
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Total training iterations (key: total_iters)
    #[arg(long)]
    iters: Option<String>,
    /// Clips per batch (key: batch_size)
    #[arg(long)]
    batch_size: Option<String>,
    /// Peak learning rate (key: learning_rate)
    #[arg(long)]
    lr: Option<String>,
    /// Master seed (key: seed)
    #[arg(long)]
    seed: Option<String>,
    /// In-training eval cadence (key: eval_every)
    #[arg(long)]
    eval_every: Option<String>,
    /// Starting slot count (key: k_init)
    #[arg(long)]
    k_init: Option<String>,
    /// Base stage increment (key: sigma)
    #[arg(long)]
    sigma: Option<String>,
    /// Curriculum stage count (key: stages)
    #[arg(long)]
    stages: Option<String>,
    /// Comma list of stage boundary fractions (key: stage_fracs)
    #[arg(long)]
    stage_fracs: Option<String>,
    /// accelerated|linear|decelerated (key: schedule)
    #[arg(long)]
    schedule: Option<String>,
    /// Spawn repulsion coefficient (key: beta)
    #[arg(long)]
    beta: Option<String>,
    /// total|area (key: spawn_criterion)
    #[arg(long)]
    spawn_criterion: Option<String>,
    /// Structural loss weight (key: lambda_ssim)
    #[arg(long)]
    lambda_ssim: Option<String>,
    /// Contrastive loss weight (key: lambda_ssc)
    #[arg(long)]
    lambda_ssc: Option<String>,
    /// Contrastive temperature (key: tau)
    #[arg(long)]
    tau: Option<String>,
    /// 3d|2d|off (key: ssim_mode)
    #[arg(long)]
    ssim_mode: Option<String>,
    /// Featurizer patch edge in pixels (key: patch)
    #[arg(long)]
    patch: Option<String>,
    /// Slot bank capacity (key: k_max)
    #[arg(long)]
    k_max: Option<String>,
}

impl ConfigArgs {
    /// Resolve the effective config: file, then --set pairs, then
    /// dedicated flags, later sources overriding earlier ones.
    fn resolve(&self, sidecar: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, sidecar) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(path)) if path.exists() => {
                eprintln!("note: using config sidecar {}", path.display());
                RunConfig::load(path)?
            }
            _ => RunConfig::default(),
        };
        for pair in &self.set {
            let (k, v) = pair.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects KEY=VALUE, got '{}'", pair))
            })?;
            cfg.apply(k.trim(), v)?;
        }
        let flags: [(&str, &Option<String>); 18] = [
            ("total_iters", &self.iters),
            ("batch_size", &self.batch_size),
            ("learning_rate", &self.lr),
            ("seed", &self.seed),
            ("eval_every", &self.eval_every),
            ("k_init", &self.k_init),
            ("sigma", &self.sigma),
            ("stages", &self.stages),
            ("stage_fracs", &self.stage_fracs),
            ("schedule", &self.schedule),
            ("beta", &self.beta),
            ("spawn_criterion", &self.spawn_criterion),
            ("lambda_ssim", &self.lambda_ssim),
            ("lambda_ssc", &self.lambda_ssc),
            ("tau", &self.tau),
            ("ssim_mode", &self.ssim_mode),
            ("patch", &self.patch),
            ("k_max", &self.k_max),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.apply(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path
    #[arg(long, default_value = "model.sck")]
    out: PathBuf,
    /// Append the training log here
    #[arg(long)]
    log: Option<PathBuf>,
    /// Resume from this checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also checkpoint every N iterations (0: only at the end)
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score
    #[arg(long, conflicts_with = "masks_dir")]
    ckpt: Option<PathBuf>,
    /// Score pre-computed SCM1 dumps from this directory instead
    #[arg(long)]
    masks_dir: Option<PathBuf>,
    /// Evaluation dataset with ground-truth masks
    #[arg(long)]
    data: PathBuf,
    /// forward|cyclic|chunked
    #[arg(long, default_value = "cyclic")]
    inference: String,
    /// Chunk length C (used with --inference chunked)
    #[arg(long, default_value_t = 0)]
    chunk: usize,
    /// Comma list of overlap thresholds
    #[arg(long, default_value = "0.3,0.5,0.7")]
    rho: String,
    /// Report base path; writes BASE.txt and BASE.json
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for one SCM1 file per clip
    #[arg(long)]
    out_dir: PathBuf,
    /// forward|cyclic|chunked
    #[arg(long, default_value = "cyclic")]
    inference: String,
    #[arg(long, default_value_t = 0)]
    chunk: usize,
    /// Only this clip index
    #[arg(long)]
    clip: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// m|beta|lambda|k|schedule
    #[arg(long)]
    sweep: String,
    #[arg(long)]
    data: PathBuf,
    /// One subdirectory per cell plus summary.txt
    #[arg(long)]
    out_dir: PathBuf,
    /// forward|cyclic|chunked rollout for the per-cell evaluation
    #[arg(long, default_value = "cyclic")]
    inference: String,
    #[arg(long, default_value_t = 0)]
    chunk: usize,
    #[arg(long, default_value = "0.3,0.5,0.7")]
    rho: String,
    #[command(flatten)]
    cfg: ConfigArgs,
}

/// Parse and dispatch; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e @ Error::NonFinite { .. }) => {
            eprintln!("error: {}", e);
            3
        }
        Err(e) => {
            eprintln!("error: {}", e);
            2
        }
    }
}

fn parse_range_f64(flag: &str, s: &str) -> Result<(f64, f64)> {
    let (lo, hi) = s.split_once('-').ok_or_else(|| {
        Error::Config(format!("--{} expects LO-HI, got '{}'", flag, s))
    })?;
    let lo: f64 = lo.trim().parse().map_err(|_| {
        Error::Config(format!("--{} has invalid lower bound '{}'", flag, s))
    })?;
    let hi: f64 = hi.trim().parse().map_err(|_| {
        Error::Config(format!("--{} has invalid upper bound '{}'", flag, s))
    })?;
    if lo > hi {
        return Err(Error::Config(format!(
            "--{} range is inverted: {} > {}",
            flag, lo, hi
        )));
    }
    Ok((lo, hi))
}

fn parse_range_usize(flag: &str, s: &str) -> Result<(usize, usize)> {
    let (lo, hi) = parse_range_f64(flag, s)?;
    if lo.fract() != 0.0 || hi.fract() != 0.0 || lo < 0.0 {
        return Err(Error::Config(format!(
            "--{} expects whole numbers, got '{}'",
            flag, s
        )));
    }
    Ok((lo as usize, hi as usize))
}

fn parse_rhos(s: &str) -> Result<Vec<f64>> {
    let rhos: Vec<f64> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("invalid threshold '{}'", p)))
        })
        .collect::<Result<_>>()?;
    if rhos.is_empty() || rhos.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
        return Err(Error::Config(format!(
            "thresholds must lie in (0, 1], got '{}'",
            s
        )));
    }
    Ok(rhos)
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let (min_objects, max_objects) = parse_range_usize("objects", &a.objects)?;
    let (min_size, max_size) = parse_range_f64("size", &a.size)?;
    let (min_speed, max_speed) = parse_range_f64("speed", &a.speed)?;
    let shapes: Vec<ShapeKind> = a
        .shapes
        .split(',')
        .map(|s| ShapeKind::parse(s.trim()))
        .collect::<Result<_>>()?;
    let cfg = GenConfig {
        t: a.frames,
        height: a.height,
        width: a.width,
        min_objects,
        max_objects,
        shapes,
        min_size,
        max_size,
        min_speed,
        max_speed,
        background_amplitude: a.bg_amplitude,
    };
    let samples = generate_dataset(&cfg, a.seed, a.clips)?;
    write_dataset(&samples, &a.out)?;
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &samples {
        *histogram.entry(s.masks.max_id() as usize).or_insert(0) += 1;
    }
    println!("objects\tclips");
    for (objects, clips) in &histogram {
        println!("{}\t{}", objects, clips);
    }
    println!("wrote {} clips to {}", samples.len(), a.out.display());
    Ok(())
}

/// Every clip in a file must share one frame geometry.
fn check_uniform(dataset: &[VideoSample], path: &Path) -> Result<(usize, usize)> {
    let first = dataset.first().ok_or_else(|| Error::Config(format!(
        "dataset {} is empty",
        path.display()
    )))?;
    let (h, w) = (first.height(), first.width());
    for s in dataset {
        if s.height() != h || s.width() != w || s.t() != first.t() {
            return Err(Error::Config(format!(
                "dataset {} mixes clip geometries (clip {} is {}x{}x{})",
                path.display(),
                s.clip_id,
                s.t(),
                s.height(),
                s.width()
            )));
        }
    }
    Ok((h, w))
}

fn build_featurizer(cfg: &RunConfig, h: usize, w: usize) -> Result<Featurizer> {
    let featurizer = Featurizer::new(cfg.patch, cfg.train.model.d_feat, h, w, cfg.feat_seed)?;
    let n = featurizer.grid_h * featurizer.grid_w;
    if n != cfg.train.model.n {
        return Err(Error::Config(format!(
            "model expects n={} patches but {}x{} frames with patch={} give {}x{}={}; set n={}",
            cfg.train.model.n,
            h,
            w,
            cfg.patch,
            featurizer.grid_h,
            featurizer.grid_w,
            n,
            n
        )));
    }
    Ok(featurizer)
}

fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut os = ckpt.as_os_str().to_owned();
    os.push(".cfg");
    PathBuf::from(os)
}

fn echo_config(cfg: &RunConfig, log: Option<&Path>) -> Result<()> {
    if let Some(path) = log {
        let file = File::options()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for (k, v) in cfg.entries() {
            writeln!(w, "config {}={}", k, v).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve(None)?;
    let dataset = read_dataset(&a.data)?;
    let (h, w) = check_uniform(&dataset, &a.data)?;
    let featurizer = build_featurizer(&cfg, h, w)?;
    let resume = match &a.resume {
        Some(path) => {
            let (state, digest) = load_checkpoint(path, &cfg.train)?;
            if digest != config_digest(&cfg.train) {
                eprintln!(
                    "warning: {} was written under a different config; resuming with the current one",
                    path.display()
                );
            }
            println!("resuming from {} at iteration {}", path.display(), state.iter);
            Some(state)
        }
        None => None,
    };
    echo_config(&cfg, a.log.as_deref())?;
    std::fs::write(sidecar_path(&a.out), cfg.to_kv_string())
        .map_err(|e| Error::io(sidecar_path(&a.out), e))?;
    let opts = TrainOptions {
        log_path: a.log.as_deref(),
        checkpoint_path: Some(&a.out),
        checkpoint_every: a.checkpoint_every,
        stop_after: None,
    };
    let outcome = train(&cfg.train, &dataset, &featurizer, resume, &opts)?;
    for ev in &outcome.events {
        println!(
            "expansion\titer={}\tstage={}\tk={}->{}",
            ev.iter, ev.m, ev.k_old, ev.k_new
        );
    }
    println!(
        "done\titers={}\tk={}\tloss={:.6}\tmse={:.6}\tssc={:.6}\tssim={:.6}",
        outcome.state.iter,
        outcome.state.bank.active_k,
        outcome.last.total,
        outcome.last.mse,
        outcome.last.ssc,
        outcome.last.ssim
    );
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn load_for_inference(
    ckpt: &Path,
    cfg_args: &ConfigArgs,
) -> Result<(RunConfig, TrainState)> {
    let sidecar = sidecar_path(ckpt);
    let cfg = cfg_args.resolve(Some(&sidecar))?;
    let (state, digest) = load_checkpoint(ckpt, &cfg.train)?;
    if digest != config_digest(&cfg.train) {
        eprintln!(
            "warning: {} was written under a different config than the one in effect",
            ckpt.display()
        );
    }
    Ok((cfg, state))
}

fn report_table(report: &MetricsReport) -> String {
    let mut out = String::from("metric\tvalue\n");
    for line in report.to_kv().lines() {
        if let Some((k, v)) = line.split_once('=') {
            out.push_str(&format!("{}\t{}\n", k, v));
        }
    }
    out
}

fn write_report(report: &MetricsReport, base: &Path) -> Result<()> {
    let txt = base.with_extension("txt");
    std::fs::write(&txt, report_table(report)).map_err(|e| Error::io(&txt, e))?;
    let json = base.with_extension("json");
    let body = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("report serialization failed: {}", e)))?;
    std::fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let rhos = parse_rhos(&a.rho)?;
    let dataset = read_dataset(&a.data)?;
    check_uniform(&dataset, &a.data)?;
    let report = match (&a.ckpt, &a.masks_dir) {
        (Some(ckpt), None) => {
            let mode = InferenceMode::parse(&a.inference, a.chunk)?;
            let (cfg, state) = load_for_inference(ckpt, &a.cfg)?;
            let (h, w) = check_uniform(&dataset, &a.data)?;
            let featurizer = build_featurizer(&cfg, h, w)?;
            evaluate(
                &state.params,
                &cfg.train.model,
                state.bank.active_k,
                &dataset,
                &featurizer,
                mode,
                &rhos,
            )?
        }
        (None, Some(dir)) => {
            let mut per_clip = Vec::with_capacity(dataset.len());
            for clip in &dataset {
                let path = dir.join(mask_file_name(clip.clip_id));
                let (pred, _k) = read_masks(&path)?;
                per_clip.push(evaluate_clip(&pred, &clip.masks, &rhos));
            }
            aggregate(per_clip, &rhos)
        }
        _ => {
            return Err(Error::Config(
                "exactly one of --ckpt and --masks-dir is required".into(),
            ))
        }
    };
    print!("{}", report_table(&report));
    if let Some(base) = &a.out {
        write_report(&report, base)?;
        println!(
            "reports written to {} and {}",
            base.with_extension("txt").display(),
            base.with_extension("json").display()
        );
    }
    Ok(())
}

fn mask_file_name(clip_id: u64) -> String {
    format!("clip_{:06}.scm", clip_id)
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let mode = InferenceMode::parse(&a.inference, a.chunk)?;
    let dataset = read_dataset(&a.data)?;
    let (h, w) = check_uniform(&dataset, &a.data)?;
    let (cfg, state) = load_for_inference(&a.ckpt, &a.cfg)?;
    let featurizer = build_featurizer(&cfg, h, w)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let active_k = state.bank.active_k;
    for (i, clip) in dataset.iter().enumerate() {
        if a.clip.is_some_and(|only| only != i) {
            continue;
        }
        let feats = featurizer.featurize(&clip.frames)?;
        let states = match mode {
            InferenceMode::Forward => {
                forward_rollout(&state.params, &cfg.train.model, &feats.p, active_k)
            }
            InferenceMode::Cyclic => {
                cyclic_rollout(&state.params, &cfg.train.model, &feats.p, active_k)
            }
            InferenceMode::Chunked(c) => {
                chunked_cyclic_rollout(&state.params, &cfg.train.model, &feats.p, active_k, c)
            }
        };
        let masks = decode_masks(&states, &state.params, &cfg.train.model, h, w, featurizer.patch);
        let path = a.out_dir.join(mask_file_name(clip.clip_id));
        write_masks(&path, &masks.pred, active_k)?;
        println!(
            "wrote {}\tframes={}\tk={}",
            path.display(),
            masks.pred.t,
            active_k
        );
    }
    Ok(())
}

struct SweepCell {
    label: String,
    assignments: Vec<(&'static str, String)>,
}

fn sweep_cells(name: &str) -> Result<Vec<SweepCell>> {
    let cells = match name {
        "m" => vec![
            ("m=2", vec![("stages", "2"), ("stage_fracs", "0.1")]),
            ("m=3", vec![("stages", "3"), ("stage_fracs", "0.1,0.25")]),
            ("m=4", vec![("stages", "4"), ("stage_fracs", "0.1,0.25,0.45")]),
        ],
        "beta" => vec![
            ("beta=0.1", vec![("beta", "0.1")]),
            ("beta=0.2", vec![("beta", "0.2")]),
            ("beta=0.3", vec![("beta", "0.3")]),
        ],
        "lambda" => vec![
            ("lambda=0.02", vec![("lambda_ssim", "0.02")]),
            ("lambda=0.05", vec![("lambda_ssim", "0.05")]),
            ("lambda=0.07", vec![("lambda_ssim", "0.07")]),
        ],
        "k" => vec![
            ("k=7", vec![("sigma", "1")]),
            ("k=11", vec![("sigma", "3")]),
            ("k=15", vec![("sigma", "5")]),
        ],
        "schedule" => vec![
            ("schedule=accelerated", vec![("schedule", "accelerated")]),
            ("schedule=linear", vec![("schedule", "linear")]),
            ("schedule=decelerated", vec![("schedule", "decelerated")]),
        ],
        other => {
            return Err(Error::Config(format!(
                "unknown sweep '{}', expected m|beta|lambda|k|schedule",
                other
            )))
        }
    };
    Ok(cells
        .into_iter()
        .map(|(label, assignments)| SweepCell {
            label: label.to_string(),
            assignments: assignments
                .into_iter()
                .map(|(k, v)| (k, v.to_string()))
                .collect(),
        })
        .collect())
}

fn summary_value(v: &crate::metrics::MetricValue) -> String {
    match v.mean {
        Some(x) => format!("{:.4}", x),
        None => "undefined".to_string(),
    }
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cells = sweep_cells(&a.sweep)?;
    let mode = InferenceMode::parse(&a.inference, a.chunk)?;
    let rhos = parse_rhos(&a.rho)?;
    let base = a.cfg.resolve(None)?;
    let dataset = read_dataset(&a.data)?;
    let (h, w) = check_uniform(&dataset, &a.data)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut summary = String::from("cell\tseed\tfg_ari_video\tmbo_video\toir@0.5\tdof@0.5\tduf@0.5\n");
    for (index, cell) in cells.iter().enumerate() {
        let mut cfg = base.clone();
        for (k, v) in &cell.assignments {
            cfg.apply(k, v)?;
        }
        cfg.train.seed = base.train.seed + index as u64;
        cfg.validate()?;
        let featurizer = build_featurizer(&cfg, h, w)?;
        let cell_dir = a.out_dir.join(&cell.label);
        std::fs::create_dir_all(&cell_dir).map_err(|e| Error::io(&cell_dir, e))?;
        let ckpt = cell_dir.join("model.sck");
        let log = cell_dir.join("train.log");
        echo_config(&cfg, Some(&log))?;
        std::fs::write(sidecar_path(&ckpt), cfg.to_kv_string())
            .map_err(|e| Error::io(sidecar_path(&ckpt), e))?;
        println!("running {} (seed {})", cell.label, cfg.train.seed);
        let opts = TrainOptions {
            log_path: Some(&log),
            checkpoint_path: Some(&ckpt),
            checkpoint_every: 0,
            stop_after: None,
        };
        let outcome = train(&cfg.train, &dataset, &featurizer, None, &opts)?;
        let report = evaluate(
            &outcome.state.params,
            &cfg.train.model,
            outcome.state.bank.active_k,
            &dataset,
            &featurizer,
            mode,
            &rhos,
        )?;
        write_report(&report, &cell_dir.join("report"))?;
        let at = |map: &BTreeMap<String, crate::metrics::MetricValue>| {
            map.get("0.5")
                .map(summary_value)
                .unwrap_or_else(|| "-".to_string())
        };
        summary.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            cell.label,
            cfg.train.seed,
            summary_value(&report.fg_ari_video),
            summary_value(&report.mbo_video),
            at(&report.oir),
            at(&report.dof),
            at(&report.duf)
        ));
    }
    let summary_path = a.out_dir.join("summary.txt");
    std::fs::write(&summary_path, &summary).map_err(|e| Error::io(&summary_path, e))?;
    print!("{}", summary);
    println!("summary written to {}", summary_path.display());
    Ok(())
}
