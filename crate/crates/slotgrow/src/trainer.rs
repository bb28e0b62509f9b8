//! The training loop: batch sampling, the combined objective, adaptive
//! moment optimization with warmup and gradient clipping, curriculum
//! expansions, checkpointing with exact resume, and evaluation.

use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::curriculum::{
    expand, slot_error_mass, slots_at_stage, CurriculumSchedule, DeltaEma, ExpansionEvent,
    SpawnConfig,
};
use crate::data::{Featurizer, VideoSample};
use crate::error::{Error, Result};
use crate::inference::{chunked_cyclic_rollout, cyclic_rollout, decode_masks, forward_rollout};
use crate::losses::{batch_loss, LossBreakdown, LossConfig};
use crate::metrics::{aggregate, evaluate_clip, MetricsReport};
use crate::model::{forward_batch, params_to_tape, ModelConfig, Params, SlotBank};
use crate::tensor::{Engine, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything a training run needs beyond the dataset itself.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of iterations spent in linear warmup.
    pub warmup_frac: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Evaluate on the training set every this many iterations; 0 disables.
    pub eval_every: usize,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub schedule: CurriculumSchedule,
    pub spawn: SpawnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 9000,
            batch_size: 8,
            learning_rate: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_frac: 0.05,
            clip_norm: 1.0,
            seed: 0,
            eval_every: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            schedule: CurriculumSchedule::default(),
            spawn: SpawnConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters < 1 {
            return Err(Error::Config("total_iters must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{} must lie in [0, 1), got {}", name, b)));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup_frac must lie in [0, 1), got {}",
                self.warmup_frac
            )));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        self.spawn.validate()?;
        if self.schedule.k_init > self.model.k_max || self.schedule.k_final() > self.model.k_max {
            return Err(Error::Config(format!(
                "schedule reaches {} slots but the bank holds only {}",
                self.schedule.k_final(),
                self.model.k_max
            )));
        }
        Ok(())
    }
}

/// Learning rate at an iteration: linear warmup, then constant.
pub fn lr_at(cfg: &TrainConfig, iter: usize) -> f64 {
    let warmup = ((cfg.warmup_frac * cfg.total_iters as f64).floor() as usize).max(1);
    if iter < warmup {
        cfg.learning_rate * (iter + 1) as f64 / warmup as f64
    } else {
        cfg.learning_rate
    }
}

/// First and second moments, one pair per parameter in canonical order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Completed optimizer steps (for bias correction).
    pub t: usize,
}

impl AdamState {
    pub fn new(params: &Params<Tensor>) -> AdamState {
        let mut m = Vec::new();
        params.visit(&mut |_, t: &Tensor| m.push(Tensor::zeros(t.shape())));
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// Scale gradients so their global norm is at most `max_norm`; returns the
/// pre-clip norm. A zero ceiling disables clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One adaptive-moment update over all parameters.
pub fn adam_step(
    params: &mut Params<Tensor>,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut i = 0usize;
    params.visit_mut(&mut |_, p: &mut Tensor| {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let pd = p.data_mut();
        for j in 0..pd.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            pd[j] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
        i += 1;
    });
}

/// Complete mutable state of a run; exactly what a checkpoint stores.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: Params<Tensor>,
    pub bank: SlotBank,
    /// Current curriculum stage.
    pub stage: usize,
    pub adam: AdamState,
    pub ema: DeltaEma,
    /// Iterations completed.
    pub iter: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig) -> TrainState {
        let params = Params::init_seeded(&cfg.model, cfg.seed);
        let k0 = slots_at_stage(&cfg.schedule, 0);
        TrainState {
            params,
            bank: SlotBank::new(k0, cfg.model.k_max),
            stage: 0,
            adam: AdamState::new(&Params::init_seeded(&cfg.model, cfg.seed)),
            ema: DeltaEma::new(k0, cfg.spawn.ema_decay),
            iter: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
        }
    }
}

/// The results of a (possibly resumed) training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// One line per iteration plus event records, in emission order.
    pub log: Vec<String>,
    pub events: Vec<ExpansionEvent>,
    pub last: LossBreakdown,
}

struct Logger {
    lines: Vec<String>,
    sink: Option<BufWriter<File>>,
}

impl Logger {
    fn open(path: Option<&Path>) -> Result<Logger> {
        let sink = match path {
            Some(p) => {
                let file = File::options()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?;
                Some(BufWriter::new(file))
            }
            None => None,
        };
        Ok(Logger { lines: Vec::new(), sink })
    }

    fn record(&mut self, line: String) {
        if let Some(sink) = &mut self.sink {
            let _ = writeln!(sink, "{}", line);
        }
        self.lines.push(line);
    }
}

fn batch_features(features: &[Tensor], idx: &[usize]) -> Tensor {
    let per = features[idx[0]].shape().to_vec();
    let mut data = Vec::with_capacity(idx.len() * features[idx[0]].numel());
    for &i in idx {
        assert_eq!(features[i].shape(), &per[..], "clips must share a shape");
        data.extend_from_slice(features[i].data());
    }
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(&per);
    Tensor::new(shape, data)
}

/// Output destinations and pause control for one [`train`] invocation.
#[derive(Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    pub log_path: Option<&'a Path>,
    /// Where to write checkpoints; the latest state overwrites this path.
    pub checkpoint_path: Option<&'a Path>,
    /// Also save every this many iterations; 0 saves only on exit.
    pub checkpoint_every: usize,
    /// Pause this invocation after processing N iterations. The schedule is
    /// still governed by `total_iters`; a later call can resume from the
    /// checkpoint and the combined run is step-identical to an
    /// uninterrupted one.
    pub stop_after: Option<usize>,
}

/// Run (or continue) training.
///
/// `resume` continues exactly where a loaded state left off; a fresh state
/// is created otherwise. The loop is single-threaded and drives all
/// randomness from one checkpointed generator, so a resumed run is
/// step-identical to an uninterrupted one.
pub fn train(
    cfg: &TrainConfig,
    dataset: &[VideoSample],
    featurizer: &Featurizer,
    resume: Option<TrainState>,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let features: Vec<Tensor> = dataset
        .iter()
        .map(|clip| featurizer.featurize(&clip.frames).map(|f| f.p))
        .collect::<Result<_>>()?;
    let (grid_h, grid_w) = (featurizer.grid_h, featurizer.grid_w);

    let mut state = resume.unwrap_or_else(|| TrainState::fresh(cfg));
    let mut logger = Logger::open(opts.log_path)?;
    let mut events = Vec::new();
    let mut last = LossBreakdown::default();
    let boundaries = cfg.schedule.boundary_iters(cfg.total_iters);

    let mut shapes = Vec::new();
    state.params.visit(&mut |_, t: &Tensor| shapes.push(t.shape().to_vec()));

    let mut processed = 0usize;
    while state.iter < cfg.total_iters {
        if opts.stop_after.is_some_and(|n| processed >= n) {
            break;
        }
        let iter = state.iter;

        // stage boundaries fire before the step
        while state.stage + 1 < cfg.schedule.stages && boundaries[state.stage] == iter {
            let ev = expand(
                &mut state.params.bank,
                &mut state.bank,
                &cfg.schedule,
                &cfg.spawn,
                &state.ema.values().to_vec(),
                state.stage + 1,
                iter,
                &mut state.rng,
            );
            state.stage += 1;
            state.ema.reset(state.bank.active_k);
            shapes.clear();
            state.params.visit(&mut |_, t: &Tensor| shapes.push(t.shape().to_vec()));
            logger.record(format!(
                "event=expand iter={} m={} k_old={} k_new={} stats={}",
                ev.iter,
                ev.m,
                ev.k_old,
                ev.k_new,
                serde_json::to_string(&ev.stats).unwrap_or_default()
            ));
            events.push(ev);
        }

        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| state.rng.gen_range(0..dataset.len()))
            .collect();
        let feats = batch_features(&features, &batch);

        let mut tape = Tape::new();
        let p_vars = params_to_tape(&state.params, &mut tape);
        let mut var_order: Vec<Var> = Vec::with_capacity(shapes.len());
        p_vars.visit(&mut |_, v: &Var| var_order.push(*v));
        let fx = tape.constant(feats);
        let fwd = forward_batch(&mut tape, &p_vars, &cfg.model, &fx, state.bank.active_k);
        let loss = batch_loss(&mut tape, &fwd, &fx, &cfg.loss, grid_h, grid_w);
        last = loss.breakdown;
        if !last.total.is_finite() {
            return Err(Error::NonFinite {
                iter,
                detail: format!(
                    "loss breakdown mse={} ssc={} ssim={} on batch clips {:?}",
                    last.mse, last.ssc, last.ssim, batch
                ),
            });
        }

        // slot-error accounting from this batch's decoder mixture
        let alpha = tape.value(&fwd.decode.alpha); // [B*T, K, N]
        let f_frames = alpha.shape()[0];
        let map = loss.mse_map.reshaped(&[f_frames, cfg.model.n]);
        let delta = slot_error_mass(&alpha, &map, cfg.spawn.criterion);
        state.ema.update(&delta);

        let grads = tape.backward(loss.total);
        let mut grad_list: Vec<Tensor> = var_order
            .iter()
            .zip(&shapes)
            .map(|(&v, s)| grads.wrt(v, s))
            .collect();
        let gnorm = clip_gradients(&mut grad_list, cfg.clip_norm);
        let lr = lr_at(cfg, iter);
        adam_step(&mut state.params, &grad_list, &mut state.adam, lr, cfg);
        if !state.params.all_finite() {
            return Err(Error::NonFinite {
                iter,
                detail: format!("parameters left finite range after the update (grad norm {})", gnorm),
            });
        }

        logger.record(format!(
            "iter={} k={} lr={:.6e} loss={:.6} mse={:.6} ssc={:.6} ssim={:.6} gnorm={:.4}",
            iter, state.bank.active_k, lr, last.total, last.mse, last.ssc, last.ssim, gnorm
        ));

        state.iter += 1;
        processed += 1;

        if cfg.eval_every > 0 && state.iter % cfg.eval_every == 0 {
            let report = evaluate(
                &state.params,
                &cfg.model,
                state.bank.active_k,
                dataset,
                featurizer,
                InferenceMode::Forward,
                &[0.5],
            )?;
            logger.record(format!(
                "event=eval iter={} fg_ari_video={:?} mbo_video={:?}",
                state.iter, report.fg_ari_video.mean, report.mbo_video.mean
            ));
        }
        if let Some(p) = opts.checkpoint_path {
            if opts.checkpoint_every > 0 && state.iter % opts.checkpoint_every == 0 {
                save_checkpoint(&state, cfg, p)?;
            }
        }
    }
    if let Some(p) = opts.checkpoint_path {
        save_checkpoint(&state, cfg, p)?;
    }

    Ok(TrainOutcome {
        state,
        log: logger.lines,
        events,
        last,
    })
}

/// Rollout strategy used at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferenceMode {
    Forward,
    Cyclic,
    Chunked(usize),
}

impl InferenceMode {
    pub fn parse(name: &str, chunk: usize) -> Result<InferenceMode> {
        match name {
            "forward" => Ok(InferenceMode::Forward),
            "cyclic" => Ok(InferenceMode::Cyclic),
            "chunked" => {
                if chunk < 1 {
                    return Err(Error::Config("chunk size must be at least 1".into()));
                }
                Ok(InferenceMode::Chunked(chunk))
            }
            other => Err(Error::Config(format!(
                "unknown inference mode '{}', expected forward|cyclic|chunked",
                other
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            InferenceMode::Forward => "forward",
            InferenceMode::Cyclic => "cyclic",
            InferenceMode::Chunked(_) => "chunked",
        }
    }
}

/// Score a parameter set over a dataset with the chosen rollout.
pub fn evaluate(
    params: &Params<Tensor>,
    mcfg: &ModelConfig,
    active_k: usize,
    dataset: &[VideoSample],
    featurizer: &Featurizer,
    mode: InferenceMode,
    rhos: &[f64],
) -> Result<MetricsReport> {
    let mut per_clip = Vec::with_capacity(dataset.len());
    for clip in dataset {
        let feats = featurizer.featurize(&clip.frames)?;
        let states = match mode {
            InferenceMode::Forward => forward_rollout(params, mcfg, &feats.p, active_k),
            InferenceMode::Cyclic => cyclic_rollout(params, mcfg, &feats.p, active_k),
            InferenceMode::Chunked(c) => {
                chunked_cyclic_rollout(params, mcfg, &feats.p, active_k, c)
            }
        };
        let masks = decode_masks(
            &states,
            params,
            mcfg,
            clip.height(),
            clip.width(),
            featurizer.patch,
        );
        per_clip.push(evaluate_clip(&masks.pred, &clip.masks, rhos));
    }
    Ok(aggregate(per_clip, rhos))
}

// --- checkpointing ----------------------------------------------------------

/// Stable digest of the parts of the config a checkpoint depends on.
pub fn config_digest(cfg: &TrainConfig) -> u64 {
    let json = serde_json::to_string(cfg).expect("config is serializable");
    // FNV-1a; stable across builds, unlike the std hasher
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in json.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize the full training state; the byte stream is a pure function of
/// the state, so save -> load -> save reproduces the file exactly.
pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(cfg).to_le_bytes());
    for v in [
        state.iter as u64,
        state.stage as u64,
        state.bank.active_k as u64,
        state.bank.k_max as u64,
        state.adam.t as u64,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&state.rng.get_seed());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    out.push(state.ema.is_initialized() as u8);
    out.extend_from_slice(&(state.ema.values().len() as u32).to_le_bytes());
    for &v in state.ema.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut names = Vec::new();
    state.params.visit(&mut |n, _: &Tensor| names.push(n));
    let count = names.len() * 3;
    out.extend_from_slice(&(count as u32).to_le_bytes());
    let mut i = 0usize;
    state.params.visit(&mut |n, t: &Tensor| {
        write_tensor(&mut out, &format!("param.{}", n), t);
        i += 1;
    });
    for (j, n) in names.iter().enumerate() {
        write_tensor(&mut out, &format!("adam_m.{}", n), &state.adam.m[j]);
    }
    for (j, n) in names.iter().enumerate() {
        write_tensor(&mut out, &format!("adam_v.{}", n), &state.adam.v[j]);
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&out).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("unexpected end of file reading {}", what),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Load a checkpoint saved with [`save_checkpoint`].
///
/// Returns the state and the stored config digest; callers should compare
/// the digest against their live config and warn on mismatch.
pub fn load_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<(TrainState, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: "file shorter than the header".into(),
        });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        if &bytes[..3] == &CHECKPOINT_MAGIC[..3] {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
                supported: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            });
        }
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
        });
    }
    let mut r = ByteReader { buf: &bytes, pos: 4, path };
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: format!("v{}", version),
            supported: format!("v{}", CHECKPOINT_VERSION),
        });
    }
    let digest = r.u64("config digest")?;
    let iter = r.u64("iteration")? as usize;
    let stage = r.u64("stage")? as usize;
    let active_k = r.u64("active slots")? as usize;
    let k_max = r.u64("bank capacity")? as usize;
    let adam_t = r.u64("optimizer step")? as usize;
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
    let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());
    let ema_init = r.take(1, "ema flag")?[0] != 0;
    let ema_len = r.u32("ema length")? as usize;
    let mut ema_vals = Vec::with_capacity(ema_len);
    for _ in 0..ema_len {
        ema_vals.push(r.f64("ema value")?);
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors: std::collections::HashMap<String, Tensor> = std::collections::HashMap::new();
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec()).map_err(|_| {
            Error::Truncated {
                path: path.to_path_buf(),
                detail: "tensor name is not valid utf-8".into(),
            }
        })?;
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64("tensor payload")?);
        }
        tensors.insert(name, Tensor::new(shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: "trailing bytes after the last tensor".into(),
        });
    }

    let mut params = Params::init_seeded(&cfg.model, 0);
    let mut adam = AdamState::new(&params);
    let missing = |name: &str| Error::Truncated {
        path: path.to_path_buf(),
        detail: format!("checkpoint is missing tensor '{}'", name),
    };
    let mut err = None;
    let mut fill = |prefix: &str, name: &str, dst: &mut Tensor| {
        let key = format!("{}.{}", prefix, name);
        match tensors.get(&key) {
            Some(t) if t.shape() == dst.shape() => *dst = t.clone(),
            Some(t) => {
                err.get_or_insert(Error::Config(format!(
                    "checkpoint tensor '{}' has shape {:?}, expected {:?}",
                    key,
                    t.shape(),
                    dst.shape()
                )));
            }
            None => {
                err.get_or_insert(missing(&key));
            }
        }
    };
    params.visit_mut(&mut |n, t: &mut Tensor| fill("param", n, t));
    let mut names = Vec::new();
    params.visit(&mut |n, _: &Tensor| names.push(n));
    for (j, n) in names.iter().enumerate() {
        fill("adam_m", n, &mut adam.m[j]);
        fill("adam_v", n, &mut adam.v[j]);
    }
    if let Some(e) = err {
        return Err(e);
    }
    adam.t = adam_t;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);
    let state = TrainState {
        params,
        bank: SlotBank::new(active_k, k_max),
        stage,
        adam,
        ema: DeltaEma::restore(ema_vals, cfg.spawn.ema_decay, ema_init),
        iter,
        rng,
    };
    Ok((state, digest))
}
