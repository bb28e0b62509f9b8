//! The growth curriculum: a staged slot-count schedule, slot-wise error
//! accounting, deterministic replica allocation, and distance-aware child
//! spawning that seeds new slots near their overloaded parents.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::SlotBank;
use crate::tensor::Tensor;
use crate::util::random_unit_vector;

/// Guard for near-zero attention areas under the area-normalized criterion.
const AREA_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ScheduleKind {
    Accelerated,
    Linear,
    Decelerated,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<ScheduleKind> {
        match s {
            "accelerated" => Ok(ScheduleKind::Accelerated),
            "linear" => Ok(ScheduleKind::Linear),
            "decelerated" => Ok(ScheduleKind::Decelerated),
            other => Err(Error::Config(format!(
                "unknown schedule kind '{}', expected accelerated|linear|decelerated",
                other
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::Accelerated => "accelerated",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Decelerated => "decelerated",
        }
    }
}

/// When and by how much the slot budget grows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurriculumSchedule {
    pub k_init: usize,
    /// Base increment applied at the first boundary.
    pub sigma_inc: usize,
    /// Number of stages, including the initial one.
    pub stages: usize,
    /// Training-progress fractions at which each expansion fires; length
    /// `stages - 1`, strictly increasing within (0, 1).
    pub stage_fractions: Vec<f64>,
    pub kind: ScheduleKind,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            k_init: 2,
            sigma_inc: 1,
            stages: 3,
            stage_fractions: vec![0.10, 0.25],
            kind: ScheduleKind::Accelerated,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.k_init < 1 {
            return Err(Error::Config("k_init must be at least 1".into()));
        }
        if self.stages < 1 {
            return Err(Error::Config("curriculum needs at least one stage".into()));
        }
        if self.stage_fractions.len() != self.stages - 1 {
            return Err(Error::Config(format!(
                "expected {} stage fractions for {} stages, got {}",
                self.stages - 1,
                self.stages,
                self.stage_fractions.len()
            )));
        }
        let mut prev = 0.0;
        for &f in &self.stage_fractions {
            if !(f > prev && f < 1.0) {
                return Err(Error::Config(format!(
                    "stage fractions must be strictly increasing within (0, 1), got {:?}",
                    self.stage_fractions
                )));
            }
            prev = f;
        }
        Ok(())
    }

    /// Final slot budget, shared by every schedule kind.
    pub fn k_final(&self) -> usize {
        accelerated_k(self.k_init, self.sigma_inc, self.stages - 1)
    }

    /// Iterations at which each expansion fires: `floor(fraction * total)`.
    pub fn boundary_iters(&self, total_iters: usize) -> Vec<usize> {
        self.stage_fractions
            .iter()
            .map(|f| (f * total_iters as f64).floor() as usize)
            .collect()
    }
}

fn accelerated_k(k_init: usize, sigma: usize, m: usize) -> usize {
    k_init + m * sigma + 3 * m * m.saturating_sub(1) / 2
}

/// Slot budget at stage `m`.
///
/// The accelerated rule adds `sigma` at the first boundary and grows the
/// increment by 3 per stage thereafter. The linear rule spreads the same
/// total growth evenly (rounding half away from zero). The decelerated rule
/// applies the accelerated increments in reverse order. All kinds share both
/// endpoints.
pub fn slots_at_stage(sched: &CurriculumSchedule, m: usize) -> usize {
    assert!(m < sched.stages, "stage {} out of range ({})", m, sched.stages);
    let k_init = sched.k_init;
    match sched.kind {
        ScheduleKind::Accelerated => accelerated_k(k_init, sched.sigma_inc, m),
        ScheduleKind::Linear => {
            if sched.stages == 1 {
                return k_init;
            }
            let k_final = sched.k_final();
            let growth = (k_final - k_init) as f64;
            k_init + (m as f64 * growth / (sched.stages - 1) as f64).round() as usize
        }
        ScheduleKind::Decelerated => {
            let k_final = sched.k_final();
            k_init + k_final - accelerated_k(k_init, sched.sigma_inc, sched.stages - 1 - m)
        }
    }
}

/// How to attribute reconstruction error to slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SpawnCriterion {
    /// Attention-weighted error summed over every location.
    TotalError,
    /// The same, divided by the slot's total attention area.
    AreaNormalized,
}

impl SpawnCriterion {
    pub fn parse(s: &str) -> Result<SpawnCriterion> {
        match s {
            "total" | "total_error" => Ok(SpawnCriterion::TotalError),
            "area" | "area_normalized" => Ok(SpawnCriterion::AreaNormalized),
            other => Err(Error::Config(format!(
                "unknown spawn criterion '{}', expected total|area",
                other
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SpawnCriterion::TotalError => "total",
            SpawnCriterion::AreaNormalized => "area",
        }
    }
}

/// Spawn-time knobs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpawnConfig {
    /// Repulsion coefficient scaling each child's offset from its parent.
    pub beta: f64,
    pub criterion: SpawnCriterion,
    /// Decay of the running error-mass average.
    pub ema_decay: f64,
}

impl Default for SpawnConfig {
    fn default() -> Self {
        SpawnConfig {
            beta: 0.2,
            criterion: SpawnCriterion::TotalError,
            ema_decay: 0.9,
        }
    }
}

impl SpawnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }
}

/// Attention-weighted error mass per slot.
///
/// `alpha` is `[F, K, N]` (mixture weights summing to 1 over K at each
/// location), `mse_map` is `[F, N]`. Under `TotalError` each slot receives
/// the error it claims; because the weights partition each location, the
/// masses sum to the total map error. `AreaNormalized` divides by the slot's
/// attention area, favouring slots that are wrong per pixel rather than
/// merely large.
pub fn slot_error_mass(alpha: &Tensor, mse_map: &Tensor, criterion: SpawnCriterion) -> Vec<f64> {
    let ash = alpha.shape();
    assert_eq!(ash.len(), 3, "expected alpha [F, K, N], got {:?}", ash);
    let (f, k, n) = (ash[0], ash[1], ash[2]);
    assert_eq!(mse_map.shape(), &[f, n], "mse map shape mismatch");
    let a = alpha.data();
    let e = mse_map.data();
    let mut delta = vec![0.0f64; k];
    let mut area = vec![0.0f64; k];
    for fi in 0..f {
        for ki in 0..k {
            let base = (fi * k + ki) * n;
            for ni in 0..n {
                let w = a[base + ni];
                delta[ki] += w * e[fi * n + ni];
                area[ki] += w;
            }
        }
    }
    if criterion == SpawnCriterion::AreaNormalized {
        for ki in 0..k {
            delta[ki] /= area[ki].max(AREA_EPS);
        }
    }
    delta
}

/// A smoothed error-mass accumulator, reset whenever the slot count changes.
#[derive(Clone, Debug, Serialize)]
pub struct DeltaEma {
    values: Vec<f64>,
    decay: f64,
    initialized: bool,
}

impl DeltaEma {
    pub fn new(k: usize, decay: f64) -> DeltaEma {
        DeltaEma {
            values: vec![0.0; k],
            decay,
            initialized: false,
        }
    }

    /// Fold in one batch's masses. The first observation seeds the average
    /// directly so early boundaries are not biased toward zero.
    pub fn update(&mut self, batch_delta: &[f64]) {
        assert_eq!(batch_delta.len(), self.values.len(), "slot count changed without reset");
        if !self.initialized {
            self.values.copy_from_slice(batch_delta);
            self.initialized = true;
            return;
        }
        for (v, &d) in self.values.iter_mut().zip(batch_delta) {
            *v = self.decay * *v + (1.0 - self.decay) * d;
        }
    }

    pub fn reset(&mut self, k: usize) {
        self.values = vec![0.0; k];
        self.initialized = false;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Rebuild from checkpointed state.
    pub fn restore(values: Vec<f64>, decay: f64, initialized: bool) -> DeltaEma {
        DeltaEma { values, decay, initialized }
    }
}

/// Bookkeeping from one allocation + spawn, recorded in the training log.
#[derive(Clone, Debug, Serialize)]
pub struct SlotErrorStats {
    /// Smoothed error mass per parent.
    pub delta: Vec<f64>,
    /// Normalized shares `w = delta / sum(delta)`.
    pub weights: Vec<f64>,
    /// Fractional replica targets `w * n_new`.
    pub frac: Vec<f64>,
    /// Integer replicas granted per parent.
    pub counts: Vec<usize>,
    /// Replicas distributed by largest fractional residue.
    pub remainder: usize,
    /// Distance from each parent to its nearest other placeholder.
    pub d_nearest: Vec<f64>,
    /// Mean placeholder norm.
    pub mu_norm: f64,
}

/// Split `n_new` replicas across parents proportionally to error mass.
///
/// Shares are floored and the remainder goes one each to the largest
/// fractional residues, ties to the lower slot index, so the counts always
/// sum to `n_new` exactly. A zero total mass falls back to uniform shares.
pub fn allocate_new_slots(delta: &[f64], n_new: usize) -> (Vec<usize>, SlotErrorStats) {
    assert!(!delta.is_empty(), "allocation needs at least one parent");
    assert!(
        delta.iter().all(|&d| d >= 0.0),
        "negative error mass: {:?}",
        delta
    );
    let k = delta.len();
    let total: f64 = delta.iter().sum();
    let weights: Vec<f64> = if total > 0.0 {
        delta.iter().map(|d| d / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    };
    let frac: Vec<f64> = weights.iter().map(|w| w * n_new as f64).collect();
    let mut counts: Vec<usize> = frac.iter().map(|f| f.floor() as usize).collect();
    let granted: usize = counts.iter().sum();
    assert!(granted <= n_new, "floored shares exceed the budget");
    let remainder = n_new - granted;
    let mut order: Vec<usize> = (0..k).collect();
    // residue descending, slot index ascending on ties
    order.sort_by(|&a, &b| {
        let ra = frac[a] - counts[a] as f64;
        let rb = frac[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(remainder) {
        counts[i] += 1;
    }
    let stats = SlotErrorStats {
        delta: delta.to_vec(),
        weights,
        frac,
        counts: counts.clone(),
        remainder,
        d_nearest: Vec::new(),
        mu_norm: 0.0,
    };
    (counts, stats)
}

fn row_norm(data: &[f64], row: usize, d: usize) -> f64 {
    data[row * d..(row + 1) * d]
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Spawn children next to their parents.
///
/// Each child of parent `k` sits at
/// `parent + beta * d_nearest(k) * (|parent| / mu_norm) * v`
/// with a fresh random unit direction `v` per child. `d_nearest` is the
/// distance to the closest other placeholder (or `mu_norm` when there is
/// only one), and `mu_norm` is the mean placeholder norm, so spawn offsets
/// scale with both local crowding and the representation's overall scale.
/// Children are appended after the parents in parent-index order.
pub fn spawn_children(
    placeholders: &Tensor,
    counts: &[usize],
    cfg: &SpawnConfig,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Vec<f64>, f64) {
    let sh = placeholders.shape();
    assert_eq!(sh.len(), 2, "expected placeholders [K, D], got {:?}", sh);
    let (k_old, d) = (sh[0], sh[1]);
    assert_eq!(counts.len(), k_old, "one count per parent");
    let data = placeholders.data();
    let norms: Vec<f64> = (0..k_old).map(|r| row_norm(data, r, d)).collect();
    let mu_norm = norms.iter().sum::<f64>() / k_old as f64;
    let d_nearest: Vec<f64> = (0..k_old)
        .map(|a| {
            let mut best = f64::INFINITY;
            for b in 0..k_old {
                if a == b {
                    continue;
                }
                let dist = (0..d)
                    .map(|c| {
                        let diff = data[a * d + c] - data[b * d + c];
                        diff * diff
                    })
                    .sum::<f64>()
                    .sqrt();
                best = best.min(dist);
            }
            if best.is_finite() {
                best
            } else {
                mu_norm // lone parent: fall back to the scale of the bank
            }
        })
        .collect();
    let total: usize = counts.iter().sum();
    let mut out = Vec::with_capacity((k_old + total) * d);
    out.extend_from_slice(data);
    for parent in 0..k_old {
        let ratio = if mu_norm > 0.0 { norms[parent] / mu_norm } else { 1.0 };
        let scale = cfg.beta * d_nearest[parent] * ratio;
        for _ in 0..counts[parent] {
            let v = random_unit_vector(rng, d);
            for c in 0..d {
                out.push(data[parent * d + c] + scale * v[c]);
            }
        }
    }
    (Tensor::new(vec![k_old + total, d], out), d_nearest, mu_norm)
}

/// One recorded expansion.
#[derive(Clone, Debug, Serialize)]
pub struct ExpansionEvent {
    pub iter: usize,
    /// Stage entered by this expansion.
    pub m: usize,
    pub k_old: usize,
    pub k_new: usize,
    pub stats: SlotErrorStats,
}

/// Grow the model from stage `m_new - 1` to `m_new`.
///
/// Allocates the stage's new slots across parents by smoothed error mass,
/// spawns children into the placeholder-bank rows just past the active
/// prefix, and raises the active count. Rows beyond the new prefix are
/// untouched. Optimizer moments need no surgery: moment tensors cover the
/// full bank and rows that never received gradients are still zero.
pub fn expand(
    bank_param: &mut Tensor,
    bank: &mut SlotBank,
    sched: &CurriculumSchedule,
    cfg: &SpawnConfig,
    delta: &[f64],
    m_new: usize,
    iter: usize,
    rng: &mut ChaCha8Rng,
) -> ExpansionEvent {
    assert!(m_new >= 1 && m_new < sched.stages, "not a stage boundary");
    let k_old = slots_at_stage(sched, m_new - 1);
    let k_new = slots_at_stage(sched, m_new);
    assert_eq!(
        bank.active_k, k_old,
        "expansion expects the model to sit at stage {}",
        m_new - 1
    );
    assert_eq!(delta.len(), k_old, "one error mass per active slot");
    assert!(
        k_new <= bank.k_max,
        "schedule outgrew the placeholder bank: {} > {}",
        k_new,
        bank.k_max
    );
    let n_new = k_new - k_old;
    let (counts, mut stats) = allocate_new_slots(delta, n_new);
    let d = bank_param.shape()[1];
    let active = Tensor::new(vec![k_old, d], bank_param.data()[..k_old * d].to_vec());
    let (grown, d_nearest, mu_norm) = spawn_children(&active, &counts, cfg, rng);
    stats.d_nearest = d_nearest;
    stats.mu_norm = mu_norm;
    bank_param.data_mut()[..k_new * d].copy_from_slice(&grown.data()[..k_new * d]);
    bank.grow_to(k_new);
    ExpansionEvent {
        iter,
        m: m_new,
        k_old,
        k_new,
        stats,
    }
}
