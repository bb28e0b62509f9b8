//! The trainable pipeline: feature projection, recurrent slot attention, and
//! a per-slot broadcast decoder with alpha compositing.
//!
//! All forward code is generic over [`Engine`], so the same functions drive
//! recorded (training) and immediate (inference) execution. Parameters live in
//! [`Params`], generic over the engine handle type; a canonical field order is
//! shared by initialization, optimizer state, and checkpoints.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::engine::{gru_step, layer_norm, Dense, GruCell};
use crate::tensor::{Engine, Tensor};
use crate::util::sample_normal;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Guard added to attention weights before the per-slot mean so empty slots
/// still receive a well-defined (near-uniform) update.
pub const ATTN_EPS: f64 = 1e-8;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ModelConfig {
    /// Width of the frozen patch features.
    pub d_feat: usize,
    /// Slot width.
    pub d_slot: usize,
    /// Hidden width of the projector and the attention residual MLP.
    pub hidden: usize,
    /// Hidden width of the decoder MLP.
    pub dec_hidden: usize,
    /// Patch positions per frame (rows of the decoder position embedding).
    pub n: usize,
    /// Capacity of the slot bank; `active_k` can grow up to this.
    pub k_max: usize,
    /// Attention iterations on the first frame (cold start from placeholders).
    pub l_first: usize,
    /// Attention iterations on later frames (warm start from the previous frame).
    pub l_later: usize,
    /// Attention heads; slot width must divide evenly.
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_feat: 16,
            d_slot: 32,
            hidden: 64,
            dec_hidden: 64,
            n: 64,
            k_max: 16,
            l_first: 3,
            l_later: 2,
            heads: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.heads == 0 || self.d_slot % self.heads != 0 {
            return Err(crate::Error::Config(format!(
                "slot width {} not divisible into {} heads",
                self.d_slot, self.heads
            )));
        }
        if self.k_max == 0 || self.l_first == 0 || self.l_later == 0 {
            return Err(crate::Error::Config(
                "k_max and iteration counts must be positive".into(),
            ));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_slot / self.heads
    }
}

/// Slot budget bookkeeping: which prefix of the placeholder bank is live.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct SlotBank {
    pub active_k: usize,
    pub k_max: usize,
}

impl SlotBank {
    pub fn new(active_k: usize, k_max: usize) -> Self {
        assert!(
            active_k >= 1 && active_k <= k_max,
            "active slot count {} outside 1..={}",
            active_k,
            k_max
        );
        SlotBank { active_k, k_max }
    }

    /// Grow the budget; shrinking is not allowed.
    pub fn grow_to(&mut self, k: usize) {
        assert!(
            k >= self.active_k && k <= self.k_max,
            "cannot grow bank from {} to {} (capacity {})",
            self.active_k,
            k,
            self.k_max
        );
        self.active_k = k;
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Clone, Debug)]
pub struct ProjectorParams<T> {
    pub norm: LayerNormParams<T>,
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
}

#[derive(Clone, Debug)]
pub struct AttentionParams<T> {
    pub norm_inputs: LayerNormParams<T>,
    pub norm_slots: LayerNormParams<T>,
    pub norm_mlp: LayerNormParams<T>,
    /// Query/key/value projections, each `[d_slot, d_slot]`, bias-free.
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub gru: GruCell<T>,
    pub mlp_in: Dense<T>,
    pub mlp_out: Dense<T>,
}

/// Broadcast decoder. The first layer acts on the concatenation
/// `[slot, position]`; it is stored as the two halves of that concatenated
/// weight matrix (`w_slot`, `w_pos`) so the forward pass can compute
/// `slot * w_slot + pos * w_pos + b1` without materializing the
/// `[F, K, N, 2 * d_slot]` concatenated input.
#[derive(Clone, Debug)]
pub struct DecoderParams<T> {
    /// Learned patch-position embedding `[N, d_slot]`.
    pub pos: T,
    pub w_slot: T,
    pub w_pos: T,
    pub b1: T,
    /// Final layer emitting `d_feat` values plus one alpha logit.
    pub out: Dense<T>,
}

/// Every trainable tensor in the model, generic over the engine handle.
#[derive(Clone, Debug)]
pub struct Params<T> {
    pub projector: ProjectorParams<T>,
    pub attention: AttentionParams<T>,
    pub decoder: DecoderParams<T>,
    /// Slot placeholder bank `[k_max, d_slot]`; only the active prefix is read.
    pub bank: T,
}

impl<T> Params<T> {
    /// Structure-preserving transform. Field order is canonical and must match
    /// [`Params::visit`]; optimizer state and checkpoints rely on it.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Params<U> {
        Params {
            projector: ProjectorParams {
                norm: LayerNormParams {
                    gamma: f(&self.projector.norm.gamma),
                    beta: f(&self.projector.norm.beta),
                },
                fc1: Dense {
                    w: f(&self.projector.fc1.w),
                    b: f(&self.projector.fc1.b),
                },
                fc2: Dense {
                    w: f(&self.projector.fc2.w),
                    b: f(&self.projector.fc2.b),
                },
            },
            attention: AttentionParams {
                norm_inputs: LayerNormParams {
                    gamma: f(&self.attention.norm_inputs.gamma),
                    beta: f(&self.attention.norm_inputs.beta),
                },
                norm_slots: LayerNormParams {
                    gamma: f(&self.attention.norm_slots.gamma),
                    beta: f(&self.attention.norm_slots.beta),
                },
                norm_mlp: LayerNormParams {
                    gamma: f(&self.attention.norm_mlp.gamma),
                    beta: f(&self.attention.norm_mlp.beta),
                },
                w_q: f(&self.attention.w_q),
                w_k: f(&self.attention.w_k),
                w_v: f(&self.attention.w_v),
                gru: GruCell {
                    w_ir: f(&self.attention.gru.w_ir),
                    w_iz: f(&self.attention.gru.w_iz),
                    w_in: f(&self.attention.gru.w_in),
                    w_hr: f(&self.attention.gru.w_hr),
                    w_hz: f(&self.attention.gru.w_hz),
                    w_hn: f(&self.attention.gru.w_hn),
                    b_ir: f(&self.attention.gru.b_ir),
                    b_iz: f(&self.attention.gru.b_iz),
                    b_in: f(&self.attention.gru.b_in),
                    b_hr: f(&self.attention.gru.b_hr),
                    b_hz: f(&self.attention.gru.b_hz),
                    b_hn: f(&self.attention.gru.b_hn),
                },
                mlp_in: Dense {
                    w: f(&self.attention.mlp_in.w),
                    b: f(&self.attention.mlp_in.b),
                },
                mlp_out: Dense {
                    w: f(&self.attention.mlp_out.w),
                    b: f(&self.attention.mlp_out.b),
                },
            },
            decoder: DecoderParams {
                pos: f(&self.decoder.pos),
                w_slot: f(&self.decoder.w_slot),
                w_pos: f(&self.decoder.w_pos),
                b1: f(&self.decoder.b1),
                out: Dense {
                    w: f(&self.decoder.out.w),
                    b: f(&self.decoder.out.b),
                },
            },
            bank: f(&self.bank),
        }
    }

    /// Visit `(name, field)` pairs in canonical order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'static str, &'a T)) {
        f("projector.norm.gamma", &self.projector.norm.gamma);
        f("projector.norm.beta", &self.projector.norm.beta);
        f("projector.fc1.w", &self.projector.fc1.w);
        f("projector.fc1.b", &self.projector.fc1.b);
        f("projector.fc2.w", &self.projector.fc2.w);
        f("projector.fc2.b", &self.projector.fc2.b);
        f("attention.norm_inputs.gamma", &self.attention.norm_inputs.gamma);
        f("attention.norm_inputs.beta", &self.attention.norm_inputs.beta);
        f("attention.norm_slots.gamma", &self.attention.norm_slots.gamma);
        f("attention.norm_slots.beta", &self.attention.norm_slots.beta);
        f("attention.norm_mlp.gamma", &self.attention.norm_mlp.gamma);
        f("attention.norm_mlp.beta", &self.attention.norm_mlp.beta);
        f("attention.w_q", &self.attention.w_q);
        f("attention.w_k", &self.attention.w_k);
        f("attention.w_v", &self.attention.w_v);
        f("attention.gru.w_ir", &self.attention.gru.w_ir);
        f("attention.gru.w_iz", &self.attention.gru.w_iz);
        f("attention.gru.w_in", &self.attention.gru.w_in);
        f("attention.gru.w_hr", &self.attention.gru.w_hr);
        f("attention.gru.w_hz", &self.attention.gru.w_hz);
        f("attention.gru.w_hn", &self.attention.gru.w_hn);
        f("attention.gru.b_ir", &self.attention.gru.b_ir);
        f("attention.gru.b_iz", &self.attention.gru.b_iz);
        f("attention.gru.b_in", &self.attention.gru.b_in);
        f("attention.gru.b_hr", &self.attention.gru.b_hr);
        f("attention.gru.b_hz", &self.attention.gru.b_hz);
        f("attention.gru.b_hn", &self.attention.gru.b_hn);
        f("attention.mlp_in.w", &self.attention.mlp_in.w);
        f("attention.mlp_in.b", &self.attention.mlp_in.b);
        f("attention.mlp_out.w", &self.attention.mlp_out.w);
        f("attention.mlp_out.b", &self.attention.mlp_out.b);
        f("decoder.pos", &self.decoder.pos);
        f("decoder.w_slot", &self.decoder.w_slot);
        f("decoder.w_pos", &self.decoder.w_pos);
        f("decoder.b1", &self.decoder.b1);
        f("decoder.out.w", &self.decoder.out.w);
        f("decoder.out.b", &self.decoder.out.b);
        f("bank", &self.bank);
    }

    /// Visit fields mutably, same order as [`Params::visit`].
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&'static str, &mut T)) {
        f("projector.norm.gamma", &mut self.projector.norm.gamma);
        f("projector.norm.beta", &mut self.projector.norm.beta);
        f("projector.fc1.w", &mut self.projector.fc1.w);
        f("projector.fc1.b", &mut self.projector.fc1.b);
        f("projector.fc2.w", &mut self.projector.fc2.w);
        f("projector.fc2.b", &mut self.projector.fc2.b);
        f("attention.norm_inputs.gamma", &mut self.attention.norm_inputs.gamma);
        f("attention.norm_inputs.beta", &mut self.attention.norm_inputs.beta);
        f("attention.norm_slots.gamma", &mut self.attention.norm_slots.gamma);
        f("attention.norm_slots.beta", &mut self.attention.norm_slots.beta);
        f("attention.norm_mlp.gamma", &mut self.attention.norm_mlp.gamma);
        f("attention.norm_mlp.beta", &mut self.attention.norm_mlp.beta);
        f("attention.w_q", &mut self.attention.w_q);
        f("attention.w_k", &mut self.attention.w_k);
        f("attention.w_v", &mut self.attention.w_v);
        f("attention.gru.w_ir", &mut self.attention.gru.w_ir);
        f("attention.gru.w_iz", &mut self.attention.gru.w_iz);
        f("attention.gru.w_in", &mut self.attention.gru.w_in);
        f("attention.gru.w_hr", &mut self.attention.gru.w_hr);
        f("attention.gru.w_hz", &mut self.attention.gru.w_hz);
        f("attention.gru.w_hn", &mut self.attention.gru.w_hn);
        f("attention.gru.b_ir", &mut self.attention.gru.b_ir);
        f("attention.gru.b_iz", &mut self.attention.gru.b_iz);
        f("attention.gru.b_in", &mut self.attention.gru.b_in);
        f("attention.gru.b_hr", &mut self.attention.gru.b_hr);
        f("attention.gru.b_hz", &mut self.attention.gru.b_hz);
        f("attention.gru.b_hn", &mut self.attention.gru.b_hn);
        f("attention.mlp_in.w", &mut self.attention.mlp_in.w);
        f("attention.mlp_in.b", &mut self.attention.mlp_in.b);
        f("attention.mlp_out.w", &mut self.attention.mlp_out.w);
        f("attention.mlp_out.b", &mut self.attention.mlp_out.b);
        f("decoder.pos", &mut self.decoder.pos);
        f("decoder.w_slot", &mut self.decoder.w_slot);
        f("decoder.w_pos", &mut self.decoder.w_pos);
        f("decoder.b1", &mut self.decoder.b1);
        f("decoder.out.w", &mut self.decoder.out.w);
        f("decoder.out.b", &mut self.decoder.out.b);
        f("bank", &mut self.bank);
    }
}

impl Params<Tensor> {
    /// Fresh parameters: weights uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// layer norms at identity, position embedding N(0, 0.02).
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let uniform = |rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.gen_range(-a..a))
        };
        let dense = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| Dense {
            w: uniform(rng, &[fan_in, fan_out], fan_in),
            b: uniform(rng, &[fan_out], fan_in),
        };
        let ln = |d: usize| LayerNormParams {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        };
        let d = cfg.d_slot;
        Params {
            projector: ProjectorParams {
                norm: ln(cfg.d_feat),
                fc1: dense(rng, cfg.d_feat, cfg.hidden),
                fc2: dense(rng, cfg.hidden, d),
            },
            attention: AttentionParams {
                norm_inputs: ln(d),
                norm_slots: ln(d),
                norm_mlp: ln(d),
                w_q: uniform(rng, &[d, d], d),
                w_k: uniform(rng, &[d, d], d),
                w_v: uniform(rng, &[d, d], d),
                gru: GruCell {
                    w_ir: uniform(rng, &[d, d], d),
                    w_iz: uniform(rng, &[d, d], d),
                    w_in: uniform(rng, &[d, d], d),
                    w_hr: uniform(rng, &[d, d], d),
                    w_hz: uniform(rng, &[d, d], d),
                    w_hn: uniform(rng, &[d, d], d),
                    b_ir: uniform(rng, &[d], d),
                    b_iz: uniform(rng, &[d], d),
                    b_in: uniform(rng, &[d], d),
                    b_hr: uniform(rng, &[d], d),
                    b_hz: uniform(rng, &[d], d),
                    b_hn: uniform(rng, &[d], d),
                },
                mlp_in: dense(rng, d, cfg.hidden),
                mlp_out: dense(rng, cfg.hidden, d),
            },
            decoder: DecoderParams {
                pos: Tensor::from_fn(&[cfg.n, d], |_| sample_normal(rng, 0.0, 0.02)),
                w_slot: uniform(rng, &[d, cfg.dec_hidden], 2 * d),
                w_pos: uniform(rng, &[d, cfg.dec_hidden], 2 * d),
                b1: uniform(rng, &[cfg.dec_hidden], 2 * d),
                out: dense(rng, cfg.dec_hidden, cfg.d_feat + 1),
            },
            bank: uniform(rng, &[cfg.k_max, d], d),
        }
    }

    pub fn init_seeded(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Params::init(cfg, &mut rng)
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.is_finite());
        ok
    }
}

/// Register parameters on a recording engine as differentiable leaves.
pub fn params_to_tape(params: &Params<Tensor>, tape: &mut crate::tensor::Tape) -> Params<crate::tensor::Var> {
    params.map(|t| tape.param(t.clone()))
}

/// Project frozen patch features `[.., D_feat]` to slot width `[.., D_slot]`:
/// layer norm, then a two-layer MLP with a ReLU in between.
pub fn project<E: Engine>(eng: &mut E, p: &ProjectorParams<E::T>, features: &E::T) -> E::T {
    let x = layer_norm(eng, features, &p.norm.gamma, &p.norm.beta, LAYER_NORM_EPS);
    let h = eng.matmul(&x, &p.fc1.w);
    let h = eng.add(&h, &p.fc1.b);
    let h = eng.relu(&h);
    let y = eng.matmul(&h, &p.fc2.w);
    eng.add(&y, &p.fc2.b)
}

/// One frame of slot refinement: `iters` rounds of slot-competitive attention
/// (softmax over the slot axis), per-slot weighted means of the values, a GRU
/// update, and a residual MLP. Returns the refined slots `[K, d_slot]` and the
/// final attention map `[N, K]` (head-averaged).
pub fn slot_attention_step<E: Engine>(
    eng: &mut E,
    a: &AttentionParams<E::T>,
    cfg: &ModelConfig,
    v_t: &E::T,
    slots_in: &E::T,
    iters: usize,
) -> (E::T, E::T) {
    let k_slots = eng.shape(slots_in)[0];
    assert!(k_slots >= 1, "slot attention needs at least one slot");
    assert!(iters >= 1, "slot attention needs at least one iteration");
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let v_norm = layer_norm(eng, v_t, &a.norm_inputs.gamma, &a.norm_inputs.beta, LAYER_NORM_EPS);
    let keys = eng.matmul(&v_norm, &a.w_k); // [N, d_slot]
    let values = eng.matmul(&v_norm, &a.w_v); // [N, d_slot]

    let mut slots = slots_in.clone();
    let mut last_attn = None;
    for _ in 0..iters {
        let s_norm = layer_norm(eng, &slots, &a.norm_slots.gamma, &a.norm_slots.beta, LAYER_NORM_EPS);
        let queries = eng.matmul(&s_norm, &a.w_q); // [K, d_slot]
        let mut head_updates = Vec::with_capacity(cfg.heads);
        let mut head_attns = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let k_h = eng.slice(&keys, 1, h * hd, hd); // [N, hd]
            let q_h = eng.slice(&queries, 1, h * hd, hd); // [K, hd]
            let v_h = eng.slice(&values, 1, h * hd, hd); // [N, hd]
            let q_t = eng.transpose_last(&q_h); // [hd, K]
            let logits = eng.matmul(&k_h, &q_t); // [N, K]
            let logits = eng.affine(&logits, scale, 0.0);
            // competition: each input location distributes itself over slots
            let attn = eng.softmax(&logits, 1); // [N, K]
            // weighted mean over locations per slot
            let w = eng.affine(&attn, 1.0, ATTN_EPS);
            let totals = eng.sum_axis(&w, 0, true); // [1, K]
            let w = eng.div(&w, &totals);
            let w_t = eng.transpose_last(&w); // [K, N]
            head_updates.push(eng.matmul(&w_t, &v_h)); // [K, hd]
            head_attns.push(attn);
        }
        let updates = if cfg.heads == 1 {
            head_updates.pop().expect("one head")
        } else {
            eng.concat(&head_updates, 1)
        };
        let attn = if cfg.heads == 1 {
            head_attns.pop().expect("one head")
        } else {
            let summed = head_attns
                .iter()
                .skip(1)
                .fold(head_attns[0].clone(), |acc, x| eng.add(&acc, x));
            eng.affine(&summed, 1.0 / cfg.heads as f64, 0.0)
        };
        let after_gru = gru_step(eng, &a.gru, &updates, &slots);
        let m_norm = layer_norm(
            eng,
            &after_gru,
            &a.norm_mlp.gamma,
            &a.norm_mlp.beta,
            LAYER_NORM_EPS,
        );
        let m_h = eng.matmul(&m_norm, &a.mlp_in.w);
        let m_h = eng.add(&m_h, &a.mlp_in.b);
        let m_h = eng.relu(&m_h);
        let m_o = eng.matmul(&m_h, &a.mlp_out.w);
        let m_o = eng.add(&m_o, &a.mlp_out.b);
        slots = eng.add(&after_gru, &m_o);
        last_attn = Some(attn);
    }
    (slots, last_attn.expect("at least one iteration"))
}

/// Refine slots across a clip: frame 0 starts from the placeholder prefix
/// with `l_first` iterations, later frames start from the previous frame's
/// slots with `l_later` iterations. Returns slot states `[T, K, d_slot]`.
pub fn rollout<E: Engine>(
    eng: &mut E,
    params: &Params<E::T>,
    cfg: &ModelConfig,
    projected: &E::T, // [T, N, d_slot]
    active_k: usize,
) -> E::T {
    let t_len = eng.shape(projected)[0];
    assert!(t_len >= 1, "rollout needs at least one frame");
    assert!(active_k >= 1, "rollout needs at least one active slot");
    let init = eng.slice(&params.bank, 0, 0, active_k); // [K, d_slot]
    let mut states: Vec<E::T> = Vec::with_capacity(t_len);
    let mut prev = init;
    for t in 0..t_len {
        let shape = eng.shape(projected);
        let v_t = eng.slice(projected, 0, t, 1);
        let v_t = eng.reshape(&v_t, &[shape[1], shape[2]]);
        let iters = if t == 0 { cfg.l_first } else { cfg.l_later };
        let (next, _attn) = slot_attention_step(eng, &params.attention, cfg, &v_t, &prev, iters);
        states.push(next.clone());
        prev = next;
    }
    crate::tensor::engine::stack(eng, &states)
}

/// Output of the broadcast decoder over `F` frames.
pub struct DecodeResult<T> {
    /// Composited reconstruction `[F, N, d_feat]`.
    pub p_hat: T,
    /// Decode weights `[F, K, N]`; softmax-normalized over K per location.
    pub alpha: T,
    /// Raw per-slot reconstructions `[F, K, N, d_feat]`.
    pub per_slot: T,
}

/// Decode slots `[F, K, d_slot]` by broadcasting each slot to every patch
/// position alongside the learned position embedding, running the decoder MLP,
/// and compositing per-slot outputs with softmax alpha weights.
pub fn decode<E: Engine>(
    eng: &mut E,
    d: &DecoderParams<E::T>,
    cfg: &ModelConfig,
    slots: &E::T,
) -> DecodeResult<E::T> {
    let sh = eng.shape(slots);
    assert_eq!(sh.len(), 3, "decode expects [F, K, d_slot], got {:?}", sh);
    let (f_len, k, n) = (sh[0], sh[1], cfg.n);
    // first layer of the MLP over the concatenated [slot, position] input,
    // computed as two small matmuls plus a broadcast add
    let from_slot = eng.matmul(slots, &d.w_slot); // [F, K, H]
    let from_slot = eng.reshape(&from_slot, &[f_len, k, 1, cfg.dec_hidden]);
    let from_pos = eng.matmul(&d.pos, &d.w_pos); // [N, H]
    let from_pos = eng.reshape(&from_pos, &[1, 1, n, cfg.dec_hidden]);
    let h = eng.add(&from_slot, &from_pos); // [F, K, N, H]
    let h = eng.add(&h, &d.b1);
    let h = eng.relu(&h);
    let flat = eng.reshape(&h, &[f_len * k * n, cfg.dec_hidden]);
    let out = eng.matmul(&flat, &d.out.w);
    let out = eng.add(&out, &d.out.b); // [F*K*N, d_feat + 1]
    let out = eng.reshape(&out, &[f_len, k, n, cfg.d_feat + 1]);
    let per_slot = eng.slice(&out, 3, 0, cfg.d_feat); // [F, K, N, d_feat]
    let logits = eng.slice(&out, 3, cfg.d_feat, 1); // [F, K, N, 1]
    let logits = eng.reshape(&logits, &[f_len, k, n]);
    let alpha = eng.softmax(&logits, 1); // normalize over slots per location
    let alpha_col = eng.reshape(&alpha, &[f_len, k, n, 1]);
    let weighted = eng.mul(&per_slot, &alpha_col);
    let p_hat = eng.sum_axis(&weighted, 1, false); // [F, N, d_feat]
    DecodeResult {
        p_hat,
        alpha,
        per_slot,
    }
}

/// Full forward over a batch of clips: project, roll out each clip, decode all
/// frames jointly. Slot states come back as `[B, T, K, d_slot]`; the decode
/// result treats `F = B * T` frames.
pub struct Forward<T> {
    pub slots: T,
    pub decode: DecodeResult<T>,
}

pub fn forward_batch<E: Engine>(
    eng: &mut E,
    params: &Params<E::T>,
    cfg: &ModelConfig,
    features: &E::T, // [B, T, N, d_feat]
    active_k: usize,
) -> Forward<E::T> {
    let sh = eng.shape(features);
    assert_eq!(sh.len(), 4, "expected [B, T, N, d_feat], got {:?}", sh);
    let (b, t_len, n) = (sh[0], sh[1], sh[2]);
    let projected = project(eng, &params.projector, features); // [B, T, N, d_slot]
    let mut per_clip = Vec::with_capacity(b);
    for bi in 0..b {
        let clip = eng.slice(&projected, 0, bi, 1);
        let clip = eng.reshape(&clip, &[t_len, n, cfg.d_slot]);
        per_clip.push(rollout(eng, params, cfg, &clip, active_k));
    }
    let slots = crate::tensor::engine::stack(eng, &per_clip); // [B, T, K, D]
    let flat = eng.reshape(&slots, &[b * t_len, active_k, cfg.d_slot]);
    let decode = decode(eng, &params.decoder, cfg, &flat);
    Forward { slots, decode }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::{assert_grads_close, max_grad_error};
    use crate::tensor::{Eval, Tape};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_feat: 5,
            d_slot: 6,
            hidden: 7,
            dec_hidden: 8,
            n: 4,
            k_max: 4,
            l_first: 2,
            l_later: 1,
            heads: 1,
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn project_zero_weights_gives_constant_bias() {
        let cfg = tiny_cfg();
        let mut params = Params::init_seeded(&cfg, 0);
        params.projector.fc2.w = Tensor::zeros(&[cfg.hidden, cfg.d_slot]);
        params.projector.fc2.b = Tensor::full(&[cfg.d_slot], 0.5);
        let mut eng = Eval;
        let x = eng.constant(randn(&mut rng(1), &[2, 3, cfg.d_feat]));
        let y = project(&mut eng, &params.projector, &x);
        assert_eq!(y.shape(), &[2, 3, cfg.d_slot]);
        assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn projection_gradcheck() {
        let cfg = tiny_cfg();
        let mut r = rng(2);
        let x = randn(&mut r, &[3, cfg.d_feat]);
        let w1 = randn(&mut r, &[cfg.d_feat, cfg.hidden]);
        let b1 = randn(&mut r, &[cfg.hidden]);
        let w2 = randn(&mut r, &[cfg.hidden, cfg.d_slot]);
        let b2 = randn(&mut r, &[cfg.d_slot]);
        let gamma = Tensor::from_fn(&[cfg.d_feat], |_| r.gen_range(0.5..1.5));
        let beta = randn(&mut r, &[cfg.d_feat]);
        assert_grads_close(&[x, w1, b1, w2, b2, gamma, beta], 1e-4, |t, v| {
            let p = ProjectorParams {
                norm: LayerNormParams {
                    gamma: v[5].clone(),
                    beta: v[6].clone(),
                },
                fc1: Dense {
                    w: v[1].clone(),
                    b: v[2].clone(),
                },
                fc2: Dense {
                    w: v[3].clone(),
                    b: v[4].clone(),
                },
            };
            let y = project(t, &p, &v[0]);
            let sq = t.square(&y);
            t.sum_all(&sq)
        });
    }

    #[test]
    fn single_slot_attention_is_uniform() {
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 3);
        let mut eng = Eval;
        let v_t = eng.constant(randn(&mut rng(4), &[cfg.n, cfg.d_slot]));
        let s0 = eng.constant(randn(&mut rng(5), &[1, cfg.d_slot]));
        let (slots, attn) = slot_attention_step(&mut eng, &params.attention, &cfg, &v_t, &s0, 2);
        assert_eq!(slots.shape(), &[1, cfg.d_slot]);
        assert_eq!(attn.shape(), &[cfg.n, 1]);
        assert!(attn.data().iter().all(|&a| a == 1.0), "K=1 softmax must be exactly 1");
    }

    #[test]
    fn attention_distributes_each_location_over_slots() {
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 6);
        let mut eng = Eval;
        let v_t = eng.constant(randn(&mut rng(7), &[cfg.n, cfg.d_slot]));
        let s0 = eng.constant(randn(&mut rng(8), &[3, cfg.d_slot]));
        let (_, attn) = slot_attention_step(&mut eng, &params.attention, &cfg, &v_t, &s0, 2);
        for n in 0..cfg.n {
            let total: f64 = (0..3).map(|k| attn.at(&[n, k])).sum();
            assert!((total - 1.0).abs() < 1e-12, "location {} sums to {}", n, total);
        }
    }

    #[test]
    fn attention_step_is_permutation_equivariant() {
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 9);
        let mut eng = Eval;
        let v_t = eng.constant(randn(&mut rng(10), &[cfg.n, cfg.d_slot]));
        let s0 = randn(&mut rng(11), &[3, cfg.d_slot]);
        let perm = [2usize, 0, 1];
        let s0_perm = Tensor::from_fn(&[3, cfg.d_slot], |i| {
            let (row, col) = (i / cfg.d_slot, i % cfg.d_slot);
            s0.at(&[perm[row], col])
        });
        let c0 = eng.constant(s0);
        let c1 = eng.constant(s0_perm);
        let (out, _) = slot_attention_step(&mut eng, &params.attention, &cfg, &v_t, &c0, 2);
        let (out_p, _) = slot_attention_step(&mut eng, &params.attention, &cfg, &v_t, &c1, 2);
        for row in 0..3 {
            for col in 0..cfg.d_slot {
                let a = out.at(&[perm[row], col]);
                let b = out_p.at(&[row, col]);
                assert!((a - b).abs() < 1e-10, "row {} col {}: {} vs {}", row, col, a, b);
            }
        }
    }

    #[test]
    fn two_heads_still_normalize_and_run() {
        let cfg = ModelConfig {
            heads: 2,
            ..tiny_cfg()
        };
        let params = Params::init_seeded(&cfg, 12);
        let mut eng = Eval;
        let v_t = eng.constant(randn(&mut rng(13), &[cfg.n, cfg.d_slot]));
        let s0 = eng.constant(randn(&mut rng(14), &[2, cfg.d_slot]));
        let (slots, attn) = slot_attention_step(&mut eng, &params.attention, &cfg, &v_t, &s0, 2);
        assert_eq!(slots.shape(), &[2, cfg.d_slot]);
        for n in 0..cfg.n {
            let total: f64 = (0..2).map(|k| attn.at(&[n, k])).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_t1_equals_single_step_from_bank() {
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 15);
        let mut eng = Eval;
        let proj = eng.constant(randn(&mut rng(16), &[1, cfg.n, cfg.d_slot]));
        let states = rollout(&mut eng, &params, &cfg, &proj, 2);
        assert_eq!(states.shape(), &[1, 2, cfg.d_slot]);
        let v0 = proj.reshaped(&[cfg.n, cfg.d_slot]);
        let bank = crate::tensor::kernels::slice(&params.bank, 0, 0, 2);
        let (direct, _) =
            slot_attention_step(&mut eng, &params.attention, &cfg, &v0, &bank, cfg.l_first);
        assert_eq!(states.data(), direct.data());
    }

    #[test]
    fn rollout_is_deterministic() {
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 17);
        let mut eng = Eval;
        let proj = eng.constant(randn(&mut rng(18), &[3, cfg.n, cfg.d_slot]));
        let a = rollout(&mut eng, &params, &cfg, &proj, 3);
        let b = rollout(&mut eng, &params, &cfg, &proj, 3);
        assert_eq!(a.shape(), &[3, 3, cfg.d_slot]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn decode_single_slot_alpha_is_one() {
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 19);
        let mut eng = Eval;
        let slots = eng.constant(randn(&mut rng(20), &[2, 1, cfg.d_slot]));
        let res = decode(&mut eng, &params.decoder, &cfg, &slots);
        assert!(res.alpha.data().iter().all(|&a| a == 1.0));
        assert_eq!(res.p_hat.shape(), &[2, cfg.n, cfg.d_feat]);
    }

    #[test]
    fn decode_alpha_normalized_and_composition_exact() {
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 21);
        let mut eng = Eval;
        let (f_len, k) = (3, 3);
        let slots = eng.constant(randn(&mut rng(22), &[f_len, k, cfg.d_slot]));
        let res = decode(&mut eng, &params.decoder, &cfg, &slots);
        for f in 0..f_len {
            for n in 0..cfg.n {
                let total: f64 = (0..k).map(|kk| res.alpha.at(&[f, kk, n])).sum();
                assert!((total - 1.0).abs() < 1e-9);
                for d in 0..cfg.d_feat {
                    let manual: f64 = (0..k)
                        .map(|kk| res.alpha.at(&[f, kk, n]) * res.per_slot.at(&[f, kk, n, d]))
                        .sum();
                    assert!((res.p_hat.at(&[f, n, d]) - manual).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn full_forward_permutation_equivariance() {
        let cfg = tiny_cfg();
        let active_k = 3;
        let params = Params::init_seeded(&cfg, 23);
        let features = randn(&mut rng(24), &[1, 2, cfg.n, cfg.d_feat]);
        let perm = [1usize, 2, 0];
        let mut permuted = params.clone();
        permuted.bank = Tensor::from_fn(&[cfg.k_max, cfg.d_slot], |i| {
            let (row, col) = (i / cfg.d_slot, i % cfg.d_slot);
            let src = if row < active_k { perm[row] } else { row };
            params.bank.at(&[src, col])
        });

        let mut eng = Eval;
        let fx = eng.constant(features.clone());
        let base = forward_batch(&mut eng, &params, &cfg, &fx, active_k);
        let fx2 = eng.constant(features);
        let swapped = forward_batch(&mut eng, &permuted, &cfg, &fx2, active_k);

        // slots and alpha permute along the slot axis
        for t in 0..2 {
            for k in 0..active_k {
                for d in 0..cfg.d_slot {
                    let a = base.slots.at(&[0, t, perm[k], d]);
                    let b = swapped.slots.at(&[0, t, k, d]);
                    assert!((a - b).abs() < 1e-10);
                }
                for n in 0..cfg.n {
                    let a = base.decode.alpha.at(&[t, perm[k], n]);
                    let b = swapped.decode.alpha.at(&[t, k, n]);
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
        // the composited reconstruction is unchanged
        for (a, b) in base.decode.p_hat.data().iter().zip(swapped.decode.p_hat.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn inactive_bank_rows_get_zero_gradient() {
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 25);
        let features = randn(&mut rng(26), &[1, 2, cfg.n, cfg.d_feat]);
        let active_k = 2;
        let mut tape = Tape::new();
        let p = params_to_tape(&params, &mut tape);
        let fx = tape.constant(features);
        let fwd = forward_batch(&mut tape, &p, &cfg, &fx, active_k);
        let sq = tape.square(&fwd.decode.p_hat);
        let loss = tape.sum_all(&sq);
        let grads = tape.backward(loss);
        let bank_grad = grads.get(p.bank).unwrap();
        assert_eq!(bank_grad.shape(), &[cfg.k_max, cfg.d_slot]);
        for row in 0..cfg.k_max {
            let row_norm: f64 = (0..cfg.d_slot)
                .map(|c| bank_grad.at(&[row, c]).abs())
                .sum();
            if row < active_k {
                assert!(row_norm > 0.0, "active row {} should receive gradient", row);
            } else {
                assert_eq!(row_norm, 0.0, "inactive row {} must get zero gradient", row);
            }
        }
    }

    #[test]
    fn pipeline_gradcheck_tiny_instance() {
        // project -> rollout -> decode -> MSE on T=2, N=4, K=2, D=6
        let cfg = ModelConfig {
            d_feat: 5,
            d_slot: 6,
            hidden: 6,
            dec_hidden: 6,
            n: 4,
            k_max: 2,
            l_first: 2,
            l_later: 1,
            heads: 1,
        };
        let params = Params::init_seeded(&cfg, 27);
        let features = randn(&mut rng(28), &[1, 2, cfg.n, cfg.d_feat]);
        let target = randn(&mut rng(29), &[2, cfg.n, cfg.d_feat]);

        let mut flat: Vec<Tensor> = Vec::new();
        params.visit(&mut |_, t| flat.push(t.clone()));
        let err = max_grad_error(&flat, |tape, vars| {
            let mut idx = 0;
            let p = params.map(|_| {
                let v = vars[idx];
                idx += 1;
                v
            });
            let fx = tape.constant(features.clone());
            let fwd = forward_batch(tape, &p, &cfg, &fx, 2);
            let tgt = tape.constant(target.clone());
            let diff = tape.sub(&fwd.decode.p_hat, &tgt);
            let sq = tape.square(&diff);
            tape.mean_all(&sq)
        });
        assert!(err < 1e-3, "pipeline gradient error {:.3e} exceeds 1e-3", err);
    }

    #[test]
    fn map_and_visit_agree_on_field_order() {
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 30);
        let mut map_order = Vec::new();
        params.map(|t| map_order.push(t.data()[0]));
        let mut visit_order = Vec::new();
        params.visit(&mut |_, t| visit_order.push(t.data()[0]));
        assert_eq!(map_order, visit_order);
        let mut names = Vec::new();
        params.visit(&mut |n, _| names.push(n));
        assert_eq!(names.len(), 38);
        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), names.len(), "duplicate parameter names");
    }

    #[test]
    fn bank_growth_is_monotone() {
        let mut bank = SlotBank::new(2, 8);
        bank.grow_to(5);
        assert_eq!(bank.active_k, 5);
        let shrink = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let mut b = bank;
            b.grow_to(4);
        }));
        assert!(shrink.is_err());
    }
}
