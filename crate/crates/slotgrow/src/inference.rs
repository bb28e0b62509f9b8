//! Evaluation-time slot rollouts — plain forward, full cyclic (forward then
//! backward over the frames), and chunk-wise cyclic for streaming — plus
//! pixel-resolution mask extraction and the mask dump format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::MaskGrid;
use crate::error::{Error, Result};
use crate::model::{decode, project, rollout, slot_attention_step, ModelConfig, Params};
use crate::tensor::kernels::slice;
use crate::tensor::{Engine, Eval, Tensor};

pub const MASK_MAGIC: &[u8; 4] = b"SCM1";

/// Which half of a cyclic sweep a step belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Forward,
    Backward,
}

/// One slot-attention step applied during a rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepRecord {
    pub phase: Phase,
    pub frame: usize,
    pub iters: usize,
}

/// The exact sequence of attention steps a rollout performed.
#[derive(Clone, Debug, Default)]
pub struct RolloutTrace {
    pub steps: Vec<StepRecord>,
}

impl RolloutTrace {
    /// Total attention iterations across all steps; the unit of rollout cost.
    pub fn total_iters(&self) -> usize {
        self.steps.iter().map(|s| s.iters).sum()
    }
}

/// Plain forward rollout on raw patch features `[T, N, d_feat]`.
pub fn forward_rollout(
    params: &Params<Tensor>,
    cfg: &ModelConfig,
    features: &Tensor,
    active_k: usize,
) -> Tensor {
    let mut eng = Eval;
    let projected = project(&mut eng, &params.projector, features);
    rollout(&mut eng, params, cfg, &projected, active_k)
}

/// Full cyclic rollout: sweep the frames forward, then backward seeded by the
/// forward pass's final slots; the backward states are the ones decoded.
pub fn cyclic_rollout(
    params: &Params<Tensor>,
    cfg: &ModelConfig,
    features: &Tensor,
    active_k: usize,
) -> Tensor {
    let t = features.shape()[0];
    chunked_cyclic_rollout(params, cfg, features, active_k, t)
}

/// Chunk-wise cyclic rollout for streaming settings.
///
/// Frames are split into consecutive chunks of at most `chunk` frames. Each
/// chunk runs a forward sweep and then a backward sweep as in
/// [`cyclic_rollout`]; the slots entering a chunk are the *forward* output of
/// the previous chunk, so backward refinement stays local to its chunk.
/// `chunk >= T` reproduces the full cyclic rollout exactly.
pub fn chunked_cyclic_rollout(
    params: &Params<Tensor>,
    cfg: &ModelConfig,
    features: &Tensor,
    active_k: usize,
    chunk: usize,
) -> Tensor {
    chunked_cyclic_traced(params, cfg, features, active_k, chunk).0
}

/// As [`chunked_cyclic_rollout`], also returning the step trace.
///
/// Each frame's backward visit reuses the iteration count of its forward
/// visit, so a cyclic sweep costs exactly twice the forward sweep, and a
/// chunk size of 1 degenerates to a forward rollout with per-frame
/// iteration counts doubled.
pub fn chunked_cyclic_traced(
    params: &Params<Tensor>,
    cfg: &ModelConfig,
    features: &Tensor,
    active_k: usize,
    chunk: usize,
) -> (Tensor, RolloutTrace) {
    assert!(chunk >= 1, "chunk size must be at least 1");
    let sh = features.shape();
    assert_eq!(sh.len(), 3, "expected features [T, N, d_feat], got {:?}", sh);
    let t_len = sh[0];
    assert!(t_len >= 1, "rollout needs at least one frame");
    let mut eng = Eval;
    let projected = project(&mut eng, &params.projector, features); // [T, N, d_slot]
    let n = eng.shape(&projected)[1];
    let frame = |t: usize| slice(&projected, 0, t, 1).reshaped(&[n, cfg.d_slot]);

    let mut trace = RolloutTrace::default();
    let mut entry = slice(&params.bank, 0, 0, active_k); // placeholder prefix
    let mut out = Vec::with_capacity(t_len * active_k * cfg.d_slot);
    let mut states: Vec<Tensor> = Vec::with_capacity(t_len);
    let mut start = 0;
    while start < t_len {
        let end = (start + chunk).min(t_len);
        let mut iter_counts = Vec::with_capacity(end - start);
        let mut slots = entry;
        for t in start..end {
            let iters = if t == 0 { cfg.l_first } else { cfg.l_later };
            let v_t = frame(t);
            let (next, _) = slot_attention_step(&mut eng, &params.attention, cfg, &v_t, &slots, iters);
            slots = next;
            iter_counts.push(iters);
            trace.steps.push(StepRecord { phase: Phase::Forward, frame: t, iters });
        }
        entry = slots.clone(); // next chunk continues from the forward sweep
        let mut back = slots;
        let mut chunk_states = vec![None; end - start];
        for t in (start..end).rev() {
            let iters = iter_counts[t - start];
            let v_t = frame(t);
            let (next, _) = slot_attention_step(&mut eng, &params.attention, cfg, &v_t, &back, iters);
            back = next;
            chunk_states[t - start] = Some(back.clone());
            trace.steps.push(StepRecord { phase: Phase::Backward, frame: t, iters });
        }
        states.extend(chunk_states.into_iter().map(Option::unwrap));
        start = end;
    }
    for s in &states {
        out.extend_from_slice(s.data());
    }
    (Tensor::new(vec![t_len, active_k, cfg.d_slot], out), trace)
}

/// Pixel-resolution slot assignment derived from decoder mixture weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSequence {
    /// Winning slot index per pixel, `[T, H, W]`.
    pub pred: MaskGrid,
    /// The patch-grid mixture weights the assignment came from, `[T, K, N]`.
    pub alpha_patch: Tensor,
}

/// Upsample patch mixture weights to pixels by block replication and take the
/// per-pixel argmax, ties to the lowest slot index.
///
/// Block replication (rather than bilinear upsampling) keeps the result
/// piecewise-constant over patch blocks, so every pixel's label is exactly
/// the argmax of one alpha column.
pub fn argmax_upsample(alpha: &Tensor, grid_h: usize, grid_w: usize, patch: usize) -> MaskGrid {
    let sh = alpha.shape();
    assert_eq!(sh.len(), 3, "expected alpha [T, K, N], got {:?}", sh);
    let (t_len, k, n) = (sh[0], sh[1], sh[2]);
    assert_eq!(n, grid_h * grid_w, "alpha columns do not match the grid");
    assert!(k <= u16::MAX as usize + 1, "slot index must fit in u16");
    let (h, w) = (grid_h * patch, grid_w * patch);
    let a = alpha.data();
    let mut pred = MaskGrid::zeros(t_len, h, w);
    for t in 0..t_len {
        for gy in 0..grid_h {
            for gx in 0..grid_w {
                let ni = gy * grid_w + gx;
                let mut best = 0usize;
                let mut best_val = a[(t * k) * n + ni];
                for ki in 1..k {
                    let v = a[(t * k + ki) * n + ni];
                    if v > best_val {
                        best_val = v;
                        best = ki;
                    }
                }
                for py in 0..patch {
                    for px in 0..patch {
                        pred.set(t, gy * patch + py, gx * patch + px, best as u16);
                    }
                }
            }
        }
    }
    pred
}

/// Decode slot states to a pixel-level mask sequence.
///
/// `height` and `width` must be multiples of `patch` and agree with the
/// model's patch grid.
pub fn decode_masks(
    states: &Tensor,
    params: &Params<Tensor>,
    cfg: &ModelConfig,
    height: usize,
    width: usize,
    patch: usize,
) -> MaskSequence {
    assert!(
        height % patch == 0 && width % patch == 0,
        "frame size {}x{} not divisible by patch {}",
        height,
        width,
        patch
    );
    let (grid_h, grid_w) = (height / patch, width / patch);
    assert_eq!(grid_h * grid_w, cfg.n, "patch grid does not match the model");
    let mut eng = Eval;
    let decoded = decode(&mut eng, &params.decoder, cfg, states);
    let pred = argmax_upsample(&decoded.alpha, grid_h, grid_w, patch);
    MaskSequence {
        pred,
        alpha_patch: decoded.alpha,
    }
}

/// Write a predicted mask sequence: magic, `T`, `H`, `W`, `K`, then the
/// labels row-major as little-endian u16.
pub fn write_masks(path: &Path, pred: &MaskGrid, k: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MASK_MAGIC).map_err(io_err)?;
    for dim in [pred.t, pred.h, pred.w, k] {
        w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
    }
    let mut buf = Vec::with_capacity(pred.data().len() * 2);
    for &v in pred.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Read a mask dump back; returns the labels and the slot count they index.
pub fn read_masks(path: &Path) -> Result<(MaskGrid, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    crate::data::check_magic(&mut r, path, MASK_MAGIC)?;
    let t = crate::data::read_u32(&mut r, path, "mask frame count")? as usize;
    let h = crate::data::read_u32(&mut r, path, "mask height")? as usize;
    let w = crate::data::read_u32(&mut r, path, "mask width")? as usize;
    let k = crate::data::read_u32(&mut r, path, "mask slot count")? as usize;
    let mut bytes = vec![0u8; t * h * w * 2];
    crate::data::read_exact(&mut r, &mut bytes, path, "mask labels")?;
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                detail: "trailing bytes after mask labels".into(),
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    }
    let data: Vec<u16> = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let mut grid = MaskGrid::zeros(t, h, w);
    grid.data_mut().copy_from_slice(&data);
    Ok((grid, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward_batch;
    use tempfile::tempdir;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_feat: 4,
            d_slot: 6,
            hidden: 6,
            dec_hidden: 6,
            n: 4,
            k_max: 4,
            l_first: 3,
            l_later: 2,
            heads: 1,
        }
    }

    fn tiny_features(t: usize, cfg: &ModelConfig, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[t, cfg.n, cfg.d_feat], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn forward_rollout_delegates_to_the_model() {
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 1);
        let feats = tiny_features(4, &cfg, 2);
        let got = forward_rollout(&params, &cfg, &feats, 2);
        assert_eq!(got.shape(), &[4, 2, cfg.d_slot]);
        let mut eng = Eval;
        let projected = project(&mut eng, &params.projector, &feats);
        let want = rollout(&mut eng, &params, &cfg, &projected, 2);
        assert_eq!(got.data(), want.data(), "must be bit-identical to the model rollout");
    }

    #[test]
    fn chunk_at_least_t_equals_full_cyclic() {
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 3);
        let feats = tiny_features(5, &cfg, 4);
        let full = cyclic_rollout(&params, &cfg, &feats, 3);
        for c in [5, 6, 100] {
            let chunked = chunked_cyclic_rollout(&params, &cfg, &feats, 3, c);
            assert_eq!(full.data(), chunked.data(), "chunk {}", c);
        }
    }

    #[test]
    fn single_frame_gets_two_refinement_steps() {
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 5);
        let feats = tiny_features(1, &cfg, 6);
        let (_, trace) = chunked_cyclic_traced(&params, &cfg, &feats, 2, 1);
        assert_eq!(
            trace.steps,
            vec![
                StepRecord { phase: Phase::Forward, frame: 0, iters: cfg.l_first },
                StepRecord { phase: Phase::Backward, frame: 0, iters: cfg.l_first },
            ]
        );
    }

    #[test]
    fn chunk_boundaries_partition_frames() {
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 7);
        let feats = tiny_features(6, &cfg, 8);
        let (_, trace) = chunked_cyclic_traced(&params, &cfg, &feats, 2, 4);
        let visits: Vec<(Phase, usize)> = trace.steps.iter().map(|s| (s.phase, s.frame)).collect();
        let expected = [
            (Phase::Forward, 0),
            (Phase::Forward, 1),
            (Phase::Forward, 2),
            (Phase::Forward, 3),
            (Phase::Backward, 3),
            (Phase::Backward, 2),
            (Phase::Backward, 1),
            (Phase::Backward, 0),
            (Phase::Forward, 4),
            (Phase::Forward, 5),
            (Phase::Backward, 5),
            (Phase::Backward, 4),
        ];
        assert_eq!(visits, expected);
        // every frame decoded exactly once
        let mut seen = [0usize; 6];
        for s in &trace.steps {
            if s.phase == Phase::Backward {
                seen[s.frame] += 1;
            }
        }
        assert_eq!(seen, [1; 6]);
    }

    #[test]
    fn chunk_of_one_refines_each_frame_twice_in_place() {
        // chunk size 1 spends the same per-frame budget as a forward rollout
        // with doubled iteration counts: each frame is visited forward then
        // immediately backward with its forward count repeated
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 9);
        let feats = tiny_features(4, &cfg, 10);
        let (_, trace) = chunked_cyclic_traced(&params, &cfg, &feats, 2, 1);
        let mut per_frame = [0usize; 4];
        for s in &trace.steps {
            per_frame[s.frame] += s.iters;
        }
        assert_eq!(per_frame[0], 2 * cfg.l_first);
        for t in 1..4 {
            assert_eq!(per_frame[t], 2 * cfg.l_later);
        }
        let visits: Vec<(Phase, usize)> = trace.steps.iter().map(|s| (s.phase, s.frame)).collect();
        let expected: Vec<(Phase, usize)> = (0..4)
            .flat_map(|t| [(Phase::Forward, t), (Phase::Backward, t)])
            .collect();
        assert_eq!(visits, expected);
    }

    #[test]
    fn cyclic_costs_exactly_twice_the_forward_sweep() {
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 11);
        let feats = tiny_features(5, &cfg, 12);
        let (_, trace) = chunked_cyclic_traced(&params, &cfg, &feats, 2, 5);
        let forward_iters = cfg.l_first + 4 * cfg.l_later;
        assert_eq!(trace.total_iters(), 2 * forward_iters);
    }

    #[test]
    fn rollouts_are_deterministic() {
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 13);
        let feats = tiny_features(3, &cfg, 14);
        let a = cyclic_rollout(&params, &cfg, &feats, 2);
        let b = cyclic_rollout(&params, &cfg, &feats, 2);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn argmax_prefers_lowest_slot_on_ties() {
        // 2 slots, 2x2 grid: one clear winner each plus an exact tie
        let alpha = Tensor::new(
            vec![1, 2, 4],
            vec![
                0.9, 0.5, 0.2, 0.5, // slot 0
                0.1, 0.5, 0.8, 0.5, // slot 1
            ],
        );
        let pred = argmax_upsample(&alpha, 2, 2, 2);
        assert_eq!((pred.t, pred.h, pred.w), (1, 4, 4));
        assert_eq!(pred.at(0, 0, 0), 0);
        assert_eq!(pred.at(0, 0, 2), 0, "tie resolves to slot 0");
        assert_eq!(pred.at(0, 2, 0), 1);
        assert_eq!(pred.at(0, 2, 2), 0, "tie resolves to slot 0");
        // block replication: constant within each patch block
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert_eq!(pred.at(0, y, x), 0);
        }
    }

    #[test]
    fn single_slot_claims_every_pixel() {
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 15);
        let feats = tiny_features(2, &cfg, 16);
        let states = forward_rollout(&params, &cfg, &feats, 1);
        let masks = decode_masks(&states, &params, &cfg, 8, 8, 4);
        assert!(masks.pred.data().iter().all(|&v| v == 0));
        assert_eq!(masks.alpha_patch.shape(), &[2, 1, 4]);
    }

    #[test]
    fn decoded_labels_stay_under_k() {
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 17);
        let feats = tiny_features(3, &cfg, 18);
        let k = 3;
        let states = cyclic_rollout(&params, &cfg, &feats, k);
        let masks = decode_masks(&states, &params, &cfg, 8, 8, 4);
        assert_eq!((masks.pred.t, masks.pred.h, masks.pred.w), (3, 8, 8));
        assert!(masks.pred.data().iter().all(|&v| (v as usize) < k));
    }

    #[test]
    fn mask_file_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("masks.scm");
        let mut pred = MaskGrid::zeros(2, 3, 4);
        for (i, v) in pred.data_mut().iter_mut().enumerate() {
            *v = (i % 5) as u16;
        }
        write_masks(&path, &pred, 5).unwrap();
        let (back, k) = read_masks(&path).unwrap();
        assert_eq!(k, 5);
        assert_eq!(back.data(), pred.data());
        assert_eq!((back.t, back.h, back.w), (2, 3, 4));
    }

    #[test]
    fn mask_file_error_kinds() {
        let dir = tempdir().unwrap();
        let bad = dir.path().join("bad.scm");
        std::fs::write(&bad, b"JUNKxxxx").unwrap();
        assert!(matches!(read_masks(&bad), Err(Error::BadMagic { .. })));
        let wrong_version = dir.path().join("ver.scm");
        std::fs::write(&wrong_version, b"SCM9\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_masks(&wrong_version), Err(Error::VersionMismatch { .. })));
        let short = dir.path().join("short.scm");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MASK_MAGIC);
        for dim in [2u32, 3, 4, 5] {
            bytes.extend_from_slice(&dim.to_le_bytes());
        }
        bytes.extend_from_slice(&[0u8; 10]); // 48 bytes short
        std::fs::write(&short, &bytes).unwrap();
        assert!(matches!(read_masks(&short), Err(Error::Truncated { .. })));
    }

    #[test]
    fn batched_and_streamed_forward_agree() {
        // the batched training path and the per-clip inference path share
        // kernels, so their slot states must match bit for bit
        let cfg = tiny_cfg();
        let params = Params::init_seeded(&cfg, 19);
        let feats = tiny_features(3, &cfg, 20);
        let batched_in = feats.reshaped(&[1, 3, cfg.n, cfg.d_feat]);
        let mut eng = Eval;
        let fwd = forward_batch(&mut eng, &params, &cfg, &batched_in, 2);
        let streamed = forward_rollout(&params, &cfg, &feats, 2);
        assert_eq!(
            fwd.slots.data(),
            streamed.data(),
            "training and inference forward passes diverged"
        );
    }
}
