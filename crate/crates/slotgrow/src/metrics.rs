//! Evaluation metrics over predicted and ground-truth mask grids:
//! foreground adjusted Rand index (video- and image-scope), mean best
//! overlap, object-instance recall, and the over- / under-segmentation
//! factors, all with explicit handling of undefined cases.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::data::MaskGrid;

/// Intersection-over-union of two binary masks; 0 when both are empty.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "IoU masks differ in size");
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AriScope {
    Video,
    Image,
}

fn comb2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same pixels, computed
/// from the contingency table. Degenerate tables (both labelings trivial,
/// so the adjustment denominator vanishes) score 1.0, matching the common
/// convention for identical trivial partitions.
fn ari(gt: &[u16], pred: &[u16]) -> f64 {
    debug_assert_eq!(gt.len(), pred.len());
    let n = gt.len() as u64;
    if n == 0 {
        return 1.0;
    }
    let mut table: HashMap<(u16, u16), u64> = HashMap::new();
    let mut rows: HashMap<u16, u64> = HashMap::new();
    let mut cols: HashMap<u16, u64> = HashMap::new();
    for (&g, &p) in gt.iter().zip(pred) {
        *table.entry((g, p)).or_default() += 1;
        *rows.entry(g).or_default() += 1;
        *cols.entry(p).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| comb2(c)).sum();
    let row_sum: f64 = rows.values().map(|&c| comb2(c)).sum();
    let col_sum: f64 = cols.values().map(|&c| comb2(c)).sum();
    let total = comb2(n);
    if total == 0.0 {
        return 1.0; // single pixel: both partitions trivially identical
    }
    let expected = row_sum * col_sum / total;
    let max = 0.5 * (row_sum + col_sum);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Foreground adjusted Rand index.
///
/// Background pixels (ground-truth label 0) are dropped; the remaining
/// pixels carry two labelings — ground-truth instance ids and predicted slot
/// ids — whose clustering agreement is scored. `Video` scope pools all
/// frames into one labeling; `Image` scope scores each frame with foreground
/// and averages. Returns `None` when no foreground exists in scope.
pub fn fg_ari(pred: &MaskGrid, gt: &MaskGrid, scope: AriScope) -> Option<f64> {
    assert_eq!(
        (pred.t, pred.h, pred.w),
        (gt.t, gt.h, gt.w),
        "mask grids differ in shape"
    );
    let collect = |gt_frame: &[u16], pred_frame: &[u16]| -> (Vec<u16>, Vec<u16>) {
        let mut g = Vec::new();
        let mut p = Vec::new();
        for (&gv, &pv) in gt_frame.iter().zip(pred_frame) {
            if gv != 0 {
                g.push(gv);
                p.push(pv);
            }
        }
        (g, p)
    };
    match scope {
        AriScope::Video => {
            let (g, p) = collect(gt.data(), pred.data());
            if g.is_empty() {
                None
            } else {
                Some(ari(&g, &p))
            }
        }
        AriScope::Image => {
            let mut sum = 0.0;
            let mut frames = 0usize;
            for t in 0..gt.t {
                let (g, p) = collect(gt.frame(t), pred.frame(t));
                if g.is_empty() {
                    continue;
                }
                sum += ari(&g, &p);
                frames += 1;
            }
            if frames == 0 {
                None
            } else {
                Some(sum / frames as f64)
            }
        }
    }
}

fn mask_of(labels: &[u16], id: u16) -> Vec<bool> {
    labels.iter().map(|&v| v == id).collect()
}

fn ids_present(labels: &[u16], skip_zero: bool) -> Vec<u16> {
    let mut ids: Vec<u16> = labels.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if skip_zero {
        ids.retain(|&v| v != 0);
    }
    ids
}

/// Mean best overlap over spatio-temporal object masks: each ground-truth
/// object (as a video-long binary mask) is scored by its best IoU against
/// any slot's video-long mask, and the scores are averaged. `None` when the
/// video contains no objects.
pub fn mbo_video(pred: &MaskGrid, gt: &MaskGrid) -> Option<f64> {
    assert_eq!((pred.t, pred.h, pred.w), (gt.t, gt.h, gt.w));
    let objects = ids_present(gt.data(), true);
    if objects.is_empty() {
        return None;
    }
    let slots = ids_present(pred.data(), false);
    let mut sum = 0.0;
    for &g in &objects {
        let gmask = mask_of(gt.data(), g);
        let best = slots
            .iter()
            .map(|&k| iou(&gmask, &mask_of(pred.data(), k)))
            .fold(0.0f64, f64::max);
        sum += best;
    }
    Some(sum / objects.len() as f64)
}

/// Mean best overlap over frame-level object instances: every appearance of
/// an object in a frame is scored independently and the scores pooled.
pub fn mbo_image(pred: &MaskGrid, gt: &MaskGrid) -> Option<f64> {
    assert_eq!((pred.t, pred.h, pred.w), (gt.t, gt.h, gt.w));
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 0..gt.t {
        let gt_f = gt.frame(t);
        let pred_f = pred.frame(t);
        let slots = ids_present(pred_f, false);
        for g in ids_present(gt_f, true) {
            let gmask = mask_of(gt_f, g);
            let best = slots
                .iter()
                .map(|&k| iou(&gmask, &mask_of(pred_f, k)))
                .fold(0.0f64, f64::max);
            sum += best;
            count += 1;
        }
    }
    if count == 0 {
        None
    } else {
        Some(sum / count as f64)
    }
}

/// Object-instance recall at threshold `rho`: the fraction of frame-level
/// ground-truth instances for which at least one slot reaches IoU >= rho.
/// `None` when no instance exists anywhere.
pub fn oir(pred: &MaskGrid, gt: &MaskGrid, rho: f64) -> Option<f64> {
    assert_eq!((pred.t, pred.h, pred.w), (gt.t, gt.h, gt.w));
    assert!(rho > 0.0 && rho <= 1.0, "rho must lie in (0, 1]");
    let mut covered = 0usize;
    let mut valid = 0usize;
    for t in 0..gt.t {
        let gt_f = gt.frame(t);
        let pred_f = pred.frame(t);
        let slots = ids_present(pred_f, false);
        for g in ids_present(gt_f, true) {
            let gmask = mask_of(gt_f, g);
            valid += 1;
            let hit = slots.iter().any(|&k| iou(&gmask, &mask_of(pred_f, k)) >= rho);
            covered += hit as usize;
        }
    }
    if valid == 0 {
        None
    } else {
        Some(covered as f64 / valid as f64)
    }
}

/// Decomposition-over-fragmentation factor at threshold `rho`.
///
/// A slot *represents* an object in a frame when at least a `rho` fraction
/// of the slot's pixels lie inside the object. Detected objects are those
/// with one or more representing slots; each frame scores the mean number
/// of representing slots over its detected objects, and frames with
/// detections are averaged. 1.0 is ideal; larger means objects are split
/// across slots. `None` when nothing is detected anywhere.
pub fn dof(pred: &MaskGrid, gt: &MaskGrid, rho: f64) -> Option<f64> {
    assert_eq!((pred.t, pred.h, pred.w), (gt.t, gt.h, gt.w));
    assert!(rho > 0.0 && rho <= 1.0, "rho must lie in (0, 1]");
    let mut frame_sum = 0.0;
    let mut frames = 0usize;
    for t in 0..gt.t {
        let gt_f = gt.frame(t);
        let pred_f = pred.frame(t);
        let mut det_sum = 0usize;
        let mut det_count = 0usize;
        for g in ids_present(gt_f, true) {
            let gmask = mask_of(gt_f, g);
            let mut reps = 0usize;
            for k in ids_present(pred_f, false) {
                let kmask = mask_of(pred_f, k);
                let size = kmask.iter().filter(|&&v| v).count();
                if size == 0 {
                    continue;
                }
                let inside = kmask
                    .iter()
                    .zip(&gmask)
                    .filter(|&(&m, &g)| m && g)
                    .count();
                if inside as f64 / size as f64 >= rho {
                    reps += 1;
                }
            }
            if reps > 0 {
                det_sum += reps;
                det_count += 1;
            }
        }
        if det_count > 0 {
            frame_sum += det_sum as f64 / det_count as f64;
            frames += 1;
        }
    }
    if frames == 0 {
        None
    } else {
        Some(frame_sum / frames as f64)
    }
}

/// Distinct-object-undersegmentation factor at threshold `rho`.
///
/// A slot *matches* an object in a frame when their IoU reaches `rho`; each
/// frame scores the mean number of matched objects over its matched slots,
/// and frames with matches are averaged. 1.0 is ideal; larger means single
/// slots are merging distinct objects. `None` when no slot matches anywhere.
pub fn duf(pred: &MaskGrid, gt: &MaskGrid, rho: f64) -> Option<f64> {
    assert_eq!((pred.t, pred.h, pred.w), (gt.t, gt.h, gt.w));
    assert!(rho > 0.0 && rho <= 1.0, "rho must lie in (0, 1]");
    let mut frame_sum = 0.0;
    let mut frames = 0usize;
    for t in 0..gt.t {
        let gt_f = gt.frame(t);
        let pred_f = pred.frame(t);
        let objects: Vec<Vec<bool>> = ids_present(gt_f, true)
            .into_iter()
            .map(|g| mask_of(gt_f, g))
            .collect();
        let mut match_sum = 0usize;
        let mut matched_slots = 0usize;
        for k in ids_present(pred_f, false) {
            let kmask = mask_of(pred_f, k);
            let matches = objects.iter().filter(|g| iou(&kmask, g) >= rho).count();
            if matches > 0 {
                match_sum += matches;
                matched_slots += 1;
            }
        }
        if matched_slots > 0 {
            frame_sum += match_sum as f64 / matched_slots as f64;
            frames += 1;
        }
    }
    if frames == 0 {
        None
    } else {
        Some(frame_sum / frames as f64)
    }
}

/// All metrics for one clip. `None` marks an undefined value, never zero.
#[derive(Clone, Debug, Serialize)]
pub struct ClipMetrics {
    pub fg_ari_video: Option<f64>,
    pub fg_ari_image: Option<f64>,
    pub mbo_video: Option<f64>,
    pub mbo_image: Option<f64>,
    /// Indexed like the report's `rhos`.
    pub oir: Vec<Option<f64>>,
    pub dof: Vec<Option<f64>>,
    pub duf: Vec<Option<f64>>,
}

pub fn evaluate_clip(pred: &MaskGrid, gt: &MaskGrid, rhos: &[f64]) -> ClipMetrics {
    ClipMetrics {
        fg_ari_video: fg_ari(pred, gt, AriScope::Video),
        fg_ari_image: fg_ari(pred, gt, AriScope::Image),
        mbo_video: mbo_video(pred, gt),
        mbo_image: mbo_image(pred, gt),
        oir: rhos.iter().map(|&r| oir(pred, gt, r)).collect(),
        dof: rhos.iter().map(|&r| dof(pred, gt, r)).collect(),
        duf: rhos.iter().map(|&r| duf(pred, gt, r)).collect(),
    }
}

/// A mean over the clips where a metric was defined, with the split
/// recorded so undefined clips are visible rather than zero-filled.
#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct MetricValue {
    pub mean: Option<f64>,
    pub defined_clips: usize,
    pub undefined_clips: usize,
}

impl MetricValue {
    fn from_values<I: IntoIterator<Item = Option<f64>>>(values: I) -> MetricValue {
        let mut sum = 0.0;
        let mut defined = 0usize;
        let mut undefined = 0usize;
        for v in values {
            match v {
                Some(x) => {
                    sum += x;
                    defined += 1;
                }
                None => undefined += 1,
            }
        }
        MetricValue {
            mean: if defined > 0 { Some(sum / defined as f64) } else { None },
            defined_clips: defined,
            undefined_clips: undefined,
        }
    }

    fn kv(&self, name: &str, out: &mut String) {
        match self.mean {
            Some(v) => out.push_str(&format!("{}={:.6}\n", name, v)),
            None => out.push_str(&format!("{}=undefined\n", name)),
        }
        out.push_str(&format!(
            "{}_clips={}/{}\n",
            name,
            self.defined_clips,
            self.defined_clips + self.undefined_clips
        ));
    }
}

/// Aggregated evaluation over a clip set.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub rhos: Vec<f64>,
    pub clips: usize,
    pub fg_ari_video: MetricValue,
    pub fg_ari_image: MetricValue,
    pub mbo_video: MetricValue,
    pub mbo_image: MetricValue,
    /// Keyed by the formatted threshold, e.g. `"0.5"`.
    pub oir: BTreeMap<String, MetricValue>,
    pub dof: BTreeMap<String, MetricValue>,
    pub duf: BTreeMap<String, MetricValue>,
    pub per_clip: Vec<ClipMetrics>,
}

fn rho_key(rho: f64) -> String {
    format!("{}", rho)
}

pub fn aggregate(per_clip: Vec<ClipMetrics>, rhos: &[f64]) -> MetricsReport {
    let collect_at = |pick: &dyn Fn(&ClipMetrics) -> &Vec<Option<f64>>| -> BTreeMap<String, MetricValue> {
        rhos.iter()
            .enumerate()
            .map(|(i, &r)| {
                let vals = per_clip.iter().map(|c| pick(c)[i]);
                (rho_key(r), MetricValue::from_values(vals))
            })
            .collect()
    };
    MetricsReport {
        rhos: rhos.to_vec(),
        clips: per_clip.len(),
        fg_ari_video: MetricValue::from_values(per_clip.iter().map(|c| c.fg_ari_video)),
        fg_ari_image: MetricValue::from_values(per_clip.iter().map(|c| c.fg_ari_image)),
        mbo_video: MetricValue::from_values(per_clip.iter().map(|c| c.mbo_video)),
        mbo_image: MetricValue::from_values(per_clip.iter().map(|c| c.mbo_image)),
        oir: collect_at(&|c| &c.oir),
        dof: collect_at(&|c| &c.dof),
        duf: collect_at(&|c| &c.duf),
        per_clip,
    }
}

impl MetricsReport {
    /// Human-auditable `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("clips={}\n", self.clips));
        self.fg_ari_video.kv("fg_ari_video", &mut out);
        self.fg_ari_image.kv("fg_ari_image", &mut out);
        self.mbo_video.kv("mbo_video", &mut out);
        self.mbo_image.kv("mbo_image", &mut out);
        for (name, map) in [("oir", &self.oir), ("dof", &self.dof), ("duf", &self.duf)] {
            for (key, value) in map {
                value.kv(&format!("{}@{}", name, key), &mut out);
            }
        }
        out
    }
}

/// Independent cross-check implementations, deliberately written in a
/// different style (explicit pair enumeration) from the production paths.
pub mod oracle {
    /// Adjusted Rand index by brute-force enumeration of all pixel pairs.
    /// Quadratic in the number of pixels; for tests only.
    pub fn ari_from_pairs(gt: &[u16], pred: &[u16]) -> f64 {
        assert_eq!(gt.len(), pred.len());
        let n = gt.len();
        let (mut both, mut gt_only, mut pred_only, mut neither) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..n {
            for j in (i + 1)..n {
                let same_gt = gt[i] == gt[j];
                let same_pred = pred[i] == pred[j];
                match (same_gt, same_pred) {
                    (true, true) => both += 1,
                    (true, false) => gt_only += 1,
                    (false, true) => pred_only += 1,
                    (false, false) => neither += 1,
                }
            }
        }
        let (a, b, c, d) = (both as f64, gt_only as f64, pred_only as f64, neither as f64);
        let denom = (a + b) * (b + d) + (a + c) * (c + d);
        if denom == 0.0 {
            return 1.0;
        }
        2.0 * (a * d - b * c) / denom
    }
}
