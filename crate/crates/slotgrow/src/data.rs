//! Synthetic video generation, the frozen patch featurizer, and dataset I/O.
//!
//! Videos show 2–4 colored shapes (disks, rectangles, triangles) gliding over
//! a textured background with elastic reflection at the borders. Each clip
//! carries ground-truth instance masks. A frozen random projection over P×P
//! patches stands in for a pretrained vision backbone: it is created once from
//! a seed and never updated, so patch features are a pure function of pixels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"SCV1";

/// Integer label grid over `[T, H, W]`; 0 is background, 1..=G instance ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<u16>,
}

impl MaskGrid {
    pub fn new(t: usize, h: usize, w: usize, data: Vec<u16>) -> Self {
        assert_eq!(data.len(), t * h * w, "mask grid size mismatch");
        MaskGrid { t, h, w, data }
    }

    pub fn zeros(t: usize, h: usize, w: usize) -> Self {
        MaskGrid::new(t, h, w, vec![0; t * h * w])
    }

    pub fn at(&self, t: usize, y: usize, x: usize) -> u16 {
        self.data[(t * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, t: usize, y: usize, x: usize, v: u16) {
        self.data[(t * self.h + y) * self.w + x] = v;
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    /// One frame as a flat `[H * W]` label slice.
    pub fn frame(&self, t: usize) -> &[u16] {
        &self.data[t * self.h * self.w..(t + 1) * self.h * self.w]
    }

    /// Largest label present (0 when everything is background).
    pub fn max_id(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

/// One synthetic clip: pixels plus ground-truth instance masks.
///
/// `clip_id` records provenance (the generation seed, or the index within a
/// dataset file) and is excluded from equality: two samples are the same
/// sample if their pixels and masks agree.
#[derive(Clone, Debug)]
pub struct VideoSample {
    /// Pixels `[T, 3, H, W]` in `[0, 1]`, quantized to f32 precision so that
    /// writing and re-reading a dataset reproduces them bit for bit.
    pub frames: Tensor,
    pub masks: MaskGrid,
    pub clip_id: u64,
}

impl PartialEq for VideoSample {
    fn eq(&self, other: &Self) -> bool {
        self.frames == other.frames && self.masks == other.masks
    }
}

impl VideoSample {
    pub fn t(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Rect,
    Triangle,
}

impl ShapeKind {
    pub fn parse(s: &str) -> Result<ShapeKind> {
        match s {
            "disk" => Ok(ShapeKind::Disk),
            "rect" => Ok(ShapeKind::Rect),
            "triangle" => Ok(ShapeKind::Triangle),
            other => Err(Error::Config(format!(
                "unknown shape '{}', expected disk|rect|triangle",
                other
            ))),
        }
    }
}

/// Video generator settings.
#[derive(Clone, Debug)]
pub struct GenConfig {
    pub t: usize,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<ShapeKind>,
    /// Half-extent range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Speed range in pixels per frame.
    pub min_speed: f64,
    pub max_speed: f64,
    /// Peak deviation of the smooth background texture around its base gray.
    pub background_amplitude: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            t: 6,
            height: 64,
            width: 64,
            min_objects: 2,
            max_objects: 4,
            shapes: vec![ShapeKind::Disk, ShapeKind::Rect, ShapeKind::Triangle],
            min_size: 6.0,
            max_size: 12.0,
            min_speed: 1.0,
            max_speed: 3.0,
            background_amplitude: 0.08,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        if self.t == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("video dimensions must be positive".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "invalid object count range {}..={}",
                self.min_objects, self.max_objects
            )));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("shape palette is empty".into()));
        }
        if !(self.min_size > 0.0) || self.min_size > self.max_size {
            return Err(Error::Config(format!(
                "invalid size range {}..{}",
                self.min_size, self.max_size
            )));
        }
        let limit = 0.5 * self.height.min(self.width) as f64;
        if self.max_size >= limit {
            return Err(Error::Config(format!(
                "max object half-extent {} does not fit a {}x{} frame",
                self.max_size, self.height, self.width
            )));
        }
        if self.min_speed < 0.0 || self.min_speed > self.max_speed {
            return Err(Error::Config(format!(
                "invalid speed range {}..{}",
                self.min_speed, self.max_speed
            )));
        }
        Ok(())
    }
}

/// A shape on a linear trajectory.
#[derive(Clone, Debug)]
pub(crate) struct MovingObject {
    pub kind: ShapeKind,
    /// Per-axis half-extents (radius for disks).
    pub rx: f64,
    pub ry: f64,
    pub color: [f64; 3],
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl MovingObject {
    /// Does this shape cover the pixel whose center is `(px, py)`?
    fn covers(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.x, py - self.y);
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= self.rx * self.rx,
            ShapeKind::Rect => dx.abs() <= self.rx && dy.abs() <= self.ry,
            ShapeKind::Triangle => {
                // apex at the top, base at the bottom
                if dy < -self.ry || dy > self.ry {
                    return false;
                }
                let half_width_here = self.rx * (dy + self.ry) / (2.0 * self.ry);
                dx.abs() <= half_width_here
            }
        }
    }

    /// Advance one frame with elastic reflection off the frame borders.
    fn step(&mut self, width: f64, height: f64) {
        let reflect = |pos: &mut f64, vel: &mut f64, lo: f64, hi: f64| {
            *pos += *vel;
            if *pos < lo {
                *pos = 2.0 * lo - *pos;
                *vel = -*vel;
            } else if *pos > hi {
                *pos = 2.0 * hi - *pos;
                *vel = -*vel;
            }
        };
        let (rx, ry) = (self.rx, self.ry);
        reflect(&mut self.x, &mut self.vx, rx, width - rx);
        reflect(&mut self.y, &mut self.vy, ry, height - ry);
    }
}

/// Smooth low-frequency background texture, fixed per clip.
struct Background {
    base: f64,
    amplitude: f64,
    /// Per channel: (fx, fy, phase) of a sinusoidal pattern.
    waves: [(f64, f64, f64); 3],
}

impl Background {
    fn sample(rng: &mut ChaCha8Rng, amplitude: f64) -> Self {
        let mut waves = [(0.0, 0.0, 0.0); 3];
        for w in &mut waves {
            *w = (
                rng.gen_range(1..4) as f64,
                rng.gen_range(1..4) as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
        }
        Background {
            base: 0.15,
            amplitude,
            waves,
        }
    }

    fn pixel(&self, c: usize, y: f64, x: f64, h: f64, w: f64) -> f64 {
        let (fx, fy, phase) = self.waves[c];
        let angle = std::f64::consts::TAU * (fx * x / w + fy * y / h) + phase;
        (self.base + self.amplitude * angle.sin()).clamp(0.0, 1.0)
    }
}

pub(crate) fn sample_objects(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<MovingObject> {
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    (0..count)
        .map(|_| {
            let kind = cfg.shapes[rng.gen_range(0..cfg.shapes.len())];
            let rx = rng.gen_range(cfg.min_size..=cfg.max_size);
            let ry = match kind {
                ShapeKind::Disk => rx,
                _ => rng.gen_range(cfg.min_size..=cfg.max_size),
            };
            let color = [
                rng.gen_range(0.25..0.95),
                rng.gen_range(0.25..0.95),
                rng.gen_range(0.25..0.95),
            ];
            let x = rng.gen_range(rx..cfg.width as f64 - rx);
            let y = rng.gen_range(ry..cfg.height as f64 - ry);
            let speed = rng.gen_range(cfg.min_speed..=cfg.max_speed);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            MovingObject {
                kind,
                rx,
                ry,
                color,
                x,
                y,
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
            }
        })
        .collect()
}

fn render_clip(
    cfg: &GenConfig,
    background: &Background,
    objects: &mut [MovingObject],
    clip_id: u64,
) -> VideoSample {
    let (t, h, w) = (cfg.t, cfg.height, cfg.width);
    let mut frames = vec![0.0f64; t * 3 * h * w];
    let mut masks = MaskGrid::zeros(t, h, w);
    for ti in 0..t {
        if ti > 0 {
            for obj in objects.iter_mut() {
                obj.step(w as f64, h as f64);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                // later-indexed objects occlude earlier ones
                let mut top: Option<(usize, &MovingObject)> = None;
                for (i, obj) in objects.iter().enumerate() {
                    if obj.covers(px, py) {
                        top = Some((i, obj));
                    }
                }
                for c in 0..3 {
                    let v = match top {
                        Some((_, obj)) => obj.color[c],
                        None => background.pixel(c, py, px, h as f64, w as f64),
                    };
                    // quantize through f32 so dataset round-trips are lossless
                    frames[((ti * 3 + c) * h + y) * w + x] = (v as f32) as f64;
                }
                if let Some((i, _)) = top {
                    masks.set(ti, y, x, (i + 1) as u16);
                }
            }
        }
    }
    VideoSample {
        frames: Tensor::new(vec![t, 3, h, w], frames),
        masks,
        clip_id,
    }
}

/// Generate one clip. Identical `(config, seed)` gives bit-identical output.
pub fn generate_clip(cfg: &GenConfig, seed: u64) -> Result<VideoSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = Background::sample(&mut rng, cfg.background_amplitude);
    let mut objects = sample_objects(cfg, &mut rng);
    Ok(render_clip(cfg, &background, &mut objects, seed))
}

/// Generate `count` clips seeded `base_seed, base_seed + 1, ...`.
pub fn generate_dataset(cfg: &GenConfig, base_seed: u64, count: usize) -> Result<Vec<VideoSample>> {
    (0..count)
        .map(|i| generate_clip(cfg, base_seed + i as u64))
        .collect()
}

/// Patch-level features `[T, N, D]` over a `grid_h x grid_w` patch grid.
#[derive(Clone, Debug)]
pub struct PatchFeatures {
    pub p: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchFeatures {
    pub fn t(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.p.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.p.shape()[2]
    }
}

/// Frozen patch featurizer: random linear map over flattened P×P×3 patches
/// plus a per-position offset, squashed by tanh. Created once from a seed and
/// never trained, standing in for a pretrained vision backbone.
#[derive(Clone, Debug)]
pub struct Featurizer {
    pub patch: usize,
    pub d_feat: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    height: usize,
    width: usize,
    /// `[3 * P * P, D]`
    w_map: Tensor,
    /// `[N, D]`
    pos: Tensor,
}

impl Featurizer {
    pub fn new(patch: usize, d_feat: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} not divisible into {}x{} patches",
                height, width, patch, patch
            )));
        }
        let (grid_h, grid_w) = (height / patch, width / patch);
        let n = grid_h * grid_w;
        let fan_in = 3 * patch * patch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // scaled so pre-tanh activations have roughly unit spread
        let scale = 3.0 / (fan_in as f64).sqrt();
        let w_map = Tensor::from_fn(&[fan_in, d_feat], |_| rng.gen_range(-scale..scale));
        let pos = Tensor::from_fn(&[n, d_feat], |_| rng.gen_range(-0.5..0.5));
        Ok(Featurizer {
            patch,
            d_feat,
            grid_h,
            grid_w,
            height,
            width,
            w_map,
            pos,
        })
    }

    /// Featurize `[T, 3, H, W]` pixels into `[T, N, D]` patch features.
    pub fn featurize(&self, frames: &Tensor) -> Result<PatchFeatures> {
        let sh = frames.shape();
        if sh.len() != 4 || sh[1] != 3 {
            return Err(Error::Config(format!(
                "expected frames [T, 3, H, W], got {:?}",
                sh
            )));
        }
        if sh[2] != self.height || sh[3] != self.width {
            return Err(Error::Config(format!(
                "featurizer built for {}x{} frames, got {}x{}",
                self.height, self.width, sh[2], sh[3]
            )));
        }
        let (t, h, w) = (sh[0], sh[2], sh[3]);
        let (p, n) = (self.patch, self.grid_h * self.grid_w);
        let fan_in = 3 * p * p;
        let fd = frames.data();
        // gather patches: rows ordered (t, gy, gx), columns (c, py, px)
        let mut patches = vec![0.0f64; t * n * fan_in];
        for ti in 0..t {
            for gy in 0..self.grid_h {
                for gx in 0..self.grid_w {
                    let row = (ti * self.grid_h + gy) * self.grid_w + gx;
                    let mut col = 0;
                    for c in 0..3 {
                        for py in 0..p {
                            let y = gy * p + py;
                            let src = ((ti * 3 + c) * h + y) * w + gx * p;
                            for px in 0..p {
                                patches[row * fan_in + col] = fd[src + px];
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        let patches = Tensor::new(vec![t * n, fan_in], patches);
        let projected = kernels::matmul(&patches, &self.w_map);
        let projected = projected.reshaped(&[t, n, self.d_feat]);
        let pos = self.pos.reshaped(&[1, n, self.d_feat]);
        let shifted = kernels::broadcast_binary(&projected, &pos, |a, b| a + b);
        let features = kernels::map_unary(&shifted, f64::tanh);
        Ok(PatchFeatures {
            p: features,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
        })
    }

    #[cfg(test)]
    pub(crate) fn position_offsets(&self) -> &Tensor {
        &self.pos
    }
}

// --- dataset file format ---------------------------------------------------
//
// magic "SCV1" | u32 count | per sample: u32 T, H, W | f32 frames [T,3,H,W]
// row-major | u16 masks [T,H,W]. All integers and floats little-endian.

pub fn write_dataset(samples: &[VideoSample], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(DATASET_MAGIC).map_err(io_err)?;
    w.write_all(&(samples.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for s in samples {
        let (t, h, wd) = (s.t(), s.height(), s.width());
        for dim in [t, h, wd] {
            w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
        }
        for &v in s.frames.data() {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
        }
        for &m in s.masks.data() {
            w.write_all(&m.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_dataset(path: &Path) -> Result<Vec<VideoSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    check_magic(&mut r, path, DATASET_MAGIC)?;
    let count = read_u32(&mut r, path, "sample count")? as usize;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let t = read_u32(&mut r, path, "sample T")? as usize;
        let h = read_u32(&mut r, path, "sample H")? as usize;
        let w = read_u32(&mut r, path, "sample W")? as usize;
        let n_pix = t * 3 * h * w;
        let mut frames = vec![0.0f64; n_pix];
        let mut buf4 = [0u8; 4];
        for v in frames.iter_mut() {
            read_exact(&mut r, &mut buf4, path, "frame payload")?;
            *v = f32::from_le_bytes(buf4) as f64;
        }
        let mut masks = vec![0u16; t * h * w];
        let mut buf2 = [0u8; 2];
        for m in masks.iter_mut() {
            read_exact(&mut r, &mut buf2, path, "mask payload")?;
            *m = u16::from_le_bytes(buf2);
        }
        samples.push(VideoSample {
            frames: Tensor::new(vec![t, 3, h, w], frames),
            masks: MaskGrid::new(t, h, w, masks),
            clip_id: i as u64,
        });
    }
    Ok(samples)
}

/// Validate a 4-byte magic of the form `XYZ<version digit>`, distinguishing
/// a wrong file type from a right file type at an unsupported version.
pub(crate) fn check_magic(r: &mut impl Read, path: &Path, expected: &[u8; 4]) -> Result<()> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, path, "magic bytes")?;
    if magic == *expected {
        return Ok(());
    }
    if magic[..3] == expected[..3] {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: String::from_utf8_lossy(&magic).into_owned(),
            supported: String::from_utf8_lossy(expected).into_owned(),
        });
    }
    Err(Error::BadMagic {
        path: path.to_path_buf(),
        expected: String::from_utf8_lossy(expected).into_owned(),
    })
}

pub(crate) fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, what)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("file ended while reading {}", what),
            }
        } else {
            Error::io(path, e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> GenConfig {
        GenConfig {
            t: 4,
            height: 32,
            width: 32,
            min_objects: 1,
            max_objects: 2,
            min_size: 4.0,
            max_size: 8.0,
            ..GenConfig::default()
        }
    }

    #[test]
    fn static_disk_repeats_first_frame() {
        let cfg = GenConfig {
            min_objects: 1,
            max_objects: 1,
            min_speed: 0.0,
            max_speed: 0.0,
            shapes: vec![ShapeKind::Disk],
            ..tiny_cfg()
        };
        let s = generate_clip(&cfg, 3).unwrap();
        let (h, w) = (cfg.height, cfg.width);
        let frame0 = &s.frames.data()[..3 * h * w];
        for t in 1..cfg.t {
            let ft = &s.frames.data()[t * 3 * h * w..(t + 1) * 3 * h * w];
            assert_eq!(ft, frame0, "frame {} moved despite zero velocity", t);
            assert_eq!(s.masks.frame(t), s.masks.frame(0));
        }
    }

    #[test]
    fn occluded_pixels_carry_top_object_id() {
        let cfg = GenConfig {
            min_objects: 2,
            max_objects: 2,
            min_speed: 0.0,
            max_speed: 0.0,
            ..tiny_cfg()
        };
        let mut objects = vec![
            MovingObject {
                kind: ShapeKind::Rect,
                rx: 8.0,
                ry: 8.0,
                color: [0.5, 0.5, 0.5],
                x: 16.0,
                y: 16.0,
                vx: 0.0,
                vy: 0.0,
            },
            MovingObject {
                kind: ShapeKind::Disk,
                rx: 5.0,
                ry: 5.0,
                color: [0.9, 0.2, 0.2],
                x: 16.0,
                y: 16.0,
                vx: 0.0,
                vy: 0.0,
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bg = Background::sample(&mut rng, 0.05);
        let snapshot = objects.clone();
        let s = render_clip(&cfg, &bg, &mut objects, 0);
        let mut overlap = 0;
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let in0 = snapshot[0].covers(px, py);
                let in1 = snapshot[1].covers(px, py);
                let want = if in1 {
                    2
                } else if in0 {
                    1
                } else {
                    0
                };
                assert_eq!(s.masks.at(0, y, x), want, "pixel ({}, {})", y, x);
                if in0 && in1 {
                    overlap += 1;
                }
            }
        }
        assert!(overlap > 0, "test geometry should actually overlap");
    }

    #[test]
    fn same_seed_is_bit_identical_different_seed_is_not() {
        let cfg = tiny_cfg();
        let a = generate_clip(&cfg, 7).unwrap();
        let b = generate_clip(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames.data(), b.frames.data());
        let c = generate_clip(&cfg, 8).unwrap();
        assert_ne!(a.frames.data(), c.frames.data());
    }

    #[test]
    fn mask_ids_stay_within_declared_range() {
        let cfg = GenConfig::default();
        for seed in 0..5 {
            let s = generate_clip(&cfg, seed).unwrap();
            let g = s.masks.max_id() as usize;
            assert!(g >= cfg.min_objects && g <= cfg.max_objects);
            for &id in s.masks.data() {
                assert!((id as usize) <= g);
            }
        }
    }

    #[test]
    fn oversized_objects_rejected() {
        let cfg = GenConfig {
            max_size: 40.0,
            ..tiny_cfg()
        };
        match generate_clip(&cfg, 0) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {:?}", other),
        }
    }

    #[test]
    fn featurizer_shapes_and_determinism() {
        let cfg = GenConfig::default();
        let s = generate_clip(&cfg, 1).unwrap();
        let f = Featurizer::new(8, 16, 64, 64, 99).unwrap();
        let a = f.featurize(&s.frames).unwrap();
        assert_eq!(a.p.shape(), &[6, 64, 16]);
        assert_eq!((a.grid_h, a.grid_w), (8, 8));
        let b = f.featurize(&s.frames).unwrap();
        assert_eq!(a.p.data(), b.p.data(), "featurizer must be frozen");
    }

    #[test]
    fn identical_patches_differ_only_by_position_offset() {
        // uniform frames -> every patch has the same content, so undoing the
        // tanh and subtracting the positional offset must collapse all rows
        let frames = Tensor::full(&[1, 3, 16, 16], 0.4);
        let f = Featurizer::new(8, 6, 16, 16, 5).unwrap();
        let feats = f.featurize(&frames).unwrap();
        let pos = f.position_offsets();
        let n = feats.n();
        let mut base: Option<Vec<f64>> = None;
        for row in 0..n {
            let recovered: Vec<f64> = (0..feats.d())
                .map(|d| feats.p.at(&[0, row, d]).atanh() - pos.at(&[row, d]))
                .collect();
            match &base {
                None => base = Some(recovered),
                Some(b) => {
                    for (a, e) in recovered.iter().zip(b) {
                        assert!((a - e).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn feature_spread_is_calibrated() {
        let cfg = GenConfig::default();
        let f = Featurizer::new(8, 16, 64, 64, 7).unwrap();
        let mut all = Vec::new();
        for seed in 0..8 {
            let s = generate_clip(&cfg, seed).unwrap();
            all.extend_from_slice(f.featurize(&s.frames).unwrap().p.data());
        }
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
        let std = var.sqrt();
        assert!(
            (0.1..=10.0).contains(&std),
            "feature std {} outside calibrated range",
            std
        );
    }

    #[test]
    fn indivisible_patch_dims_rejected() {
        match Featurizer::new(8, 16, 60, 64, 0) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {:?}", other),
        }
    }

    #[test]
    fn dataset_roundtrip_is_lossless() {
        let cfg = tiny_cfg();
        let samples = generate_dataset(&cfg, 11, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clips.scv");
        write_dataset(&samples, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(samples, back);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.frames.data(), b.frames.data(), "frames not bit-exact");
        }
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.scv");
        write_dataset(&[], &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), Vec::<VideoSample>::new());
    }

    #[test]
    fn corrupt_magic_and_version_and_truncation_are_distinct() {
        let cfg = tiny_cfg();
        let samples = generate_dataset(&cfg, 0, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clips.scv");
        write_dataset(&samples, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad_magic = dir.path().join("bad_magic.scv");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&bad_magic, &b).unwrap();
        assert!(matches!(
            read_dataset(&bad_magic),
            Err(Error::BadMagic { .. })
        ));

        let bad_version = dir.path().join("bad_version.scv");
        let mut b = bytes.clone();
        b[3] = b'9';
        std::fs::write(&bad_version, &b).unwrap();
        assert!(matches!(
            read_dataset(&bad_version),
            Err(Error::VersionMismatch { .. })
        ));

        let cut = dir.path().join("cut.scv");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_dataset(&cut), Err(Error::Truncated { .. })));
    }
}
