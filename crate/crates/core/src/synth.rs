//! Procedural clips of one textured sprite over a smooth noisy background.
//!
//! Direction clips carry their class only in the sprite's motion: the
//! sprite's position in the final frame is drawn from the same distribution
//! for every class, so the final frame alone says nothing about the label.
//! Appearance clips are single static frames labelled by sprite shape.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{seeded, seeded_stream};
use crate::tensor::Tensor;

pub const CLIP_MAGIC: &[u8; 4] = b"AMFC";
pub const DEFAULT_NOISE: f64 = 0.05;
const BACKGROUND_LEVEL: f64 = 0.2;
const BACKGROUND_WAVE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpriteShape {
    Square,
    Cross,
    Stripe,
    Disc,
}

impl SpriteShape {
    pub const ALL: [SpriteShape; 4] = [Self::Square, Self::Cross, Self::Stripe, Self::Disc];

    /// Whether pixel `(x, y)` of a `size×size` sprite is covered.
    pub fn covers(self, x: usize, y: usize, size: usize) -> bool {
        let band = (size / 3).max(1);
        let lo = (size - band) / 2;
        match self {
            Self::Square => true,
            Self::Cross => (lo..lo + band).contains(&x) || (lo..lo + band).contains(&y),
            Self::Stripe => y % 4 < 2,
            Self::Disc => {
                let c = (size as f64 - 1.0) / 2.0;
                let (dx, dy) = (x as f64 - c, y as f64 - c);
                dx * dx + dy * dy <= (size as f64 / 2.0).powi(2)
            }
        }
    }
}

/// Everything needed to render one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSpec {
    pub frames: usize,
    pub image_px: usize,
    pub channels: usize,
    pub patch_px: usize,
    pub sprite_px: usize,
    pub shape: SpriteShape,
    pub texture_seed: u64,
    /// Top-left sprite corner in frame 0.
    pub start: (i64, i64),
    /// Pixels per frame.
    pub velocity: (i64, i64),
    pub noise: f64,
    /// Maximum global camera shift per frame, in pixels.
    pub jitter: usize,
    pub label: usize,
}

impl ClipSpec {
    /// Sprite corner in frame `t`, before camera shift.
    pub fn position(&self, t: usize) -> (i64, i64) {
        (
            self.start.0 + self.velocity.0 * t as i64,
            self.start.1 + self.velocity.1 * t as i64,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.image_px == 0 || self.channels == 0 || self.patch_px == 0 {
            return Err(Error::Validation("clip extents must be positive".into()));
        }
        if self.image_px % self.patch_px != 0 {
            return Err(Error::Validation(format!(
                "image_px {} is not a multiple of patch_px {}",
                self.image_px, self.patch_px
            )));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Validation(format!("noise amplitude {} outside [0, 1)", self.noise)));
        }
        let j = self.jitter as i64;
        let max = self.image_px as i64 - self.sprite_px as i64 - j;
        for t in 0..self.frames {
            let (x, y) = self.position(t);
            if x < j || y < j || x > max || y > max {
                return Err(Error::Validation(format!(
                    "sprite at ({x}, {y}) in frame {t} leaves the {}px image (jitter {})",
                    self.image_px, self.jitter
                )));
            }
        }
        Ok(())
    }
}

/// A clip: `T` frames of `C×H×W` pixels and a category label.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: Vec<Tensor>,
    pub label: usize,
}

impl Clip {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.frames.first().map(|f| f.shape().to_vec()).unwrap_or_else(|| vec![0, 0, 0]);
        (self.frames.len(), s[0], s[1], s[2])
    }

    /// Copy with frames reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Clip {
        Clip {
            frames: order.iter().map(|&i| self.frames[i].clone()).collect(),
            label: self.label,
        }
    }
}

/// Per frame pair, the patches in which some pixel changed by more than
/// the threshold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionMask {
    pub pairs: Vec<BTreeSet<usize>>,
}

/// Pixel-change threshold for a noise amplitude.
pub fn mask_threshold(noise: f64) -> f64 {
    3.0 * noise
}

/// Patches of `grid×grid` whose pixels differ between two `C×H×W` frames
/// by more than `threshold` anywhere.
pub fn changed_patches(a: &Tensor, b: &Tensor, patch_px: usize, threshold: f64) -> BTreeSet<usize> {
    let s = a.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let grid = w / patch_px;
    let mut out = BTreeSet::new();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = (ch * h + y) * w + x;
                if (a.data()[i] - b.data()[i]).abs() > threshold {
                    out.insert((y / patch_px) * grid + x / patch_px);
                }
            }
        }
    }
    out
}

fn background(x: f64, y: f64, waves: &[(f64, f64, f64)]) -> f64 {
    let s: f64 = waves.iter().map(|(a, b, p)| (a * x + b * y + p).sin()).sum();
    BACKGROUND_LEVEL + BACKGROUND_WAVE * 0.5 * (1.0 + s / waves.len() as f64)
}

/// Renders a clip and its motion mask. Pixel values are rounded to `f32`
/// so the clip survives the clip file format bit-for-bit.
pub fn render_clip(spec: &ClipSpec, seed: u64) -> Result<(Clip, MotionMask)> {
    spec.validate()?;
    let mut tex_rng = seeded(spec.texture_seed);
    let size = spec.sprite_px;
    let texture: Vec<f64> = (0..size * size).map(|_| tex_rng.gen_range(0.5..1.0)).collect();
    let tint: Vec<f64> = (0..spec.channels).map(|_| tex_rng.gen_range(0.8..1.0)).collect();
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                tex_rng.gen_range(-0.4..0.4),
                tex_rng.gen_range(-0.4..0.4),
                tex_rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();

    let mut rng = seeded(seed);
    let j = spec.jitter as i64;
    let n = spec.image_px;
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let (ox, oy) = if j > 0 {
            (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
        } else {
            (0, 0)
        };
        let (sx, sy) = spec.position(t);
        let (sx, sy) = (sx + ox, sy + oy);
        let mut data = vec![0.0; spec.channels * n * n];
        for ch in 0..spec.channels {
            for y in 0..n {
                for x in 0..n {
                    // the background lives in world coordinates and moves with the camera
                    let world = background((x as i64 - ox) as f64, (y as i64 - oy) as f64, &waves);
                    let (px, py) = (x as i64 - sx, y as i64 - sy);
                    let inside = px >= 0 && py >= 0 && (px as usize) < size && (py as usize) < size;
                    let clean = if inside && spec.shape.covers(px as usize, py as usize, size) {
                        texture[py as usize * size + px as usize] * tint[ch]
                    } else {
                        world
                    };
                    let noise = if spec.noise > 0.0 {
                        rng.gen_range(-spec.noise..spec.noise)
                    } else {
                        0.0
                    };
                    data[(ch * n + y) * n + x] = (clean + noise) as f32 as f64;
                }
            }
        }
        frames.push(Tensor::new(vec![spec.channels, n, n], data)?);
    }
    let threshold = mask_threshold(spec.noise);
    let pairs = frames
        .windows(2)
        .map(|w| changed_patches(&w[0], &w[1], spec.patch_px, threshold))
        .collect();
    Ok((
        Clip {
            frames,
            label: spec.label,
        },
        MotionMask { pairs },
    ))
}

/// Geometry and noise shared by all clips of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    pub image_px: usize,
    pub channels: usize,
    pub patch_px: usize,
    pub noise: f64,
    pub jitter: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            image_px: 32,
            channels: 3,
            patch_px: 8,
            noise: DEFAULT_NOISE,
            jitter: 0,
        }
    }
}

impl SynthConfig {
    /// Sprite side: one and a half patches.
    pub fn sprite_px(&self) -> usize {
        self.patch_px * 3 / 2
    }

    /// Direction speed: half a patch per frame, reduced until a trajectory
    /// in every direction fits around a shared final-frame position range.
    pub fn speed(&self) -> usize {
        let room = self.image_px.saturating_sub(self.sprite_px() + 2 * self.jitter);
        let steps = 2 * self.frames.saturating_sub(1).max(1);
        (self.patch_px / 2).min(room / steps).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 1 || self.channels == 0 || self.patch_px < 2 || self.image_px % self.patch_px != 0 {
            return Err(Error::Validation(format!("invalid synthetic geometry {self:?}")));
        }
        let travel = self.speed() * (self.frames - 1);
        if self.sprite_px() + 2 * self.jitter + 2 * travel > self.image_px {
            return Err(Error::Validation(format!(
                "{}px image too small for a {}px sprite moving {travel}px with jitter {}",
                self.image_px,
                self.sprite_px(),
                self.jitter
            )));
        }
        Ok(())
    }
}

/// The four direction classes: right, left, down, up.
pub fn direction_velocity(label: usize, v: i64) -> (i64, i64) {
    match label {
        0 => (v, 0),
        1 => (-v, 0),
        2 => (0, v),
        _ => (0, -v),
    }
}

pub const DIRECTION_CLASSES: usize = 4;
pub const APPEARANCE_CLASSES: usize = 4;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
    pub categories: usize,
}

impl Dataset {
    pub fn all(&self) -> impl Iterator<Item = &Clip> {
        self.train.iter().chain(&self.val)
    }
}

/// Splits each class 80/20 in generation order.
fn split(per_class: Vec<Vec<Clip>>, categories: usize) -> Dataset {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for clips in per_class {
        let n_train = (clips.len() * 4).div_ceil(5);
        for (i, c) in clips.into_iter().enumerate() {
            if i < n_train {
                train.push(c);
            } else {
                val.push(c);
            }
        }
    }
    Dataset { train, val, categories }
}

/// Render parameters of one direction clip. The final-frame sprite corner is uniform
/// over a box shared by all classes.
pub fn direction_spec<R: Rng + ?Sized>(config: &SynthConfig, label: usize, rng: &mut R) -> ClipSpec {
    let v = config.speed() as i64;
    let travel = v * (config.frames as i64 - 1);
    let j = config.jitter as i64;
    let lo = j + travel;
    let hi = config.image_px as i64 - config.sprite_px() as i64 - j - travel;
    let end = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
    let velocity = direction_velocity(label, v);
    ClipSpec {
        frames: config.frames,
        image_px: config.image_px,
        channels: config.channels,
        patch_px: config.patch_px,
        sprite_px: config.sprite_px(),
        shape: *SpriteShape::ALL.choose(rng).expect("nonempty"),
        texture_seed: rng.gen(),
        start: (end.0 - velocity.0 * (config.frames as i64 - 1), end.1 - velocity.1 * (config.frames as i64 - 1)),
        velocity,
        noise: config.noise,
        jitter: config.jitter,
        label,
    }
}

/// `4·n_per_class` direction clips, split 80/20 per class.
pub fn make_direction_dataset(n_per_class: usize, seed: u64, config: &SynthConfig) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Validation("n must be at least 1 clip per class".into()));
    }
    config.validate()?;
    let mut per_class = Vec::with_capacity(DIRECTION_CLASSES);
    for label in 0..DIRECTION_CLASSES {
        let mut rng = seeded_stream(seed, label as u64);
        let mut clips = Vec::with_capacity(n_per_class);
        for _ in 0..n_per_class {
            let spec = direction_spec(config, label, &mut rng);
            clips.push(render_clip(&spec, rng.gen())?.0);
        }
        per_class.push(clips);
    }
    Ok(split(per_class, DIRECTION_CLASSES))
}

/// `4·n_per_class` single static frames labelled by sprite shape, split
/// 80/20 per class.
pub fn make_appearance_dataset(n_per_class: usize, seed: u64, config: &SynthConfig) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Validation("n must be at least 1 clip per class".into()));
    }
    config.validate()?;
    let mut per_class = Vec::with_capacity(APPEARANCE_CLASSES);
    let j = config.jitter as i64;
    let hi = config.image_px as i64 - config.sprite_px() as i64 - j;
    for (label, shape) in SpriteShape::ALL.iter().enumerate() {
        let mut rng = seeded_stream(seed, 100 + label as u64);
        let mut clips = Vec::with_capacity(n_per_class);
        for _ in 0..n_per_class {
            let spec = ClipSpec {
                frames: 1,
                image_px: config.image_px,
                channels: config.channels,
                patch_px: config.patch_px,
                sprite_px: config.sprite_px(),
                shape: *shape,
                texture_seed: rng.gen(),
                start: (rng.gen_range(j..=hi), rng.gen_range(j..=hi)),
                velocity: (0, 0),
                noise: config.noise,
                jitter: 0,
                label,
            };
            clips.push(render_clip(&spec, rng.gen())?.0);
        }
        per_class.push(clips);
    }
    Ok(split(per_class, APPEARANCE_CLASSES))
}

pub fn clip_to_bytes(clip: &Clip) -> Result<Vec<u8>> {
    let (t, c, h, w) = clip.dims();
    if clip.frames.iter().any(|f| f.shape() != [c, h, w]) {
        return Err(Error::Validation("clip frames differ in shape".into()));
    }
    let mut out = Vec::with_capacity(24 + t * c * h * w * 4);
    out.extend_from_slice(CLIP_MAGIC);
    for v in [t, c, h, w, clip.label] {
        let v = u32::try_from(v).map_err(|_| Error::Validation(format!("clip extent {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in &clip.frames {
        for v in f.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn clip_from_bytes(bytes: &[u8], path: &Path) -> Result<Clip> {
    if bytes.len() < 4 || &bytes[..4] != CLIP_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "AMFC",
        });
    }
    let truncated = |detail: String| Error::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 24 {
        return Err(truncated(format!("header needs 24 bytes, file has {}", bytes.len())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (t, c, h, w, label) = (word(0), word(1), word(2), word(3), word(4));
    let per_frame = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| truncated("header extents overflow".into()))?;
    let expected = t
        .checked_mul(per_frame)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| truncated("header extents overflow".into()))?;
    let payload = &bytes[24..];
    if payload.len() != expected {
        return Err(truncated(format!(
            "header {t}×{c}×{h}×{w} needs {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    let frames = values
        .chunks(per_frame.max(1))
        .take(t)
        .map(|chunk| Tensor::new(vec![c, h, w], chunk.to_vec()))
        .collect::<Result<_>>()?;
    Ok(Clip { frames, label })
}

pub fn save_clip(path: &Path, clip: &Clip) -> Result<()> {
    std::fs::write(path, clip_to_bytes(clip)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_clip(path: &Path) -> Result<Clip> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    clip_from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(velocity: (i64, i64), noise: f64) -> ClipSpec {
        ClipSpec {
            frames: 3,
            image_px: 32,
            channels: 3,
            patch_px: 8,
            sprite_px: 12,
            shape: SpriteShape::Square,
            texture_seed: 7,
            start: (2, 10),
            velocity,
            noise,
            jitter: 0,
            label: 0,
        }
    }

    #[test]
    fn static_clip_has_identical_frames_and_empty_mask() {
        let (clip, mask) = render_clip(&spec((0, 0), 0.0), 1).unwrap();
        assert!(clip.frames.windows(2).all(|w| w[0] == w[1]));
        assert!(mask.pairs.iter().all(|p| p.is_empty()));
    }

    #[test]
    fn patch_step_mask_covers_vacated_and_entered_columns() {
        // sprite spans x in [2, 14) then [10, 22): columns 0,1 then 1,2; rows 1,2
        let (_, mask) = render_clip(&spec((8, 0), 0.0), 1).unwrap();
        let expected: BTreeSet<usize> = [4, 5, 6, 8, 9, 10].into_iter().collect();
        assert_eq!(mask.pairs[0], expected);
    }

    #[test]
    fn rendering_is_deterministic_and_bounds_checked() {
        let s = spec((1, 0), 0.05);
        assert_eq!(render_clip(&s, 4).unwrap(), render_clip(&s, 4).unwrap());
        assert_ne!(render_clip(&s, 4).unwrap().0, render_clip(&s, 5).unwrap().0);
        let out = ClipSpec {
            start: (25, 10),
            ..spec((1, 0), 0.0)
        };
        assert!(matches!(render_clip(&out, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn mask_matches_brute_force() {
        let s = spec((1, 1), 0.05);
        let (clip, mask) = render_clip(&s, 9).unwrap();
        for (i, pair) in mask.pairs.iter().enumerate() {
            let mut brute = BTreeSet::new();
            for p in 0..16 {
                let (py, px) = (p / 4, p % 4);
                'patch: for ch in 0..3 {
                    for y in py * 8..py * 8 + 8 {
                        for x in px * 8..px * 8 + 8 {
                            let a = clip.frames[i].data()[(ch * 32 + y) * 32 + x];
                            let b = clip.frames[i + 1].data()[(ch * 32 + y) * 32 + x];
                            if (a - b).abs() > 0.15 {
                                brute.insert(p);
                                break 'patch;
                            }
                        }
                    }
                }
            }
            assert_eq!(pair, &brute);
            assert!(!pair.is_empty());
        }
    }

    #[test]
    fn direction_dataset_counts_and_split() {
        let d = make_direction_dataset(5, 3, &SynthConfig::default()).unwrap();
        assert_eq!(d.train.len(), 16);
        assert_eq!(d.val.len(), 4);
        for k in 0..4 {
            assert_eq!(d.all().filter(|c| c.label == k).count(), 5);
            assert_eq!(d.val.iter().filter(|c| c.label == k).count(), 1);
        }
        assert!(matches!(make_direction_dataset(0, 3, &SynthConfig::default()), Err(Error::Validation(_))));
        let again = make_direction_dataset(5, 3, &SynthConfig::default()).unwrap();
        assert_eq!(d.train, again.train);
    }

    #[test]
    fn speed_keeps_shared_final_range() {
        let c = SynthConfig::default();
        assert_eq!(c.sprite_px(), 12);
        assert_eq!(c.speed(), 1);
        let jittered = SynthConfig { jitter: 2, ..c.clone() };
        assert_eq!(jittered.speed(), 1);
        let short = SynthConfig { frames: 3, ..c };
        assert_eq!(short.speed(), 4);
    }

    #[test]
    fn appearance_dataset_is_static_and_balanced() {
        let d = make_appearance_dataset(5, 1, &SynthConfig::default()).unwrap();
        assert_eq!(d.train.len() + d.val.len(), 20);
        for c in d.all() {
            assert_eq!(c.frames.len(), 1);
        }
    }

    #[test]
    fn clip_file_round_trip_and_errors() {
        let (clip, _) = render_clip(&spec((1, 0), 0.05), 2).unwrap();
        let bytes = clip_to_bytes(&clip).unwrap();
        assert_eq!(clip_from_bytes(&bytes, Path::new("x")).unwrap(), clip);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(clip_from_bytes(&bad, Path::new("x")), Err(Error::BadMagic { .. })));
        assert!(matches!(clip_from_bytes(&bytes[..bytes.len() - 1], Path::new("x")), Err(Error::Truncated { .. })));
        let mut wrong_header = bytes;
        wrong_header[4] = 9;
        assert!(matches!(clip_from_bytes(&wrong_header, Path::new("x")), Err(Error::Truncated { .. })));
    }
}
