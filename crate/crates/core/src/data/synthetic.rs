//! Seeded stand-in for a frozen vision-language backbone: bouncing disks
//! rendered into multi-scale feature maps, with text features naming the
//! target disk and its direction of motion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BinaryMask, FeatureClip, ObjectTrack, ScaleFeatures};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Salt for the fixed identity codebooks; independent of the clip seed so the
/// same object index looks the same in every clip.
const CODEBOOK_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub frames: usize,
    /// Ground-truth mask resolution.
    pub height: usize,
    pub width: usize,
    /// Per-scale `(height, width)`, finest first.
    pub scales: Vec<(usize, usize)>,
    pub channels: usize,
    pub text_channels: usize,
    pub text_tokens: usize,
    pub objects: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Upper bound on per-frame speed in mask pixels.
    pub max_speed: f64,
    /// Standard deviation of additive feature noise.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            frames: 8,
            height: 64,
            width: 64,
            scales: vec![(16, 16), (8, 8), (4, 4)],
            channels: 64,
            text_channels: 64,
            text_tokens: 4,
            objects: 3,
            min_radius: 7.0,
            max_radius: 12.0,
            max_speed: 3.0,
            noise: 0.05,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.objects == 0 {
            return bad("at least one object required");
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return bad("frames and mask size must be positive");
        }
        if self.channels == 0 || self.text_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.text_tokens < 2 {
            return bad("text_tokens must be >= 2 (target and motion tokens)");
        }
        if self.scales.is_empty() {
            return bad("at least one scale required");
        }
        for (l, &(h, w)) in self.scales.iter().enumerate() {
            if h == 0 || w == 0 || self.height % h != 0 || self.width % w != 0 {
                return bad(&format!(
                    "scale {l} ({h}x{w}) must evenly divide the mask size"
                ));
            }
            if l > 0 {
                let (ph, pw) = self.scales[l - 1];
                if h > ph || w > pw || h * w >= ph * pw {
                    return bad(&format!("scale {l} must be smaller than scale {}", l - 1));
                }
            }
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return bad("radii must satisfy 0 < min_radius <= max_radius");
        }
        if 2.0 * self.max_radius >= self.height.min(self.width) as f64 {
            return bad("disks must fit inside the frame");
        }
        if !(self.max_speed >= 0.0 && self.noise >= 0.0) {
            return bad("max_speed and noise must be non-negative");
        }
        Ok(())
    }
}

fn codebook(kind: u64, index: usize, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        CODEBOOK_SALT ^ (kind << 48) ^ ((index as u64) << 16) ^ dim as u64,
    );
    (0..dim)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// Rasterizes a disk: pixel `(r, c)` is inside when its center lies within
/// `radius` of `(cx, cy)`.
pub(crate) fn disk_mask(height: usize, width: usize, cx: f64, cy: f64, radius: f64) -> BinaryMask {
    BinaryMask::from_fn(height, width, |r, c| {
        let dx = c as f64 + 0.5 - cx;
        let dy = r as f64 + 0.5 - cy;
        dx * dx + dy * dy <= radius * radius
    })
}

/// Reflects a coordinate into `[lo, hi]`.
fn bounce(mut p: f64, mut v: f64, lo: f64, hi: f64) -> (f64, f64) {
    if hi <= lo {
        return (lo, 0.0);
    }
    for _ in 0..8 {
        if p < lo {
            p = 2.0 * lo - p;
            v = -v;
        } else if p > hi {
            p = 2.0 * hi - p;
            v = -v;
        } else {
            break;
        }
    }
    (p.clamp(lo, hi), v)
}

fn direction(vx: f64, vy: f64) -> (usize, &'static str) {
    if vx.abs() < 1e-9 && vy.abs() < 1e-9 {
        (0, "still")
    } else if vx.abs() >= vy.abs() {
        if vx < 0.0 {
            (1, "left")
        } else {
            (2, "right")
        }
    } else if vy < 0.0 {
        (3, "up")
    } else {
        (4, "down")
    }
}

/// Area fraction of `mask` covered inside every cell of an `h × w` grid.
fn cell_occupancy(mask: &BinaryMask, h: usize, w: usize) -> Vec<f32> {
    let (sy, sx) = (mask.height() / h, mask.width() / w);
    let inv = 1.0 / (sy * sx) as f32;
    let mut out = vec![0.0f32; h * w];
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(r, c) {
                out[(r / sy) * w + c / sx] += inv;
            }
        }
    }
    out
}

/// Generates one clip. Bit-identical for equal specs.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureClip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (hf, wf) = (spec.height as f64, spec.width as f64);

    let mut objects = Vec::with_capacity(spec.objects);
    let mut velocities = Vec::with_capacity(spec.objects);
    for id in 0..spec.objects {
        let radius = rng.gen_range(spec.min_radius..=spec.max_radius);
        let mut x = rng.gen_range(radius..=wf - radius);
        let mut y = rng.gen_range(radius..=hf - radius);
        let speed = rng.gen_range(0.0..=spec.max_speed);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let (mut vx, mut vy) = (speed * angle.cos(), speed * angle.sin());
        velocities.push((vx, vy));
        let mut masks = Vec::with_capacity(spec.frames);
        for _ in 0..spec.frames {
            masks.push(disk_mask(spec.height, spec.width, x, y, radius));
            (x, vx) = bounce(x + vx, vx, radius, wf - radius);
            (y, vy) = bounce(y + vy, vy, radius, hf - radius);
        }
        objects.push(ObjectTrack { id, masks });
    }
    let target = rng.gen_range(0..spec.objects);

    let mut scales = Vec::with_capacity(spec.scales.len());
    for (l, &(h, w)) in spec.scales.iter().enumerate() {
        let c = spec.channels;
        let background = codebook(1, l, c);
        let signatures: Vec<Vec<f32>> = (0..spec.objects)
            .map(|i| codebook(2 + l as u64, i, c))
            .collect();
        let mut data = Vec::with_capacity(spec.frames * h * w * c);
        for t in 0..spec.frames {
            let occ: Vec<Vec<f32>> = objects
                .iter()
                .map(|o| cell_occupancy(&o.masks[t], h, w))
                .collect();
            for cell in 0..h * w {
                for ch in 0..c {
                    let mut v = 0.25 * background[ch];
                    for (o, sig) in occ.iter().zip(&signatures) {
                        v += o[cell] * sig[ch];
                    }
                    let n: f64 = rng.sample(StandardNormal);
                    data.push(v + (spec.noise * n) as f32);
                }
            }
        }
        scales.push(ScaleFeatures {
            height: h,
            width: w,
            channels: c,
            data,
        });
    }

    let (dir_index, dir_name) = direction(velocities[target].0, velocities[target].1);
    let ct = spec.text_channels;
    let mut tokens = Vec::with_capacity(spec.text_tokens * ct);
    tokens.extend(codebook(100, target, ct));
    tokens.extend(codebook(101, dir_index, ct));
    for k in 2..spec.text_tokens {
        tokens.extend(codebook(102, k, ct));
    }
    let text_tokens = Tensor::new([spec.text_tokens, ct], tokens)?;
    let sentence: Vec<f32> = (0..ct)
        .map(|j| {
            (0..spec.text_tokens)
                .map(|i| text_tokens.row(i)[j])
                .sum::<f32>()
                / spec.text_tokens as f32
        })
        .collect();

    let clip = FeatureClip {
        clip_id: format!("synth-{:06}", spec.seed),
        expression: format!("object {target} moving {dir_name}"),
        frames: spec.frames,
        scales,
        text_tokens,
        text_sentence: sentence,
        mask_height: spec.height,
        mask_width: spec.width,
        objects,
        target_ids: vec![target],
        resize: None,
    };
    clip.validate()?;
    Ok(clip)
}
