//! Procedural depth scenes.
//!
//! A pinhole camera looks down `+z` over a ground plane towards a back wall
//! at the maximum depth. Between three and six objects (spheres resting on
//! the ground and small tilted rectangles facing the camera) are scattered
//! in front of it. Shading is Lambertian, falls off with inverse depth and
//! carries per-object albedo and a faint stripe texture, so brightness,
//! occlusion and ground-contact height all hint at depth.

use alloc::vec;
use alloc::vec::Vec;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const MIN_SCENE_DEPTH: f64 = 0.5;
pub const MAX_SCENE_DEPTH: f64 = 10.0;
/// Fraction of pixels marked invalid to exercise masking.
pub const INVALID_FRACTION: f64 = 0.05;

/// RGB image in `[0, 1]`, metric depth and validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSample {
    pub image: Tensor,
    pub depth: Tensor,
    pub valid: Vec<bool>,
}

impl DepthSample {
    pub fn new(image: Tensor, depth: Tensor, valid: Vec<bool>) -> Result<Self> {
        let [h, w] = *depth.extents() else {
            return Err(shape_err!("depth must be H×W, got {:?}", depth.extents()));
        };
        if image.extents() != [h, w, 3] || valid.len() != h * w {
            return Err(shape_err!("image {:?} and mask of {} do not match depth {h}×{w}", image.extents(), valid.len()));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::Contract("sample has no valid pixel".into()));
        }
        if let Some(i) = (0..h * w).find(|&i| valid[i] && !(depth.data()[i] > 0.0)) {
            return Err(Error::Domain(alloc::format!("valid pixel {i} has nonpositive depth")));
        }
        Ok(DepthSample { image, depth, valid })
    }

    pub fn height(&self) -> usize {
        self.depth.extents()[0]
    }

    pub fn width(&self) -> usize {
        self.depth.extents()[1]
    }

    /// Ground truth reduced by `factor`: depth averaged over each block, a
    /// block valid only when all of its pixels are.
    pub fn downsample(&self, factor: usize) -> Result<(Tensor, Vec<bool>)> {
        let (h, w) = (self.height(), self.width());
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(shape_err!("cannot reduce {h}×{w} by {factor}"));
        }
        let (oh, ow) = (h / factor, w / factor);
        let mut depth = vec![0.0; oh * ow];
        let mut valid = vec![true; oh * ow];
        for y in 0..h {
            for x in 0..w {
                let o = (y / factor) * ow + x / factor;
                depth[o] += self.depth.data()[y * w + x];
                valid[o] &= self.valid[y * w + x];
            }
        }
        let area = (factor * factor) as f64;
        depth.iter_mut().for_each(|d| *d /= area);
        Ok((Tensor::new(&[oh, ow], depth)?, valid))
    }
}

/// Nearest-neighbour enlargement of an `h×w` map by an integer factor.
pub fn upsample_depth(depth: &Tensor, factor: usize) -> Tensor {
    let [h, w] = *depth.extents() else { panic!("depth must be H×W") };
    let (oh, ow) = (h * factor, w * factor);
    Tensor::from_fn(&[oh, ow], |i| depth.data()[(i / ow / factor) * w + (i % ow) / factor])
}

type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: Vec3) -> Vec3 {
    let n = libm::sqrt(dot(v, v));
    [v[0] / n, v[1] / n, v[2] / n]
}

enum Shape {
    Sphere { center: Vec3, radius: f64 },
    /// Rectangle on the plane `z = cz + tx·(x − cx) + ty·(y − cy)`.
    Panel { center: Vec3, half: [f64; 2], tilt: [f64; 2] },
}

struct Object {
    shape: Shape,
    albedo: Vec3,
    stripe: f64,
}

struct Hit {
    depth: f64,
    normal: Vec3,
    albedo: Vec3,
    texture: f64,
}

impl Object {
    fn intersect(&self, d: Vec3) -> Option<Hit> {
        match self.shape {
            Shape::Sphere { center, radius } => {
                // |t·d − c|² = r²
                let a = dot(d, d);
                let b = -2.0 * dot(d, center);
                let c = dot(center, center) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - libm::sqrt(disc)) / (2.0 * a);
                (t > 0.0).then(|| {
                    let p = [t * d[0], t * d[1], t * d[2]];
                    let normal = normalize([p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
                    Hit { depth: p[2], normal, albedo: self.albedo, texture: libm::sin(self.stripe * (p[0] + p[1])) }
                })
            }
            Shape::Panel { center, half, tilt } => {
                let n = [-tilt[0], -tilt[1], 1.0];
                let rhs = center[2] - tilt[0] * center[0] - tilt[1] * center[1];
                let denom = dot(n, d);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = rhs / denom;
                let p = [t * d[0], t * d[1], t * d[2]];
                let inside = (p[0] - center[0]).abs() < half[0] && (p[1] - center[1]).abs() < half[1];
                (t > 0.0 && inside).then(|| Hit {
                    depth: p[2],
                    normal: normalize([tilt[0], tilt[1], -1.0]),
                    albedo: self.albedo,
                    texture: libm::sin(self.stripe * (p[0] - center[0])),
                })
            }
        }
    }
}

fn random_albedo(rng: &mut ChaCha8Rng) -> Vec3 {
    [rng.random_range(0.45..1.0), rng.random_range(0.45..1.0), rng.random_range(0.45..1.0)]
}

/// Deterministic procedural scene of `height × width` pixels (multiples
/// of 32).
pub fn synth_scene(seed: u64, height: usize, width: usize) -> Result<DepthSample> {
    if height == 0 || width == 0 || !height.is_multiple_of(32) || !width.is_multiple_of(32) {
        return Err(shape_err!("scene extents {height}×{width} must be positive multiples of 32"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let focal = 0.9 * width as f64;
    let camera_height = rng.random_range(1.0..1.8);
    let ground_albedo = random_albedo(&mut rng);
    let wall_albedo = random_albedo(&mut rng);
    let ground_stripe = rng.random_range(2.0..5.0);

    let count = rng.random_range(3..=6usize);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let z = rng.random_range(1.5..8.0);
        let spread = 0.45 * z * width as f64 / focal;
        let x = rng.random_range(-spread..spread);
        let albedo = random_albedo(&mut rng);
        let stripe = rng.random_range(3.0..9.0);
        let shape = if rng.random_bool(0.5) {
            let radius = rng.random_range(0.3..1.1);
            Shape::Sphere { center: [x, -camera_height + radius, z], radius }
        } else {
            let half = [rng.random_range(0.3..1.2), rng.random_range(0.3..1.0)];
            let lift = rng.random_range(0.0..1.0);
            Shape::Panel {
                center: [x, -camera_height + half[1] + lift, z],
                half,
                tilt: [rng.random_range(-0.6..0.6), rng.random_range(-0.4..0.4)],
            }
        };
        objects.push(Object { shape, albedo, stripe });
    }

    let light = normalize([0.3, 0.8, -0.5]);
    let mut image = vec![0.0; height * width * 3];
    let mut depth = vec![0.0; height * width];
    let mut valid = vec![true; height * width];
    for v in 0..height {
        for u in 0..width {
            let d = [
                (u as f64 + 0.5 - width as f64 / 2.0) / focal,
                -(v as f64 + 0.5 - height as f64 / 2.0) / focal,
                1.0,
            ];
            let mut hit = Hit { depth: MAX_SCENE_DEPTH, normal: [0.0, 0.0, -1.0], albedo: wall_albedo, texture: 0.0 };
            if d[1] < 0.0 {
                let t = camera_height / -d[1];
                if t < hit.depth {
                    hit = Hit {
                        depth: t,
                        normal: [0.0, 1.0, 0.0],
                        albedo: ground_albedo,
                        texture: libm::sin(ground_stripe * t * d[0]) * libm::cos(ground_stripe * t),
                    };
                }
            }
            for o in &objects {
                if let Some(h) = o.intersect(d) {
                    if h.depth > 0.0 && h.depth < hit.depth {
                        hit = h;
                    }
                }
            }
            let z = hit.depth.clamp(MIN_SCENE_DEPTH, MAX_SCENE_DEPTH);
            let lambert = 0.35 + 0.65 * dot(hit.normal, light).max(0.0);
            let falloff = (1.5 / z).min(1.0);
            let i = v * width + u;
            for c in 0..3 {
                let value = hit.albedo[c] * lambert * falloff + 0.04 * hit.texture;
                image[i * 3 + c] = value.clamp(0.0, 1.0);
            }
            depth[i] = z;
            valid[i] = !rng.random_bool(INVALID_FRACTION);
        }
    }
    if !valid.iter().any(|&b| b) {
        valid[0] = true;
    }
    DepthSample::new(Tensor::new(&[height, width, 3], image)?, Tensor::new(&[height, width], depth)?, valid)
}

/// Seed of sample `index` in a dataset with base seed `seed` (splitmix64).
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sizes and seed of a synthetic train/validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub train_samples: usize,
    pub val_samples: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { train_samples: 200, val_samples: 50, height: 64, width: 64, seed: 0 }
    }
}

impl DatasetSpec {
    /// Training scenes, then validation scenes.
    pub fn generate(&self) -> Result<(Vec<DepthSample>, Vec<DepthSample>)> {
        let make = |range: core::ops::Range<usize>| -> Result<Vec<DepthSample>> {
            range.map(|i| synth_scene(sample_seed(self.seed, i as u64), self.height, self.width)).collect()
        };
        let train = make(0..self.train_samples)?;
        let val = make(self.train_samples..self.train_samples + self.val_samples)?;
        Ok((train, val))
    }
}
