//! Synthetic scenes of possibly overlapping objects with their instance masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

/// Shape family of generated objects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    /// Rotated filled ellipses; `axis_range` bounds the semi-axes.
    Ellipse,
    /// Thick random curves; `axis_range` bounds the half-length.
    Worm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub object_count_range: [usize; 2],
    pub shape_kind: ShapeKind,
    pub axis_range: [f64; 2],
    pub overlap_probability: f64,
    /// Bound on pairwise overlap as a fraction of the smaller object's area.
    pub max_overlap_fraction: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            object_count_range: [3, 7],
            shape_kind: ShapeKind::Ellipse,
            axis_range: [6.0, 11.0],
            overlap_probability: 0.5,
            max_overlap_fraction: 0.3,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene spec: {m}")));
        if self.height == 0 || self.width == 0 {
            return bad("empty image size");
        }
        if self.object_count_range[0] > self.object_count_range[1] {
            return bad("object_count_range min > max");
        }
        if !(self.axis_range[0] > 0.0 && self.axis_range[0] <= self.axis_range[1]) {
            return bad("axis_range must satisfy 0 < min <= max");
        }
        if !(0.0..=1.0).contains(&self.overlap_probability) {
            return bad("overlap_probability outside [0, 1]");
        }
        if !(0.0..1.0).contains(&self.max_overlap_fraction) {
            return bad("max_overlap_fraction outside [0, 1)");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// An intensity image with its (possibly overlapping) instance masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[H, W]` intensities in `[0, 1]`.
    pub image: Tensor<f32>,
    pub instances: Vec<Mask>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Output of [`generate_scene`].
#[derive(Clone, Debug)]
pub struct Generated {
    pub scene: Scene,
    pub requested: usize,
    /// Set when some objects could not be placed within the retry budget.
    pub truncated: bool,
}

const PLACEMENT_RETRIES: usize = 200;
const MIN_OBJECT_PIXELS: usize = 12;
/// Every object keeps at least this fraction of its area overlap-free.
const MIN_FREE_FRACTION: f64 = 0.5;
const RENDER_SEED_SALT: u64 = 0x5eed_1a7e_d00d_f00d;

fn rasterize_ellipse(h: usize, w: usize, cy: f64, cx: f64, a: f64, b: f64, theta: f64) -> Mask {
    let (s, c) = theta.sin_cos();
    Mask::from_fn(h, w, |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let u = (dx * c + dy * s) / a;
        let v = (-dx * s + dy * c) / b;
        u * u + v * v <= 1.0
    })
}

fn rasterize_worm(h: usize, w: usize, points: &[(f64, f64)], radius: f64) -> Mask {
    let r2 = radius * radius;
    Mask::from_fn(h, w, |y, x| {
        points.iter().any(|&(py, px)| {
            let (dy, dx) = (y as f64 - py, x as f64 - px);
            dy * dy + dx * dx <= r2
        })
    })
}

fn sample_shape(spec: &SceneSpec, rng: &mut ChaCha8Rng, center: (f64, f64)) -> Mask {
    let (h, w) = (spec.height, spec.width);
    let [lo, hi] = spec.axis_range;
    match spec.shape_kind {
        ShapeKind::Ellipse => {
            let a = rng.random_range(lo..=hi);
            let b = rng.random_range(lo..=hi);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            rasterize_ellipse(h, w, center.0, center.1, a, b, theta)
        }
        ShapeKind::Worm => {
            let half = rng.random_range(lo..=hi);
            let radius = (half / 4.0).max(1.5);
            let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
            let bend = Normal::new(0.0, 0.2).expect("valid normal");
            let steps = (2.0 * half).round().max(1.0) as usize;
            // walk outward from the center in both directions
            let mut points = vec![center];
            for dir in [1.0, -1.0] {
                let (mut py, mut px) = center;
                let mut a = angle + if dir < 0.0 { std::f64::consts::PI } else { 0.0 };
                for _ in 0..steps / 2 {
                    a += bend.sample(rng);
                    py += a.sin();
                    px += a.cos();
                    points.push((py, px));
                }
                angle += bend.sample(rng);
            }
            rasterize_worm(h, w, &points, radius)
        }
    }
}

fn sample_center(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let margin = spec.axis_range[0] * 0.5;
    let y = rng.random_range(margin..=(spec.height as f64 - 1.0 - margin).max(margin));
    let x = rng.random_range(margin..=(spec.width as f64 - 1.0 - margin).max(margin));
    (y, x)
}

fn sample_center_near(spec: &SceneSpec, rng: &mut ChaCha8Rng, anchor: &Mask) -> (f64, f64) {
    // centroid of the anchor, offset by roughly one object radius
    let n = anchor.count().max(1) as f64;
    let (mut sy, mut sx) = (0.0, 0.0);
    for i in anchor.indices() {
        sy += (i / anchor.width()) as f64;
        sx += (i % anchor.width()) as f64;
    }
    let (cy, cx) = (sy / n, sx / n);
    let dist = rng.random_range(0.6..1.6) * (spec.axis_range[0] + spec.axis_range[1]) * 0.5;
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let y = (cy + dist * phi.sin()).clamp(0.0, spec.height as f64 - 1.0);
    let x = (cx + dist * phi.cos()).clamp(0.0, spec.width as f64 - 1.0);
    (y, x)
}

/// Checks `candidate` against the placed objects. Overlapping pairs must
/// respect the overlap-fraction bound; non-overlapping pairs must not touch.
/// Returns whether any overlap occurs, or `None` when placement is invalid.
fn admissible(spec: &SceneSpec, candidate: &Mask, placed: &[Mask], coverage: &[u16]) -> Option<bool> {
    let area = candidate.count();
    if area < MIN_OBJECT_PIXELS {
        return None;
    }
    let grown = candidate.dilate8();
    let mut any_overlap = false;
    for other in placed {
        let inter = candidate.intersection_count(other).ok()?;
        if inter == 0 {
            if grown.intersection_count(other).ok()? > 0 {
                return None;
            }
            continue;
        }
        any_overlap = true;
        let smaller = area.min(other.count()) as f64;
        if inter as f64 / smaller > spec.max_overlap_fraction {
            return None;
        }
    }
    if any_overlap {
        // every object, old and new, keeps enough overlap-free area
        let mut cov = coverage.to_vec();
        candidate.indices().for_each(|i| cov[i] += 1);
        for m in placed.iter().chain(std::iter::once(candidate)) {
            let free = m.indices().filter(|&i| cov[i] == 1).count();
            if (free as f64) < MIN_FREE_FRACTION * m.count() as f64 {
                return None;
            }
        }
    }
    Some(any_overlap)
}

/// Generates a scene; a pure function of `spec` (including its seed).
pub fn generate_scene(spec: &SceneSpec) -> Result<Generated> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [lo, hi] = spec.object_count_range;
    let requested = rng.random_range(lo..=hi);
    let mut placed: Vec<Mask> = Vec::with_capacity(requested);
    let mut coverage = vec![0u16; spec.height * spec.width];
    let mut truncated = false;

    for _ in 0..requested {
        let want_overlap = !placed.is_empty() && rng.random_bool(spec.overlap_probability);
        let mut accepted = None;
        for _ in 0..PLACEMENT_RETRIES {
            let center = if want_overlap {
                let anchor = &placed[rng.random_range(0..placed.len())];
                sample_center_near(spec, &mut rng, anchor)
            } else {
                sample_center(spec, &mut rng)
            };
            let candidate = sample_shape(spec, &mut rng, center);
            match admissible(spec, &candidate, &placed, &coverage) {
                Some(overlaps) if overlaps == want_overlap => {
                    accepted = Some(candidate);
                    break;
                }
                _ => {}
            }
        }
        match accepted {
            Some(m) => {
                m.indices().for_each(|i| coverage[i] += 1);
                placed.push(m);
            }
            None => truncated = true,
        }
    }
    if truncated {
        log::warn!(
            "scene seed {}: placed {} of {} objects",
            spec.seed,
            placed.len(),
            requested
        );
    }

    let image = render_image(
        &placed,
        spec.height,
        spec.width,
        spec.noise_sigma,
        spec.seed ^ RENDER_SEED_SALT,
    );
    Ok(Generated {
        scene: Scene {
            image,
            instances: placed,
        },
        requested,
        truncated,
    })
}

/// Seed of scene `index` in a dataset generated from `base`.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

/// `count` scenes from `spec`, scene `i` seeded with [`scene_seed`].
pub fn generate_dataset(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<Generated>> {
    use rayon::prelude::*;
    spec.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(&spec.with_seed(scene_seed(seed, i))))
        .collect()
}

/// Renders masks into an intensity image: each object gets a base
/// intensity in `[0.5, 0.9]`, overlaps take the maximum, and Gaussian noise
/// is added and clamped to `[0, 1]`.
pub fn render_image(instances: &[Mask], height: usize, width: usize, noise_sigma: f64, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.0f64; height * width];
    for m in instances {
        let base = rng.random_range(0.5..=0.9);
        for i in m.indices() {
            img[i] = img[i].max(base);
        }
    }
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
        img.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    Tensor::new(
        vec![height, width],
        img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    )
    .expect("image shape")
}

/// One draw of the augmentation transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Number of clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
    pub gamma: f64,
}

impl Augmentation {
    pub const IDENTITY: Self = Self {
        flip_horizontal: false,
        flip_vertical: false,
        quarter_turns: 0,
        gamma: 1.0,
    };

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            flip_horizontal: rng.random_bool(0.5),
            flip_vertical: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4),
            gamma: rng.random_range(0.5..2.0),
        }
    }

    /// Output dimensions for an `h x w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Source pixel `(y, x)` in the input for output pixel `(oy, ox)`.
    pub fn source(&self, h: usize, w: usize, oy: usize, ox: usize) -> (usize, usize) {
        // undo the rotation, then the flips
        let (mut y, mut x) = (oy, ox);
        let (mut ch, mut cw) = self.output_dims(h, w);
        for _ in 0..self.quarter_turns % 4 {
            // output of one clockwise turn: out[y][x] = in[ch_in - 1 - x][y]
            let (ih, iw) = (cw, ch);
            let (sy, sx) = (ih - 1 - x, y);
            y = sy;
            x = sx;
            ch = ih;
            cw = iw;
        }
        if self.flip_vertical {
            y = h - 1 - y;
        }
        if self.flip_horizontal {
            x = w - 1 - x;
        }
        (y, x)
    }

    fn remap<T: Copy>(&self, h: usize, w: usize, src: &[T]) -> (usize, usize, Vec<T>) {
        let (oh, ow) = self.output_dims(h, w);
        let mut out = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x) = self.source(h, w, oy, ox);
                out.push(src[y * w + x]);
            }
        }
        (oh, ow, out)
    }

    pub fn apply_mask(&self, m: &Mask) -> Mask {
        let (oh, ow, data) = self.remap(m.height(), m.width(), m.data());
        Mask::from_vec(oh, ow, data).expect("remapped mask")
    }

    pub fn apply(&self, scene: &Scene) -> Scene {
        let (h, w) = (scene.height(), scene.width());
        let (oh, ow, data) = self.remap(h, w, scene.image.data());
        let gamma = self.gamma as f32;
        let data = if self.gamma == 1.0 {
            data
        } else {
            data.into_iter().map(|v| v.powf(gamma)).collect()
        };
        Scene {
            image: Tensor::new(vec![oh, ow], data).expect("augmented image"),
            instances: scene.instances.iter().map(|m| self.apply_mask(m)).collect(),
        }
    }
}

/// Random flips, quarter-turn rotation and gamma correction; masks receive
/// the same geometric transform as the image.
pub fn augment(scene: &Scene, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Augmentation::sample(&mut rng).apply(scene)
}
