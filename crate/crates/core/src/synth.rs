//! Parametric camera simulator and splice generator.
//!
//! Each camera model leaves three low-level traces on a smooth synthetic
//! scene: a tiled 2x2 gain pattern, spatially correlated sensor noise and
//! a quantization step. Scene content carries no camera information.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const QUANT_STEPS: [f64; 3] = [1.0 / 255.0, 2.0 / 255.0, 4.0 / 255.0];
pub const GAIN_RANGE: (f64, f64) = (0.8, 1.2);
pub const MAX_NOISE_SIGMA: f64 = 0.1;

/// Per-camera-model imaging signature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModelSpec {
    pub id: usize,
    /// Gain applied to pixel `(y, x)` is `cfa_gain[y % 2][x % 2]`.
    pub cfa_gain: [[f64; 2]; 2],
    /// Unit-energy correlation kernel applied to white sensor noise.
    pub noise_kernel: [[f64; 3]; 3],
    pub noise_sigma: f64,
    pub quant_step: f64,
}

impl CameraModelSpec {
    /// Largest absolute difference over all numeric components.
    pub fn distance(&self, other: &Self) -> f64 {
        let mut d: f64 = (self.noise_sigma - other.noise_sigma).abs();
        d = d.max((self.quant_step - other.quant_step).abs());
        for y in 0..2 {
            for x in 0..2 {
                d = d.max((self.cfa_gain[y][x] - other.cfa_gain[y][x]).abs());
            }
        }
        for y in 0..3 {
            for x in 0..3 {
                d = d.max((self.noise_kernel[y][x] - other.noise_kernel[y][x]).abs());
            }
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        let g_ok = self
            .cfa_gain
            .iter()
            .flatten()
            .all(|&g| g >= GAIN_RANGE.0 && g <= GAIN_RANGE.1);
        if !g_ok {
            return Err(Error::Config(format!("camera {}: cfa gains outside [0.8, 1.2]", self.id)));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma <= MAX_NOISE_SIGMA) {
            return Err(Error::Config(format!("camera {}: noise_sigma outside (0, 0.1]", self.id)));
        }
        if !QUANT_STEPS.iter().any(|q| (q - self.quant_step).abs() < 1e-15) {
            return Err(Error::Config(format!("camera {}: quant_step not in {{1,2,4}}/255", self.id)));
        }
        Ok(())
    }
}

/// Knobs of the camera-bank generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    /// Minimum [`CameraModelSpec::distance`] between any two models.
    pub margin: f64,
    /// Noise levels are stratified over `[low, high]` on a log scale.
    pub sigma_range: (f64, f64),
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            margin: 0.05,
            sigma_range: (0.006, 0.03),
        }
    }
}

fn random_spec(id: usize, sigma: f64, rng: &mut ChaCha8Rng) -> CameraModelSpec {
    let mut cfa_gain = [[1.0; 2]; 2];
    for g in cfa_gain.iter_mut().flatten() {
        *g = rng.random_range(GAIN_RANGE.0..=GAIN_RANGE.1);
    }
    let mut kernel = [[0.0; 3]; 3];
    for (y, row) in kernel.iter_mut().enumerate() {
        for (x, k) in row.iter_mut().enumerate() {
            *k = if y == 1 && x == 1 { 1.0 } else { rng.random_range(-0.4..0.6) };
        }
    }
    let energy: f64 = kernel.iter().flatten().map(|k| k * k).sum::<f64>().sqrt();
    for k in kernel.iter_mut().flatten() {
        *k /= energy;
    }
    CameraModelSpec {
        id,
        cfa_gain,
        noise_kernel: kernel,
        noise_sigma: sigma,
        quant_step: QUANT_STEPS[rng.random_range(0..QUANT_STEPS.len())],
    }
}

/// Draws `num_models` pairwise-distinct camera models, deterministically from `seed`.
pub fn make_camera_bank(num_models: usize, seed: u64, config: &BankConfig) -> Result<Vec<CameraModelSpec>> {
    if num_models < 2 {
        return Err(Error::Config(format!("num_models must be >= 2, got {num_models}")));
    }
    let (lo, hi) = config.sigma_range;
    if !(lo > 0.0 && hi >= lo && hi <= MAX_NOISE_SIGMA) {
        return Err(Error::Config(format!("invalid sigma range ({lo}, {hi})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut levels: Vec<usize> = (0..num_models).collect();
    levels.shuffle(&mut rng);
    let mut bank: Vec<CameraModelSpec> = Vec::with_capacity(num_models);
    for (id, &level) in levels.iter().enumerate() {
        let mut accepted = None;
        for _ in 0..10_000 {
            let u = rng.random_range(0.25..0.75);
            let t = if num_models > 1 { (level as f64 + u) / num_models as f64 } else { u };
            let sigma = lo * (hi / lo).powf(t);
            let spec = random_spec(id, sigma, &mut rng);
            if bank.iter().all(|b| b.distance(&spec) >= config.margin) {
                accepted = Some(spec);
                break;
            }
        }
        bank.push(accepted.ok_or_else(|| {
            Error::Config(format!("could not draw {num_models} models with margin {}", config.margin))
        })?);
    }
    Ok(bank)
}

/// An `H x W x 3` image in `[0, 1]` with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub pixels: Array3<f64>,
    pub camera_id: usize,
    pub scene_seed: u64,
}

/// SplitMix64 finalizer; used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smooth random texture built from low-frequency sinusoids plus a few soft
/// blobs, shared partly across channels. Values lie in `[0.1, 0.9]`.
pub fn scene(seed: u64, height: usize, width: usize) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5CE9E));
    let mut img = Array3::<f64>::zeros((height, width, 3));
    let base = rng.random_range(0.3..0.7);
    let tint: [f64; 3] = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
    let gx = rng.random_range(-0.15..0.15) / width as f64;
    let gy = rng.random_range(-0.15..0.15) / height as f64;
    struct Wave {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let waves: Vec<Wave> = (0..6)
        .map(|_| {
            let f = rng.random_range(0.004..0.03);
            let theta = rng.random_range(0.0..PI);
            let shared = rng.random_range(0.02..0.08);
            Wave {
                fx: f * theta.cos(),
                fy: f * theta.sin(),
                phase: rng.random_range(0.0..2.0 * PI),
                amp: [
                    shared + rng.random_range(-0.02..0.02),
                    shared + rng.random_range(-0.02..0.02),
                    shared + rng.random_range(-0.02..0.02),
                ],
            }
        })
        .collect();
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
                rng.random_range(6.0..20.0),
                rng.random_range(-0.12..0.12),
            )
        })
        .collect();
    for ((y, x, c), v) in img.indexed_iter_mut() {
        let (fy, fx) = (y as f64, x as f64);
        let mut s = base + tint[c] + gx * fx + gy * fy;
        for w in &waves {
            s += w.amp[c] * (2.0 * PI * (w.fx * fx + w.fy * fy) + w.phase).sin();
        }
        for &(cy, cx, r, a) in &blobs {
            let d2 = (fy - cy).powi(2) + (fx - cx).powi(2);
            s += a * (-d2 / (2.0 * r * r)).exp();
        }
        *v = s.clamp(0.1, 0.9);
    }
    img
}

/// Rounds to a multiple of `step`, expressed as an exact 8-bit code over 255.
fn quantize(v: f64, step: f64) -> f64 {
    let mult = (step * 255.0).round().max(1.0);
    let code = ((v / step).round() * mult).clamp(0.0, 255.0);
    code / 255.0
}

/// Runs a scene through a camera: gain pattern, correlated noise, quantization, clamp.
pub fn render(scene_seed: u64, spec: &CameraModelSpec, height: usize, width: usize) -> SyntheticImage {
    let mut pixels = scene(scene_seed, height, width);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scene_seed, 0xCA3E_0000 + spec.id as u64));
    for c in 0..3 {
        let white = Array2::from_shape_fn((height + 2, width + 2), |_| rng.sample::<f64, _>(StandardNormal));
        for y in 0..height {
            for x in 0..width {
                let mut n = 0.0;
                for (ky, row) in spec.noise_kernel.iter().enumerate() {
                    for (kx, k) in row.iter().enumerate() {
                        n += k * white[[y + ky, x + kx]];
                    }
                }
                let v = pixels[[y, x, c]] * spec.cfa_gain[y % 2][x % 2] + spec.noise_sigma * n;
                pixels[[y, x, c]] = quantize(v, spec.quant_step);
            }
        }
    }
    SyntheticImage {
        pixels,
        camera_id: spec.id,
        scene_seed,
    }
}

/// Bounds on the spliced-area fraction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpliceConfig {
    pub min_fraction: f64,
    pub max_fraction: f64,
}

impl Default for SpliceConfig {
    fn default() -> Self {
        Self {
            min_fraction: 0.05,
            max_fraction: 0.40,
        }
    }
}

impl SpliceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_fraction > 0.0 && self.min_fraction < self.max_fraction && self.max_fraction < 0.5) {
            return Err(Error::Config("splice fraction bounds must satisfy 0 < min < max < 0.5".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionShape {
    Rectangle,
    Ellipse,
}

/// A composite and its ground truth (`true` = spliced pixel).
#[derive(Clone, Debug, PartialEq)]
pub struct SpliceCase {
    pub image: Array3<f64>,
    pub mask: Array2<bool>,
    pub host_camera: usize,
    pub donor_camera: usize,
    pub shape: RegionShape,
}

impl SpliceCase {
    pub fn spliced_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

fn region_mask(h: usize, w: usize, shape: RegionShape, target: f64, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let area = target * (h * w) as f64;
    let aspect = rng.random_range(0.6..1.6f64);
    let (rh, rw) = match shape {
        RegionShape::Rectangle => ((area / aspect).sqrt(), (area * aspect).sqrt()),
        // ellipse area = pi a b with full axes 2a, 2b
        RegionShape::Ellipse => {
            let b = (area / (PI * aspect)).sqrt();
            (2.0 * b, 2.0 * b * aspect)
        }
    };
    let rh = rh.min(h as f64);
    let rw = rw.min(w as f64);
    let cy = rng.random_range(rh / 2.0..=(h as f64 - rh / 2.0).max(rh / 2.0));
    let cx = rng.random_range(rw / 2.0..=(w as f64 - rw / 2.0).max(rw / 2.0));
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dy = (y as f64 + 0.5 - cy) / (rh / 2.0);
        let dx = (x as f64 + 0.5 - cx) / (rw / 2.0);
        match shape {
            RegionShape::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            RegionShape::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    })
}

/// Pastes a random rectangle or ellipse of `donor` into `host`.
///
/// `requested_fraction` outside the configured bounds is ignored (logged) and
/// a fraction is drawn from the bounds instead; regions whose realized area
/// falls outside the bounds are redrawn.
pub fn make_splice(
    host: &SyntheticImage,
    donor: &SyntheticImage,
    region_seed: u64,
    config: &SpliceConfig,
    requested_fraction: Option<f64>,
) -> Result<SpliceCase> {
    if host.camera_id == donor.camera_id {
        return Err(Error::Config(format!(
            "host and donor share camera {}; not a forgery",
            host.camera_id
        )));
    }
    if host.pixels.dim() != donor.pixels.dim() {
        return Err(Error::Shape(format!(
            "host is {:?}, donor is {:?}",
            host.pixels.dim(),
            donor.pixels.dim()
        )));
    }
    config.validate()?;
    let in_bounds = |f: f64| f >= config.min_fraction && f <= config.max_fraction;
    let mut requested = requested_fraction;
    if let Some(f) = requested.filter(|&f| !in_bounds(f)) {
        log::warn!(
            "requested splice fraction {f} outside [{}, {}]; resampling",
            config.min_fraction,
            config.max_fraction
        );
        requested = None;
    }
    let (h, w, _) = host.pixels.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(region_seed);
    for _ in 0..1000 {
        let shape = if rng.random_bool(0.5) { RegionShape::Rectangle } else { RegionShape::Ellipse };
        let target = requested.unwrap_or_else(|| rng.random_range(config.min_fraction..=config.max_fraction));
        let mask = region_mask(h, w, shape, target, &mut rng);
        let frac = mask.iter().filter(|&&m| m).count() as f64 / (h * w) as f64;
        if !in_bounds(frac) {
            continue;
        }
        let mut image = host.pixels.clone();
        Zip::indexed(&mut image).for_each(|(y, x, c), v| {
            if mask[[y, x]] {
                *v = donor.pixels[[y, x, c]];
            }
        });
        return Ok(SpliceCase {
            image,
            mask,
            host_camera: host.camera_id,
            donor_camera: donor.camera_id,
            shape,
        });
    }
    Err(Error::Config(format!("could not place a splice region in a {h}x{w} image")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank() -> Vec<CameraModelSpec> {
        make_camera_bank(4, 7, &BankConfig::default()).unwrap()
    }

    #[test]
    fn bank_is_deterministic_and_valid() {
        let a = bank();
        assert_eq!(a, bank());
        for s in &a {
            s.validate().unwrap();
        }
        for i in 0..a.len() {
            for j in 0..i {
                assert!(a[i].distance(&a[j]) >= 0.05);
            }
        }
        let two = make_camera_bank(2, 123, &BankConfig::default()).unwrap();
        assert!(two[0].distance(&two[1]) >= 0.05);
        assert!(matches!(make_camera_bank(1, 7, &BankConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn degenerate_pipeline_equals_quantized_scene() {
        let spec = CameraModelSpec {
            id: 0,
            cfa_gain: [[1.0; 2]; 2],
            noise_kernel: [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]],
            noise_sigma: 0.0,
            quant_step: 1.0 / 255.0,
        };
        let img = render(42, &spec, 20, 24);
        let s = scene(42, 20, 24);
        for (a, b) in img.pixels.iter().zip(s.iter()) {
            assert_eq!(*a, quantize(*b, 1.0 / 255.0));
        }
    }

    #[test]
    fn rendering_is_deterministic_and_camera_dependent() {
        let b = bank();
        let a1 = render(5, &b[0], 32, 32);
        let a2 = render(5, &b[0], 32, 32);
        assert_eq!(a1, a2);
        let other = render(5, &b[1], 32, 32);
        let mad = (&a1.pixels - &other.pixels).mapv(f64::abs).mean().unwrap();
        assert!(mad > 0.0);
        assert!(a1.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn splice_copies_pixels_exactly() {
        let b = bank();
        let host = render(1, &b[0], 48, 48);
        let donor = render(2, &b[2], 48, 48);
        let case = make_splice(&host, &donor, 9, &SpliceConfig::default(), None).unwrap();
        let f = case.spliced_fraction();
        assert!((0.05..=0.40).contains(&f));
        for ((y, x, c), v) in case.image.indexed_iter() {
            let src = if case.mask[[y, x]] { &donor } else { &host };
            assert_eq!(v.to_bits(), src.pixels[[y, x, c]].to_bits());
        }
        assert_eq!(case, make_splice(&host, &donor, 9, &SpliceConfig::default(), None).unwrap());
    }

    #[test]
    fn oversized_request_is_resampled() {
        let b = bank();
        let host = render(1, &b[0], 40, 40);
        let donor = render(2, &b[1], 40, 40);
        let case = make_splice(&host, &donor, 3, &SpliceConfig::default(), Some(0.5)).unwrap();
        assert!((0.05..=0.40).contains(&case.spliced_fraction()));
    }

    #[test]
    fn same_camera_is_not_a_forgery() {
        let b = bank();
        let host = render(1, &b[0], 32, 32);
        assert!(make_splice(&host, &host, 1, &SpliceConfig::default(), None).is_err());
        // the same pixels flagged as another camera are a valid (seamless) case
        let mut donor = host.clone();
        donor.camera_id = 3;
        let case = make_splice(&host, &donor, 1, &SpliceConfig::default(), None).unwrap();
        assert_eq!(case.image, host.pixels);
    }
}
