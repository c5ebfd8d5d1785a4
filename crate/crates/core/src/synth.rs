//! Synthetic image pairs with known deformations, used by the tests, the
//! benchmarks and the `synth` command.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::field::warp;
use crate::metrics::{warp_labels, LabelVolume};
use crate::reghead::{scaling_squaring, DEFAULT_SS_STEPS};
use crate::{Dims, DisplacementField, Error, Real, Result, Volume};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthConfig {
    pub dims: Dims,
    /// Largest displacement magnitude of the ground-truth field, in voxels.
    pub max_disp: f64,
    /// Gaussian smoothing of the random velocity, in voxels.
    pub sigma: f64,
    /// Share of the velocity that is a global translation, in `[0, 1]`.
    pub translation: f64,
    /// Number of labelled structures.
    pub structures: usize,
    pub ss_steps: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dims: Dims::cube(32),
            max_disp: 2.0,
            sigma: 4.0,
            translation: 0.7,
            structures: 5,
            ss_steps: DEFAULT_SS_STEPS,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.min_extent() < 8 {
            return Err(Error::invalid(format!("synthetic volumes need at least 8 voxels per axis, got {}", self.dims)));
        }
        if !(self.max_disp >= 0.0 && self.max_disp.is_finite()) {
            return Err(Error::invalid(format!("max_disp must be finite and >= 0, got {}", self.max_disp)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.translation) {
            return Err(Error::invalid(format!("translation share must lie in [0, 1], got {}", self.translation)));
        }
        if self.structures == 0 || self.structures > u16::MAX as usize {
            return Err(Error::invalid("need at least one structure"));
        }
        if self.ss_steps == 0 {
            return Err(Error::invalid("ss_steps must be at least 1"));
        }
        Ok(())
    }
}

/// A moving image and the fixed image obtained by warping it with a known
/// field, so `warp(moving, ground_truth) == fixed`.
#[derive(Clone, Debug)]
pub struct SyntheticPair<T> {
    pub fixed: Volume<T>,
    pub moving: Volume<T>,
    pub fixed_labels: LabelVolume,
    pub moving_labels: LabelVolume,
    pub ground_truth: DisplacementField<T>,
    pub velocity: DisplacementField<T>,
}

/// Separable Gaussian blur with replicated edges.
pub fn gaussian_smooth(data: &[f64], dims: Dims, sigma: f64) -> Vec<f64> {
    let radius = Float::ceil(3.0 * sigma) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let mut cur = data.to_vec();
    let ext = dims.as_array();
    for axis in 0..3 {
        let len = ext[axis] as isize;
        let stride = dims.stride(axis);
        let mut next = vec![0.0; cur.len()];
        for (i, (x, y, z)) in dims.coords().enumerate() {
            let p = [x, y, z][axis] as isize;
            let base = i - p as usize * stride;
            let mut acc = 0.0;
            for (j, k) in (-radius..=radius).zip(&kernel) {
                let q = (p + j).clamp(0, len - 1) as usize;
                acc += k * cur[base + q * stride];
            }
            next[i] = acc;
        }
        cur = next;
    }
    cur
}

/// Gaussian-smoothed white noise in each component, rescaled so the largest
/// vector has norm `max_norm`.
pub fn smooth_velocity<T: Real>(dims: Dims, sigma: f64, max_norm: f64, seed: u64) -> DisplacementField<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = smooth_noise(dims, sigma, &mut rng);
    rescale(&field, max_norm).cast()
}

/// Multiply a field by a separable `sin` window that vanishes on the grid
/// faces, pinning the boundary in place.
pub fn taper_to_border<T: Real>(f: &DisplacementField<T>) -> DisplacementField<T> {
    let d = f.dims();
    let env = |i: usize, n: usize| {
        if n < 2 {
            return 1.0;
        }
        Float::sin(core::f64::consts::PI * i as f64 / (n - 1) as f64)
    };
    DisplacementField::from_fn(d, |x, y, z| {
        let e = T::lit(env(x, d.nx) * env(y, d.ny) * env(z, d.nz));
        let u = f.at(x, y, z);
        [e * u[0], e * u[1], e * u[2]]
    })
}

fn smooth_noise(dims: Dims, sigma: f64, rng: &mut ChaCha8Rng) -> DisplacementField<f64> {
    let mut data = Vec::with_capacity(3 * dims.len());
    for _ in 0..3 {
        let noise: Vec<f64> = (0..dims.len()).map(|_| rng.sample(StandardNormal)).collect();
        data.extend(gaussian_smooth(&noise, dims, sigma));
    }
    DisplacementField::from_raw(dims, data)
}

fn rescale(f: &DisplacementField<f64>, max_norm: f64) -> DisplacementField<f64> {
    let m = f.max_norm();
    if m == 0.0 {
        return f.clone();
    }
    f.scaled(max_norm / m)
}

/// Random unit vector.
fn direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = Float::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        if n > 1e-3 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
    intensity: f64,
}

impl Blob {
    /// Signed distance proxy: negative inside, in voxels along the smallest
    /// radius.
    fn depth(&self, p: [f64; 3]) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.radii[a];
            s += d * d;
        }
        let rmin = self.radii.iter().copied().fold(f64::INFINITY, f64::min);
        (Float::sqrt(s) - 1.0) * rmin
    }
}

fn smoothstep_inside(depth: f64) -> f64 {
    1.0 / (1.0 + Float::exp(depth / 0.6))
}

/// Procedural moving image: a smooth background texture with ellipsoids of
/// distinct intensities, plus the matching label volume.
fn procedural_image(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Volume<f64>, LabelVolume) {
    let dims = cfg.dims;
    let ext = dims.as_array();
    let n = dims.min_extent() as f64;
    let blobs: Vec<Blob> = (0..cfg.structures)
        .map(|k| {
            let r = [
                rng.random_range(0.11..0.17) * n,
                rng.random_range(0.11..0.17) * n,
                rng.random_range(0.11..0.17) * n,
            ];
            let mut center = [0.0; 3];
            for a in 0..3 {
                let margin = r[a] + cfg.max_disp + 1.0;
                let hi = (ext[a] as f64 - 1.0 - margin).max(margin + 1.0);
                center[a] = rng.random_range(margin..hi);
            }
            let intensity = 0.35 + 0.65 * (k + 1) as f64 / cfg.structures as f64;
            Blob { center, radii: r, intensity }
        })
        .collect();
    let phase: [f64; 3] = [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)];
    let freq = 2.0 * core::f64::consts::PI / (0.4 * n);
    let mut img = Vec::with_capacity(dims.len());
    let mut lab = Vec::with_capacity(dims.len());
    for (x, y, z) in dims.coords() {
        let p = [x as f64, y as f64, z as f64];
        let mut v = 0.12
            * (Float::sin(freq * p[0] + phase[0]) * Float::cos(freq * p[1] + phase[1])
                + Float::sin(freq * p[2] + phase[2]) * Float::cos(0.7 * freq * p[0]));
        let mut label = 0u16;
        for (k, b) in blobs.iter().enumerate() {
            let depth = b.depth(p);
            let w = smoothstep_inside(depth);
            v = (1.0 - w) * v + w * b.intensity;
            if depth <= 0.0 {
                label = (k + 1) as u16;
            }
        }
        img.push(v);
        lab.push(label);
    }
    let vol = Volume::new(dims, [1.0; 3], img).expect("procedural image is finite");
    let labels = LabelVolume::new(dims, lab).expect("label count matches dims");
    (vol, labels)
}

/// Velocity made of a random global translation plus smoothed noise, scaled
/// so the integrated field peaks at `cfg.max_disp`.
fn ground_truth(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<(DisplacementField<f64>, DisplacementField<f64>)> {
    let dims = cfg.dims;
    let noise = rescale(&smooth_noise(dims, cfg.sigma, rng), 1.0);
    let t = direction(rng);
    let w = cfg.translation;
    let raw = DisplacementField::from_fn(dims, |x, y, z| {
        let u = noise.at(x, y, z);
        [w * t[0] + (1.0 - w) * u[0], w * t[1] + (1.0 - w) * u[1], w * t[2] + (1.0 - w) * u[2]]
    });
    let mut v = rescale(&raw, cfg.max_disp);
    let mut phi = scaling_squaring(&v, cfg.ss_steps)?;
    for _ in 0..8 {
        let m = phi.max_norm();
        if m <= cfg.max_disp || m == 0.0 {
            break;
        }
        v = v.scaled(cfg.max_disp / m * 0.999);
        phi = scaling_squaring(&v, cfg.ss_steps)?;
    }
    Ok((v, phi))
}

/// Deterministic synthetic pair for `seed`.
pub fn synthetic_pair<T: Real>(cfg: &SynthConfig, seed: u64) -> Result<SyntheticPair<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (moving, moving_labels) = procedural_image(cfg, &mut rng);
    let (velocity, phi) = ground_truth(cfg, &mut rng)?;
    let fixed = warp(&moving, &phi)?;
    let fixed_labels = warp_labels(&moving_labels, &phi)?;
    Ok(SyntheticPair {
        fixed: fixed.cast(),
        moving: moving.cast(),
        fixed_labels,
        moving_labels,
        ground_truth: phi.cast(),
        velocity: velocity.cast(),
    })
}

/// Mean of `|a - b|` over voxels where `mask` is set.
pub fn mean_endpoint_error<T: Real>(a: &DisplacementField<T>, b: &DisplacementField<T>, mask: &[bool]) -> Result<f64> {
    if a.dims() != b.dims() || mask.len() != a.dims().len() {
        return Err(Error::invalid("endpoint error inputs differ in shape"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (x, y, z)) in a.dims().coords().enumerate() {
        if !mask[i] {
            continue;
        }
        let (p, q) = (a.at(x, y, z), b.at(x, y, z));
        let d2: f64 = (0..3).map(|c| Float::powi((p[c] - q[c]).as_f64(), 2)).sum();
        total += d2.sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("endpoint error over an empty mask".into()));
    }
    Ok(total / count as f64)
}
