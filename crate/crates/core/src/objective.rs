//! Unsupervised registration loss: local normalized cross-correlation plus a
//! diffusion regularizer on the displacement gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::field::warp;
use crate::{Dims, DisplacementField, Error, Real, Result, Volume};

pub const NCC_EPS: f64 = 1e-5;
pub const DEFAULT_NCC_WINDOW: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossConfig {
    /// Weight of the regularizer.
    pub lambda: f64,
    /// Edge length of the cubic NCC window (odd).
    pub ncc_window: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            ncc_window: DEFAULT_NCC_WINDOW,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        check_window(self.ncc_window)
    }
}

fn check_window(w: usize) -> Result<()> {
    if w < 3 || w % 2 == 0 {
        return Err(Error::invalid(format!("NCC window must be odd and >= 3, got {w}")));
    }
    Ok(())
}

/// Separable box sum over a cubic window of edge `w`, zero outside the grid.
pub(crate) fn box_sum<T: Real>(data: &[T], dims: Dims, w: usize) -> Vec<T> {
    let r = w / 2;
    let mut cur = data.to_vec();
    let mut line = Vec::new();
    for axis in 0..3 {
        let len = dims.axis(axis);
        let stride = dims.stride(axis);
        let mut next = vec![T::zero(); cur.len()];
        for start in line_starts(dims, axis) {
            line.clear();
            line.extend((0..len).map(|i| cur[start + i * stride]));
            for i in 0..len {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(len - 1);
                let mut acc = T::zero();
                for &v in &line[lo..=hi] {
                    acc += v;
                }
                next[start + i * stride] = acc;
            }
        }
        cur = next;
    }
    cur
}

/// Linear index of the first voxel of every line running along `axis`.
fn line_starts(dims: Dims, axis: usize) -> impl Iterator<Item = usize> {
    let [nx, ny, nz] = dims.as_array();
    let (a, b) = match axis {
        0 => (ny, nz),
        1 => (nx, nz),
        _ => (nx, ny),
    };
    (0..b).flat_map(move |j| {
        (0..a).map(move |i| match axis {
            0 => dims.index(0, i, j),
            1 => dims.index(i, 0, j),
            _ => dims.index(i, j, 0),
        })
    })
}

fn window_counts<T: Real>(dims: Dims, w: usize) -> Vec<T> {
    let r = w / 2;
    let span = |i: usize, len: usize| (i + r).min(len - 1) + 1 - i.saturating_sub(r);
    dims.coords()
        .map(|(x, y, z)| T::from_usize(span(x, dims.nx) * span(y, dims.ny) * span(z, dims.nz)))
        .collect()
}

pub(crate) struct NccTerms<T> {
    fs: Vec<T>,
    gs: Vec<T>,
    ff: Vec<T>,
    gg: Vec<T>,
    fg: Vec<T>,
    /// In-bounds voxel count of each window.
    count: Vec<T>,
}

impl<T: Real> NccTerms<T> {
    fn new(f: &[T], g: &[T], dims: Dims, w: usize) -> Self {
        let prod = |a: &[T], b: &[T]| -> Vec<T> { a.iter().zip(b).map(|(x, y)| *x * *y).collect() };
        NccTerms {
            fs: box_sum(f, dims, w),
            gs: box_sum(g, dims, w),
            ff: box_sum(&prod(f, f), dims, w),
            gg: box_sum(&prod(g, g), dims, w),
            fg: box_sum(&prod(f, g), dims, w),
            count: window_counts(dims, w),
        }
    }

    /// (cross, var_f, var_g) at voxel `i`.
    #[inline(always)]
    fn moments(&self, i: usize) -> (T, T, T) {
        let (fs, gs, k) = (self.fs[i], self.gs[i], self.count[i]);
        let cross = self.fg[i] - fs * gs / k;
        let vf = self.ff[i] - fs * fs / k;
        let vg = self.gg[i] - gs * gs / k;
        (cross, vf, vg)
    }
}

pub(crate) fn ncc_forward<T: Real>(f: &[T], g: &[T], dims: Dims, w: usize) -> T {
    let terms = NccTerms::new(f, g, dims, w);
    let eps = T::lit(NCC_EPS);
    let mut total = T::zero();
    for i in 0..f.len() {
        let (cross, vf, vg) = terms.moments(i);
        total += cross * cross / (vf * vg + eps);
    }
    -total / T::from_usize(f.len())
}

/// Gradient of the NCC loss with respect to the fixed and warped images,
/// scaled by the upstream gradient `up`.
pub(crate) fn ncc_backward<T: Real>(
    up: T,
    f: &[T],
    g: &[T],
    dims: Dims,
    w: usize,
    want_f: bool,
    want_g: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let terms = NccTerms::new(f, g, dims, w);
    let eps = T::lit(NCC_EPS);
    let n = f.len();
    let scale = -up / T::from_usize(n);
    let two = T::lit(2.0);
    // per-voxel derivatives of cc with respect to the five window sums
    let mut d_fs = vec![T::zero(); n];
    let mut d_gs = vec![T::zero(); n];
    let mut d_ff = vec![T::zero(); n];
    let mut d_gg = vec![T::zero(); n];
    let mut d_fg = vec![T::zero(); n];
    for i in 0..n {
        let (cross, vf, vg) = terms.moments(i);
        let den = vf * vg + eps;
        let d_cross = two * cross / den * scale;
        let q = cross * cross / (den * den) * scale;
        let d_vf = -q * vg;
        let d_vg = -q * vf;
        let (fs, gs) = (terms.fs[i], terms.gs[i]);
        d_fg[i] = d_cross;
        d_ff[i] = d_vf;
        d_gg[i] = d_vg;
        let k = terms.count[i];
        d_fs[i] = -d_cross * gs / k - two * d_vf * fs / k;
        d_gs[i] = -d_cross * fs / k - two * d_vg * gs / k;
    }
    // the zero-padded box filter is self-adjoint
    let b_fg = box_sum(&d_fg, dims, w);
    let grad_for = |own: &[T], other: &[T], d_s: &[T], d_sq: &[T]| -> Vec<T> {
        let bs = box_sum(d_s, dims, w);
        let bsq = box_sum(d_sq, dims, w);
        (0..n).map(|i| bs[i] + two * own[i] * bsq[i] + other[i] * b_fg[i]).collect()
    };
    let gf = want_f.then(|| grad_for(f, g, &d_fs, &d_ff));
    let gg = want_g.then(|| grad_for(g, f, &d_gs, &d_gg));
    (gf, gg)
}

/// Negative mean of the squared local correlation coefficient
/// `cov^2 / (var_f * var_g + 1e-5)` over cubic windows. Voxels outside the
/// grid add nothing to the window sums and the local means divide by the
/// in-bounds count, so the loss stays invariant to affine intensity changes
/// up to the epsilon. A perfect match gives -1.
pub fn ncc_loss<T: Real>(fixed: &Volume<T>, warped: &Volume<T>, window: usize) -> Result<T> {
    if fixed.dims() != warped.dims() {
        return Err(Error::invalid(format!(
            "NCC inputs differ in shape: {} vs {}",
            fixed.dims(),
            warped.dims()
        )));
    }
    check_window(window)?;
    Ok(ncc_forward(fixed.data(), warped.data(), fixed.dims(), window))
}

pub(crate) fn grad_reg_forward<T: Real>(u: &[T], dims: Dims) -> T {
    let n = dims.len();
    let mut total = T::zero();
    for axis in 0..3 {
        let len = dims.axis(axis);
        if len < 2 {
            continue;
        }
        let s = dims.stride(axis);
        let count = 3 * (n / len) * (len - 1);
        let mut acc = T::zero();
        for c in 0..3 {
            let comp = &u[c * n..(c + 1) * n];
            for (i, (x, y, z)) in dims.coords().enumerate() {
                if [x, y, z][axis] + 1 < len {
                    let d = comp[i + s] - comp[i];
                    acc += d * d;
                }
            }
        }
        total += acc / T::from_usize(count);
    }
    total
}

pub(crate) fn grad_reg_backward<T: Real>(up: T, u: &[T], dims: Dims) -> Vec<T> {
    let n = dims.len();
    let mut g = vec![T::zero(); u.len()];
    for axis in 0..3 {
        let len = dims.axis(axis);
        if len < 2 {
            continue;
        }
        let s = dims.stride(axis);
        let k = T::lit(2.0) * up / T::from_usize(3 * (n / len) * (len - 1));
        for c in 0..3 {
            let comp = &u[c * n..(c + 1) * n];
            let gc = &mut g[c * n..(c + 1) * n];
            for (i, (x, y, z)) in dims.coords().enumerate() {
                if [x, y, z][axis] + 1 < len {
                    let d = k * (comp[i + s] - comp[i]);
                    gc[i + s] += d;
                    gc[i] -= d;
                }
            }
        }
    }
    g
}

/// Diffusion regularizer: for each axis, the mean over voxels and components
/// of the squared forward difference, summed over the three axes.
pub fn grad_reg<T: Real>(phi: &DisplacementField<T>) -> T {
    grad_reg_forward(phi.data(), phi.dims())
}

/// `ncc(I_f, I_m o phi) + lambda * reg(phi)`.
pub fn total_loss<T: Real>(
    fixed: &Volume<T>,
    moving: &Volume<T>,
    phi: &DisplacementField<T>,
    cfg: &LossConfig,
) -> Result<T> {
    cfg.validate()?;
    let warped = warp(moving, phi)?;
    let sim = ncc_loss(fixed, &warped, cfg.ncc_window)?;
    Ok(sim + T::lit(cfg.lambda) * grad_reg(phi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: Dims, seed: u64) -> Volume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, |_, _, _| rng.random_range(0.0..1.0))
    }

    /// Windowed loop over the in-bounds part of each window.
    fn brute_ncc(f: &Volume<f64>, g: &Volume<f64>, w: usize) -> f64 {
        let d = f.dims();
        let r = (w / 2) as isize;
        let mut total = 0.0;
        for (x, y, z) in d.coords() {
            let mut vals = Vec::new();
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (a, b, c) = (x as isize + dx, y as isize + dy, z as isize + dz);
                        let inside = a >= 0 && b >= 0 && c >= 0 && (a as usize) < d.nx && (b as usize) < d.ny && (c as usize) < d.nz;
                        if inside {
                            vals.push((f.at(a as usize, b as usize, c as usize), g.at(a as usize, b as usize, c as usize)));
                        }
                    }
                }
            }
            let k = vals.len() as f64;
            let fm = vals.iter().map(|v| v.0).sum::<f64>() / k;
            let gm = vals.iter().map(|v| v.1).sum::<f64>() / k;
            let cov: f64 = vals.iter().map(|v| (v.0 - fm) * (v.1 - gm)).sum();
            let vf: f64 = vals.iter().map(|v| (v.0 - fm).powi(2)).sum();
            let vg: f64 = vals.iter().map(|v| (v.1 - gm).powi(2)).sum();
            total += cov * cov / (vf * vg + 1e-5);
        }
        -total / d.len() as f64
    }

    #[test]
    fn perfect_match_is_minus_one() {
        let f = random_volume(Dims::cube(6), 1);
        let l = ncc_loss(&f, &f, 3).unwrap();
        assert!((l + 1.0).abs() <= 1e-3, "{l}");
    }

    #[test]
    fn affine_invariance() {
        let f = random_volume(Dims::cube(6), 2);
        let g = Volume::new(f.dims(), [1.0; 3], f.data().iter().map(|v| 2.5 * v + 0.7).collect()).unwrap();
        let l = ncc_loss(&f, &g, 3).unwrap();
        assert!((l + 1.0).abs() <= 1e-3, "{l}");
    }

    #[test]
    fn matches_windowed_loop() {
        let f = random_volume(Dims::cube(5), 3);
        let g = random_volume(Dims::cube(5), 4);
        let got = ncc_loss(&f, &g, 3).unwrap();
        let expect = brute_ncc(&f, &g, 3);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        let got5 = ncc_loss(&f, &g, 5).unwrap();
        assert!((got5 - brute_ncc(&f, &g, 5)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = random_volume(Dims::cube(4), 5);
        let g = random_volume(Dims::cube(5), 6);
        assert!(ncc_loss(&f, &g, 3).is_err());
        assert!(ncc_loss(&f, &f, 4).is_err());
        assert!(LossConfig { lambda: -1.0, ncc_window: 9 }.validate().is_err());
    }

    #[test]
    fn grad_reg_closed_forms() {
        let dims = Dims::cube(5);
        assert_eq!(grad_reg(&DisplacementField::constant(dims, [1.0f64, -2.0, 3.0])), 0.0);
        let ramp = DisplacementField::from_fn(dims, |x, _, _| [x as f64, 0.0, 0.0]);
        assert!((grad_reg(&ramp) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn grad_reg_matches_difference_loop() {
        let dims = Dims::new(4, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = DisplacementField::from_fn(dims, |_, _, _| {
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
        });
        let d = dims.as_array();
        let mut expect = 0.0;
        for axis in 0..3 {
            let mut s = 0.0;
            let mut count = 0usize;
            for (x, y, z) in dims.coords() {
                let mut q = [x, y, z];
                if q[axis] + 1 >= d[axis] {
                    continue;
                }
                let a: [f64; 3] = f.at(x, y, z);
                q[axis] += 1;
                let b = f.at(q[0], q[1], q[2]);
                for c in 0..3 {
                    s += (b[c] - a[c]).powi(2);
                    count += 1;
                }
            }
            expect += s / count as f64;
        }
        assert!((grad_reg(&f) - expect).abs() < 1e-14);
    }

    #[test]
    fn total_loss_identity_pair() {
        let f = random_volume(Dims::cube(6), 8);
        let phi = DisplacementField::identity(f.dims());
        let l = total_loss(&f, &f, &phi, &LossConfig { lambda: 1.0, ncc_window: 3 }).unwrap();
        assert!((l + 1.0).abs() <= 1e-3);
    }

    #[test]
    fn lambda_zero_is_ncc_alone() {
        let f = random_volume(Dims::cube(6), 9);
        let m = random_volume(Dims::cube(6), 10);
        let phi = DisplacementField::constant(f.dims(), [0.3, -0.2, 0.1]);
        let cfg = LossConfig { lambda: 0.0, ncc_window: 3 };
        let l = total_loss(&f, &m, &phi, &cfg).unwrap();
        assert_eq!(l, ncc_loss(&f, &warp(&m, &phi).unwrap(), 3).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn ncc_is_bounded_and_affine_invariant(seed in 0u64..10_000, a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let f = random_volume(Dims::cube(5), seed);
            let g = random_volume(Dims::cube(5), seed + 1);
            let l = ncc_loss(&f, &g, 3).unwrap();
            prop_assert!((-1.0 - 1e-3..=1e-3).contains(&l));
            let g2 = Volume::new(g.dims(), [1.0; 3], g.data().iter().map(|v| a * v + b).collect()).unwrap();
            let l2 = ncc_loss(&f, &g2, 3).unwrap();
            prop_assert!((l - l2).abs() <= 1e-3, "{} vs {}", l, l2);
        }

        #[test]
        fn grad_reg_nonnegative_zero_iff_constant(seed in 0u64..10_000, scale in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = DisplacementField::from_fn(Dims::cube(4), |_, _, _| {
                [scale * rng.random_range(-1.0..1.0), 0.0, 0.0]
            });
            let r = grad_reg(&f);
            prop_assert!(r >= 0.0);
            let constant = f.component(0).iter().all(|&v| v == f.component(0)[0]);
            prop_assert_eq!(r == 0.0, constant);
        }
    }
}
