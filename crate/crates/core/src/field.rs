//! Deformation-field algebra: warping, composition and Jacobian analysis.
//!
//! A displacement field `u` maps output voxel `x` to the sample location
//! `x + u(x)`. Warping and composition sample with clamp-to-edge trilinear
//! interpolation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::sample::{stencil, stencil_grad};
use crate::{Dims, DisplacementField, Error, FeatureMap, Real, Result, Volume};

#[inline(always)]
fn sample_point<T: Real>(field: &[T], n: usize, i: usize, x: usize, y: usize, z: usize) -> [T; 3] {
    [
        T::from_usize(x) + field[i],
        T::from_usize(y) + field[n + i],
        T::from_usize(z) + field[2 * n + i],
    ]
}

pub(crate) fn warp_forward<T: Real>(src: &[T], channels: usize, dims: Dims, field: &[T]) -> Vec<T> {
    let n = dims.len();
    let mut out = vec![T::zero(); channels * n];
    for (i, (x, y, z)) in dims.coords().enumerate() {
        let st = stencil(dims, sample_point(field, n, i, x, y, z));
        for c in 0..channels {
            out[c * n + i] = st.apply(&src[c * n..(c + 1) * n]);
        }
    }
    out
}

/// Returns (source grad, field grad). Either can be skipped.
pub(crate) fn warp_backward<T: Real>(
    grad: &[T],
    src: &[T],
    channels: usize,
    dims: Dims,
    field: &[T],
    want_src: bool,
    want_field: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let n = dims.len();
    let mut gsrc = want_src.then(|| vec![T::zero(); channels * n]);
    let mut gfield = want_field.then(|| vec![T::zero(); 3 * n]);
    for (i, (x, y, z)) in dims.coords().enumerate() {
        let (st, dw) = stencil_grad(dims, sample_point(field, n, i, x, y, z));
        let mut acc = [T::zero(); 3];
        for c in 0..channels {
            let g = grad[c * n + i];
            if g == T::zero() {
                continue;
            }
            let s = &src[c * n..(c + 1) * n];
            if let Some(gs) = gsrc.as_mut() {
                st.scatter(&mut gs[c * n..(c + 1) * n], g);
            }
            if gfield.is_some() {
                for a in 0..3 {
                    let mut d = T::zero();
                    for k in 0..8 {
                        d += dw[a][k] * s[st.idx[k]];
                    }
                    acc[a] += g * d;
                }
            }
        }
        if let Some(gf) = gfield.as_mut() {
            for a in 0..3 {
                gf[a * n + i] = acc[a];
            }
        }
    }
    (gsrc, gfield)
}

/// `out(x) = res(x) + prev(x + res(x))`.
pub(crate) fn compose_forward<T: Real>(prev: &[T], res: &[T], dims: Dims) -> Vec<T> {
    let mut out = warp_forward(prev, 3, dims, res);
    for (o, &r) in out.iter_mut().zip(res) {
        *o += r;
    }
    out
}

/// Returns (prev grad, res grad).
pub(crate) fn compose_backward<T: Real>(grad: &[T], prev: &[T], res: &[T], dims: Dims) -> (Vec<T>, Vec<T>) {
    let (gprev, gres) = warp_backward(grad, prev, 3, dims, res, true, true);
    let mut gres = gres.unwrap_or_default();
    for (g, &up) in gres.iter_mut().zip(grad) {
        *g += up;
    }
    (gprev.unwrap_or_default(), gres)
}

fn check_dims(a: Dims, b: Dims, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{what}: grid {a} does not match field {b}")));
    }
    Ok(())
}

/// `out(x) = vol(x + phi(x))`.
pub fn warp<T: Real>(vol: &Volume<T>, phi: &DisplacementField<T>) -> Result<Volume<T>> {
    check_dims(vol.dims(), phi.dims(), "warp")?;
    let data = warp_forward(vol.data(), 1, vol.dims(), phi.data());
    Volume::new(vol.dims(), vol.spacing(), data)
}

/// Warp every channel of a feature map.
pub fn warp_features<T: Real>(fm: &FeatureMap<T>, phi: &DisplacementField<T>) -> Result<FeatureMap<T>> {
    check_dims(fm.dims(), phi.dims(), "warp")?;
    let data = warp_forward(fm.data(), fm.channels(), fm.dims(), phi.data());
    Ok(FeatureMap::from_raw(fm.channels(), fm.dims(), data))
}

/// Compose a residual estimated against already-warped data onto the running
/// total: `out(x) = res(x) + prev(x + res(x))`, so warping by the result
/// approximates warping by `prev` and then by `res`.
pub fn compose<T: Real>(prev: &DisplacementField<T>, res: &DisplacementField<T>) -> Result<DisplacementField<T>> {
    check_dims(prev.dims(), res.dims(), "compose")?;
    Ok(DisplacementField::from_raw(
        prev.dims(),
        compose_forward(prev.data(), res.data(), prev.dims()),
    ))
}

/// Finite-difference derivative of `u` along `axis` at voxel `i`: central in
/// the interior, one-sided on the border.
#[inline(always)]
fn axis_derivative<T: Real>(u: &[T], dims: Dims, i: usize, coord: usize, axis: usize) -> T {
    let len = dims.axis(axis);
    if len < 2 {
        return T::zero();
    }
    let s = dims.stride(axis);
    if coord == 0 {
        u[i + s] - u[i]
    } else if coord == len - 1 {
        u[i] - u[i - s]
    } else {
        (u[i + s] - u[i - s]) * T::lit(0.5)
    }
}

/// Per-voxel `det(I + grad u)` in voxel units.
pub fn jacobian_determinant<T: Real>(phi: &DisplacementField<T>) -> Volume<T> {
    let dims = phi.dims();
    let comps = [phi.component(0), phi.component(1), phi.component(2)];
    let mut out = vec![T::zero(); dims.len()];
    for (i, (x, y, z)) in dims.coords().enumerate() {
        let pos = [x, y, z];
        let mut j = [[T::zero(); 3]; 3];
        for (c, u) in comps.iter().enumerate() {
            for a in 0..3 {
                j[c][a] = axis_derivative(u, dims, i, pos[a], a);
            }
            j[c][c] += T::one();
        }
        out[i] = det3(&j);
    }
    Volume::from_fn(dims, |x, y, z| out[dims.index(x, y, z)])
}

pub(crate) fn det3<T: Real>(m: &[[T; 3]; 3]) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Fraction of voxels whose Jacobian determinant is `<= 0`, counted over the
/// whole grid including the border.
pub fn folding_ratio<T: Real>(jac: &Volume<T>) -> f64 {
    let n = jac.data().len();
    if n == 0 {
        return 0.0;
    }
    jac.data().iter().filter(|&&v| !(v > T::zero())).count() as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::trilinear_sample;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_field(dims: Dims, amp: f64, seed: u64) -> DisplacementField<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coef = [[0.0; 4]; 3];
        for c in coef.iter_mut() {
            for v in c.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let k = core::f64::consts::PI / dims.nx as f64;
        DisplacementField::from_fn(dims, |x, y, z| {
            let (x, y, z) = (x as f64, y as f64, z as f64);
            let mut v = [0.0; 3];
            for c in 0..3 {
                let a = &coef[c];
                v[c] = amp / 3.0 * (a[0] * (k * x + a[3]).sin() + a[1] * (k * y).cos() + a[2] * (k * z + 1.0).sin());
            }
            v
        })
    }

    /// Fades a field to zero on the grid faces so no sample leaves the grid
    /// and both sides of the double-warp comparison see the same data.
    fn tapered(f: DisplacementField<f64>) -> DisplacementField<f64> {
        let d = f.dims();
        let env = |i: usize, n: usize| (core::f64::consts::PI * i as f64 / (n - 1) as f64).sin();
        DisplacementField::from_fn(d, |x, y, z| {
            let e = env(x, d.nx) * env(y, d.ny) * env(z, d.nz);
            let u = f.at(x, y, z);
            [e * u[0], e * u[1], e * u[2]]
        })
    }

    fn band_limited_image(dims: Dims) -> Volume<f64> {
        Volume::from_fn(dims, |x, y, z| {
            let (x, y, z) = (x as f64, y as f64, z as f64);
            (0.4 * x).sin() + (0.3 * y + 0.5).cos() + 0.5 * (0.35 * z).sin() * (0.2 * x).cos()
        })
    }

    #[test]
    fn zero_field_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Volume::from_fn(Dims::new(4, 5, 3), |_, _, _| rng.random_range(-1.0f32..1.0));
        let out = warp(&v, &DisplacementField::identity(v.dims())).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn constant_shift_on_ramp() {
        let dims = Dims::cube(6);
        let ramp = Volume::from_fn(dims, |x, _, _| x as f32);
        let out = warp(&ramp, &DisplacementField::constant(dims, [-1.0, 0.0, 0.0])).unwrap();
        for (x, y, z) in dims.coords() {
            if x >= 1 {
                assert_eq!(out.at(x, y, z), x as f32 - 1.0);
            }
        }
    }

    #[test]
    fn warp_matches_per_voxel_sample_loop() {
        let dims = Dims::cube(6);
        let img = band_limited_image(dims);
        let phi = smooth_field(dims, 1.5, 2);
        let out = warp(&img, &phi).unwrap();
        for (x, y, z) in dims.coords() {
            let u = phi.at(x, y, z);
            let c = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]];
            assert!((out.at(x, y, z) - trilinear_sample(&img, c).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn warp_rejects_mismatched_dims() {
        let v = Volume::<f32>::zeros(Dims::cube(4));
        assert!(warp(&v, &DisplacementField::identity(Dims::cube(5))).is_err());
        let f = DisplacementField::<f32>::identity(Dims::cube(4));
        assert!(compose(&f, &DisplacementField::identity(Dims::cube(3))).is_err());
    }

    #[test]
    fn compose_identity_elements() {
        let dims = Dims::cube(5);
        let a = smooth_field(dims, 1.0, 3);
        let zero = DisplacementField::identity(dims);
        assert_eq!(compose(&a, &zero).unwrap(), a);
        assert_eq!(compose(&zero, &a).unwrap(), a);
    }

    #[test]
    fn compose_constants_add() {
        let dims = Dims::cube(4);
        let a = DisplacementField::constant(dims, [0.25f32, -0.5, 1.0]);
        let b = DisplacementField::constant(dims, [0.5f32, 0.125, -0.25]);
        let c = compose(&a, &b).unwrap();
        assert_eq!(c, DisplacementField::constant(dims, [0.75, -0.375, 0.75]));
    }

    #[test]
    fn compose_matches_double_warp() {
        let dims = Dims::cube(8);
        let img = band_limited_image(dims);
        let p = tapered(smooth_field(dims, 1.0, 4));
        let r = tapered(smooth_field(dims, 1.0, 5));
        let once = warp(&img, &compose(&p, &r).unwrap()).unwrap();
        let twice = warp(&warp(&img, &p).unwrap(), &r).unwrap();
        let worst = once
            .data()
            .iter()
            .zip(twice.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 2e-2, "max abs difference {worst}");
    }

    #[test]
    fn jacobian_of_identity_and_scaling() {
        let dims = Dims::cube(5);
        let j = jacobian_determinant(&DisplacementField::<f64>::identity(dims));
        assert!(j.data().iter().all(|&v| v == 1.0));
        let s = DisplacementField::from_fn(dims, |x, y, z| [0.1 * x as f64, 0.1 * y as f64, 0.1 * z as f64]);
        let j = jacobian_determinant(&s);
        for (x, y, z) in dims.coords() {
            assert!((j.at(x, y, z) - 1.331).abs() < 1e-12);
        }
        assert_eq!(folding_ratio(&j), 0.0);
    }

    #[test]
    fn orientation_flip_folds_everything() {
        let dims = Dims::cube(5);
        let f = DisplacementField::from_fn(dims, |x, _, _| [-2.0 * x as f64, 0.0, 0.0]);
        let j = jacobian_determinant(&f);
        for (x, y, z) in dims.coords() {
            assert!((j.at(x, y, z) + 1.0).abs() < 1e-12);
        }
        assert_eq!(folding_ratio(&j), 1.0);
    }

    #[test]
    fn jacobian_matches_reference_loop() {
        let dims = Dims::new(5, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = DisplacementField::from_fn(dims, |_, _, _| {
            [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]
        });
        let j = jacobian_determinant(&f);
        let d = dims.as_array();
        let get = |c: usize, p: [usize; 3]| f.at(p[0], p[1], p[2])[c];
        for (x, y, z) in dims.coords() {
            let p = [x, y, z];
            let mut m = [[0.0f64; 3]; 3];
            for c in 0..3 {
                for a in 0..3 {
                    let (mut lo, mut hi) = (p, p);
                    let h;
                    if p[a] == 0 {
                        hi[a] += 1;
                        h = 1.0;
                    } else if p[a] == d[a] - 1 {
                        lo[a] -= 1;
                        h = 1.0;
                    } else {
                        lo[a] -= 1;
                        hi[a] += 1;
                        h = 2.0;
                    }
                    m[c][a] = (get(c, hi) - get(c, lo)) / h + if a == c { 1.0 } else { 0.0 };
                }
            }
            // cofactor expansion along the second row, independent of det3
            let det = -m[1][0] * (m[0][1] * m[2][2] - m[0][2] * m[2][1]) + m[1][1] * (m[0][0] * m[2][2] - m[0][2] * m[2][0])
                - m[1][2] * (m[0][0] * m[2][1] - m[0][1] * m[2][0]);
            assert!((j.at(x, y, z) - det).abs() < 1e-12);
        }
        let direct = j.data().iter().filter(|&&v| v <= 0.0).count() as f64 / dims.len() as f64;
        assert_eq!(folding_ratio(&j), direct);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn translation_preserves_volume(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0) {
            let j = jacobian_determinant(&DisplacementField::constant(Dims::cube(4), [a, b, c]));
            prop_assert!(j.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        }

        #[test]
        fn compose_is_nearly_associative(seed in 0u64..10_000) {
            let dims = Dims::cube(16);
            let a = smooth_field(dims, 1.0, seed);
            let b = smooth_field(dims, 1.0, seed + 1);
            let c = smooth_field(dims, 1.0, seed + 2);
            let left = compose(&compose(&a, &b).unwrap(), &c).unwrap();
            let right = compose(&a, &compose(&b, &c).unwrap()).unwrap();
            let worst = left.data().iter().zip(right.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            prop_assert!(worst <= 5e-2, "{}", worst);
        }
    }
}
