//! Trilinear sampling, 2x average pooling and 2x field upsampling.
//!
//! Sampling clamps coordinates to `[0, n - 1]` on every axis (clamp-to-edge).
//! Inside a cell the lower corner is `ceil(c) - 1`, so an exact lattice
//! coordinate belongs to the cell on its negative side; this picks the
//! left-hand derivative at lattice points.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Dims, DisplacementField, Error, FeatureMap, Real, Result, Volume};

#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisCell<T> {
    pub i0: usize,
    pub i1: usize,
    pub f: T,
    /// False when the coordinate was clamped, which zeroes its derivative.
    pub live: bool,
}

#[inline(always)]
pub(crate) fn axis_cell<T: Real>(c: T, n: usize) -> AxisCell<T> {
    if n == 1 {
        return AxisCell {
            i0: 0,
            i1: 0,
            f: T::zero(),
            live: false,
        };
    }
    let hi = T::from_usize(n - 1);
    if !(c >= T::zero()) {
        AxisCell {
            i0: 0,
            i1: 1,
            f: T::zero(),
            live: false,
        }
    } else if c > hi {
        AxisCell {
            i0: n - 2,
            i1: n - 1,
            f: T::one(),
            live: false,
        }
    } else {
        let i0 = if c > T::zero() {
            c.ceil().to_usize().unwrap_or(1) - 1
        } else {
            0
        };
        AxisCell {
            i0,
            i1: i0 + 1,
            f: c - T::from_usize(i0),
            live: true,
        }
    }
}

/// The eight corners and weights of one trilinear sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil<T> {
    pub idx: [usize; 8],
    pub w: [T; 8],
}

impl<T: Real> Stencil<T> {
    #[inline(always)]
    pub fn apply(&self, data: &[T]) -> T {
        let mut acc = T::zero();
        for k in 0..8 {
            acc += self.w[k] * data[self.idx[k]];
        }
        acc
    }

    #[inline(always)]
    pub fn scatter(&self, out: &mut [T], g: T) {
        for k in 0..8 {
            out[self.idx[k]] += self.w[k] * g;
        }
    }
}

#[inline(always)]
fn corners<T: Real>(dims: Dims, cx: &AxisCell<T>, cy: &AxisCell<T>, cz: &AxisCell<T>) -> [usize; 8] {
    let xs = [cx.i0, cx.i1];
    let ys = [cy.i0, cy.i1];
    let zs = [cz.i0, cz.i1];
    let mut idx = [0usize; 8];
    for k in 0..8 {
        idx[k] = dims.index(xs[k & 1], ys[(k >> 1) & 1], zs[k >> 2]);
    }
    idx
}

#[inline(always)]
pub(crate) fn stencil<T: Real>(dims: Dims, c: [T; 3]) -> Stencil<T> {
    let cx = axis_cell(c[0], dims.nx);
    let cy = axis_cell(c[1], dims.ny);
    let cz = axis_cell(c[2], dims.nz);
    stencil_from_cells(dims, &cx, &cy, &cz)
}

#[inline(always)]
pub(crate) fn stencil_from_cells<T: Real>(
    dims: Dims,
    cx: &AxisCell<T>,
    cy: &AxisCell<T>,
    cz: &AxisCell<T>,
) -> Stencil<T> {
    let wx = [T::one() - cx.f, cx.f];
    let wy = [T::one() - cy.f, cy.f];
    let wz = [T::one() - cz.f, cz.f];
    let mut w = [T::zero(); 8];
    for k in 0..8 {
        w[k] = wx[k & 1] * wy[(k >> 1) & 1] * wz[k >> 2];
    }
    Stencil {
        idx: corners(dims, cx, cy, cz),
        w,
    }
}

/// Stencil plus the derivative of each corner weight with respect to the
/// three sample coordinates.
#[inline(always)]
pub(crate) fn stencil_grad<T: Real>(dims: Dims, c: [T; 3]) -> (Stencil<T>, [[T; 8]; 3]) {
    let cx = axis_cell(c[0], dims.nx);
    let cy = axis_cell(c[1], dims.ny);
    let cz = axis_cell(c[2], dims.nz);
    let st = stencil_from_cells(dims, &cx, &cy, &cz);
    let wx = [T::one() - cx.f, cx.f];
    let wy = [T::one() - cy.f, cy.f];
    let wz = [T::one() - cz.f, cz.f];
    let d = |live: bool| {
        if live {
            [-T::one(), T::one()]
        } else {
            [T::zero(), T::zero()]
        }
    };
    let (gx, gy, gz) = (d(cx.live), d(cy.live), d(cz.live));
    let mut dw = [[T::zero(); 8]; 3];
    for k in 0..8 {
        let (bx, by, bz) = (k & 1, (k >> 1) & 1, k >> 2);
        dw[0][k] = gx[bx] * wy[by] * wz[bz];
        dw[1][k] = wx[bx] * gy[by] * wz[bz];
        dw[2][k] = wx[bx] * wy[by] * gz[bz];
    }
    (st, dw)
}

fn check_sampleable(dims: Dims) -> Result<()> {
    if dims.min_extent() < 2 {
        return Err(Error::invalid(format!(
            "trilinear sampling needs at least 2 voxels per axis, got {dims}"
        )));
    }
    Ok(())
}

/// Trilinear interpolation of a scalar volume at a continuous voxel
/// coordinate `(x, y, z)`, clamped to the volume.
pub fn trilinear_sample<T: Real>(vol: &Volume<T>, coord: [T; 3]) -> Result<T> {
    check_sampleable(vol.dims())?;
    Ok(stencil(vol.dims(), coord).apply(vol.data()))
}

/// Per-channel trilinear interpolation of a feature map.
pub fn trilinear_sample_channels<T: Real>(fm: &FeatureMap<T>, coord: [T; 3]) -> Result<Vec<T>> {
    check_sampleable(fm.dims())?;
    let st = stencil(fm.dims(), coord);
    Ok((0..fm.channels()).map(|c| st.apply(fm.channel(c))).collect())
}

pub(crate) fn pool2x_forward<T: Real>(data: &[T], channels: usize, dims: Dims) -> (Vec<T>, Dims) {
    let out_dims = dims.halved();
    let (n_in, n_out) = (dims.len(), out_dims.len());
    let mut out = vec![T::zero(); channels * n_out];
    let eighth = T::lit(0.125);
    for c in 0..channels {
        let src = &data[c * n_in..(c + 1) * n_in];
        let dst = &mut out[c * n_out..(c + 1) * n_out];
        for (o, (x, y, z)) in out_dims.coords().enumerate() {
            let mut acc = T::zero();
            for idx in pool_block(dims, x, y, z) {
                acc += src[idx];
            }
            dst[o] = acc * eighth;
        }
    }
    (out, out_dims)
}

pub(crate) fn pool2x_backward<T: Real>(grad: &[T], channels: usize, dims: Dims) -> Vec<T> {
    let out_dims = dims.halved();
    let (n_in, n_out) = (dims.len(), out_dims.len());
    let mut gin = vec![T::zero(); channels * n_in];
    let eighth = T::lit(0.125);
    for c in 0..channels {
        let g = &grad[c * n_out..(c + 1) * n_out];
        let dst = &mut gin[c * n_in..(c + 1) * n_in];
        for (o, (x, y, z)) in out_dims.coords().enumerate() {
            let v = g[o] * eighth;
            for idx in pool_block(dims, x, y, z) {
                dst[idx] += v;
            }
        }
    }
    gin
}

/// Input indices of the 2x2x2 block under output voxel `(x, y, z)`; odd
/// extents replicate the last slice.
#[inline(always)]
fn pool_block(dims: Dims, x: usize, y: usize, z: usize) -> [usize; 8] {
    let xs = [2 * x, (2 * x + 1).min(dims.nx - 1)];
    let ys = [2 * y, (2 * y + 1).min(dims.ny - 1)];
    let zs = [2 * z, (2 * z + 1).min(dims.nz - 1)];
    let mut idx = [0usize; 8];
    for k in 0..8 {
        idx[k] = dims.index(xs[k & 1], ys[(k >> 1) & 1], zs[k >> 2]);
    }
    idx
}

/// Mean over each 2x2x2 block; odd extents are replicate-padded first.
pub fn avg_pool_2x<T: Real>(fm: &FeatureMap<T>) -> FeatureMap<T> {
    let (data, dims) = pool2x_forward(fm.data(), fm.channels(), fm.dims());
    FeatureMap::from_raw(fm.channels(), dims, data)
}

pub(crate) fn check_upsample_target(from: Dims, to: Dims) -> Result<()> {
    let ok = from
        .as_array()
        .iter()
        .zip(to.as_array())
        .all(|(&f, t)| t + 1 >= 2 * f && t <= 2 * f + 1 && t > 0);
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "cannot upsample {from} by 2 to {to}: each axis must be 2n or 2n±1"
        )))
    }
}

fn upsample_cells<T: Real>(from: Dims, to: Dims) -> [Vec<AxisCell<T>>; 3] {
    let half = T::lit(0.5);
    let axis = |a: usize| -> Vec<AxisCell<T>> {
        (0..to.axis(a))
            .map(|i| axis_cell(T::from_usize(i) * half, from.axis(a)))
            .collect()
    };
    [axis(0), axis(1), axis(2)]
}

/// Sample a coarse multi-channel grid at `target` voxel `i` -> coarse `i / 2`
/// and multiply by `factor`.
pub(crate) fn upsample2x_forward<T: Real>(
    data: &[T],
    channels: usize,
    from: Dims,
    to: Dims,
    factor: T,
) -> Vec<T> {
    let cells = upsample_cells::<T>(from, to);
    let (n_in, n_out) = (from.len(), to.len());
    let mut out = vec![T::zero(); channels * n_out];
    for (o, (x, y, z)) in to.coords().enumerate() {
        let st = stencil_from_cells(from, &cells[0][x], &cells[1][y], &cells[2][z]);
        for c in 0..channels {
            out[c * n_out + o] = factor * st.apply(&data[c * n_in..(c + 1) * n_in]);
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(
    grad: &[T],
    channels: usize,
    from: Dims,
    to: Dims,
    factor: T,
) -> Vec<T> {
    let cells = upsample_cells::<T>(from, to);
    let (n_in, n_out) = (from.len(), to.len());
    let mut gin = vec![T::zero(); channels * n_in];
    for (o, (x, y, z)) in to.coords().enumerate() {
        let st = stencil_from_cells(from, &cells[0][x], &cells[1][y], &cells[2][z]);
        for c in 0..channels {
            st.scatter(&mut gin[c * n_in..(c + 1) * n_in], factor * grad[c * n_out + o]);
        }
    }
    gin
}

/// Trilinearly upsample a displacement field to `target` and double every
/// vector, since displacements are measured in voxels of their own grid.
pub fn upsample_field_2x<T: Real>(f: &DisplacementField<T>, target: Dims) -> Result<DisplacementField<T>> {
    check_upsample_target(f.dims(), target)?;
    let data = upsample2x_forward(f.data(), 3, f.dims(), target, T::lit(2.0));
    Ok(DisplacementField::from_raw(target, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: Dims, seed: u64) -> Volume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0))
    }

    /// Independent reference: floor-based lerp chain with explicit clamping.
    fn reference_sample(v: &Volume<f64>, c: [f64; 3]) -> f64 {
        let d = v.dims().as_array();
        let mut lo = [0usize; 3];
        let mut fr = [0.0; 3];
        for a in 0..3 {
            let x = c[a].clamp(0.0, (d[a] - 1) as f64);
            let i = (x.floor() as usize).min(d[a] - 2);
            lo[a] = i;
            fr[a] = x - i as f64;
        }
        let g = |dx: usize, dy: usize, dz: usize| v.at(lo[0] + dx, lo[1] + dy, lo[2] + dz);
        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
        let c00 = lerp(g(0, 0, 0), g(1, 0, 0), fr[0]);
        let c10 = lerp(g(0, 1, 0), g(1, 1, 0), fr[0]);
        let c01 = lerp(g(0, 0, 1), g(1, 0, 1), fr[0]);
        let c11 = lerp(g(0, 1, 1), g(1, 1, 1), fr[0]);
        lerp(lerp(c00, c10, fr[1]), lerp(c01, c11, fr[1]), fr[2])
    }

    #[test]
    fn exact_on_lattice_points() {
        let v = random_volume(Dims::new(4, 3, 5), 1).cast::<f32>();
        for (x, y, z) in v.dims().coords() {
            let s = trilinear_sample(&v, [x as f32, y as f32, z as f32]).unwrap();
            assert_eq!(s, v.at(x, y, z));
        }
    }

    #[test]
    fn midpoint_is_mean() {
        let v = random_volume(Dims::cube(3), 2);
        let s = trilinear_sample(&v, [0.5, 1.0, 2.0]).unwrap();
        assert!((s - 0.5 * (v.at(0, 1, 2) + v.at(1, 1, 2))).abs() < 1e-15);
    }

    #[test]
    fn clamps_to_edge() {
        let v = random_volume(Dims::cube(3), 3);
        let a = trilinear_sample(&v, [-5.0, 0.0, 0.0]).unwrap();
        assert_eq!(a, v.at(0, 0, 0));
        let b = trilinear_sample(&v, [9.0, 2.0, 1.0]).unwrap();
        assert_eq!(b, v.at(2, 2, 1));
    }

    #[test]
    fn degenerate_dims_rejected() {
        let v = Volume::<f32>::zeros(Dims::new(1, 4, 4));
        assert!(matches!(
            trilinear_sample(&v, [0.0; 3]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn matches_reference_sampler() {
        let v = random_volume(Dims::new(5, 4, 6), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let c = [
                rng.random_range(-1.0..5.0),
                rng.random_range(-1.0..4.0),
                rng.random_range(-1.0..6.0),
            ];
            let got = trilinear_sample(&v, c).unwrap();
            assert!((got - reference_sample(&v, c)).abs() < 1e-12, "{c:?}");
        }
    }

    #[test]
    fn pool_constant_and_block_mean() {
        let fm = FeatureMap::new(1, Dims::cube(4), vec![2.5f32; 64]).unwrap();
        let p = avg_pool_2x(&fm);
        assert_eq!(p.dims(), Dims::cube(2));
        assert!(p.data().iter().all(|&v| v == 2.5));

        let block = FeatureMap::new(1, Dims::cube(2), (0..8).map(|v| v as f32).collect()).unwrap();
        assert_eq!(avg_pool_2x(&block).data(), &[3.5]);
    }

    #[test]
    fn pool_matches_direct_block_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dims = Dims::cube(4);
        let data: Vec<f64> = (0..2 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fm = FeatureMap::new(2, dims, data).unwrap();
        let p = avg_pool_2x(&fm);
        for c in 0..2 {
            for (x, y, z) in Dims::cube(2).coords() {
                let mut s = 0.0;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += fm.at(c, 2 * x + dx, 2 * y + dy, 2 * z + dz);
                        }
                    }
                }
                assert!((p.at(c, x, y, z) - s / 8.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pool_replicates_odd_slice() {
        let fm = FeatureMap::new(1, Dims::new(3, 1, 1), vec![1.0f64, 2.0, 5.0]).unwrap();
        let p = avg_pool_2x(&fm);
        assert_eq!(p.dims(), Dims::new(2, 1, 1));
        assert_eq!(p.data(), &[1.5, 5.0]);
    }

    #[test]
    fn upsample_zero_and_constant() {
        let z = DisplacementField::<f32>::identity(Dims::cube(4));
        assert_eq!(upsample_field_2x(&z, Dims::cube(8)).unwrap().max_abs(), 0.0);

        let c = DisplacementField::constant(Dims::cube(4), [1.0f32, 0.0, 0.0]);
        let u = upsample_field_2x(&c, Dims::cube(8)).unwrap();
        assert_eq!(u.dims(), Dims::cube(8));
        assert!(u.component(0).iter().all(|&v| v == 2.0));
        assert!(u.component(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_rejects_bad_target() {
        let c = DisplacementField::<f32>::identity(Dims::cube(4));
        assert!(upsample_field_2x(&c, Dims::cube(11)).is_err());
        assert!(upsample_field_2x(&c, Dims::new(7, 8, 9)).is_ok());
    }

    #[test]
    fn upsample_ramp_matches_brute_force() {
        let from = Dims::new(3, 4, 2);
        let to = Dims::new(6, 7, 5);
        let f = DisplacementField::from_fn(from, |x, y, z| {
            [x as f64 + 0.5 * y as f64, -(z as f64), 0.25 * (x * y) as f64]
        });
        let u = upsample_field_2x(&f, to).unwrap();
        for c in 0..3 {
            let comp = Volume::new(from, [1.0; 3], f.component(c).to_vec()).unwrap();
            for (x, y, z) in to.coords() {
                let expect = 2.0 * reference_sample(&comp, [x as f64 / 2.0, y as f64 / 2.0, z as f64 / 2.0]);
                let got = u.component(c)[to.index(x, y, z)];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn sampling_is_linear_in_data(seed in 0u64..1000, a in -3.0f32..3.0, b in -3.0f32..3.0,
                                      cx in -1.0f32..5.0, cy in -1.0f32..5.0, cz in -1.0f32..5.0) {
            let dims = Dims::cube(4);
            let v1 = random_volume(dims, seed).cast::<f32>();
            let v2 = random_volume(dims, seed + 7919).cast::<f32>();
            let mix = Volume::new(dims, [1.0; 3],
                v1.data().iter().zip(v2.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let c = [cx, cy, cz];
            let lhs = trilinear_sample(&mix, c).unwrap();
            let rhs = a * trilinear_sample(&v1, c).unwrap() + b * trilinear_sample(&v2, c).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-5 * (1.0 + rhs.abs()));
        }

        #[test]
        fn pool_preserves_mean(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..3 * 8 * 4 * 6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let fm = FeatureMap::new(3, Dims::new(8, 4, 6), data).unwrap();
            let p = avg_pool_2x(&fm);
            let m_in: f64 = fm.data().iter().map(|&v| v as f64).sum::<f64>() / fm.data().len() as f64;
            let m_out: f64 = p.data().iter().map(|&v| v as f64).sum::<f64>() / p.data().len() as f64;
            prop_assert!((m_in - m_out).abs() <= 1e-6 * (1.0 + m_in.abs()));
        }

        #[test]
        fn upsample_then_stride_recovers_field(seed in 0u64..1000, odd in proptest::bool::ANY) {
            let from = Dims::new(4, 3, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = DisplacementField::<f32>::from_fn(from, |_, _, _| {
                [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]
            });
            let to = if odd { Dims::new(7, 5, 9) } else { Dims::new(8, 6, 10) };
            let u = upsample_field_2x(&f, to).unwrap();
            for c in 0..3 {
                for (x, y, z) in from.coords() {
                    let back = u.component(c)[to.index(2 * x, 2 * y, 2 * z)] * 0.5;
                    prop_assert!((back - f.component(c)[from.index(x, y, z)]).abs() <= 1e-5);
                }
            }
        }
    }
}
