//! Encoder building blocks: zero-padded 3x3x3 convolution, instance
//! normalization and leaky ReLU.
//!
//! The convolution works on a copy of the input padded by one voxel on every
//! side. In that layout each of the 27 taps is a constant linear offset, so a
//! whole (output channel, input channel, tap) triple is one contiguous axpy.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::vecops::{axpy, dot, sum};
use crate::{Dims, Error, FeatureMap, Real, Result};

pub const TAPS: usize = 27;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Tap index `t` covers offset `(t % 3 - 1, t / 3 % 3 - 1, t / 9 - 1)`.
pub fn tap_offset(t: usize) -> [isize; 3] {
    [(t % 3) as isize - 1, (t / 3 % 3) as isize - 1, (t / 9) as isize - 1]
}

/// A 3x3x3 convolution: weights `[out][in][27]` and one bias per output.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvKernel<T> {
    pub fn new(in_channels: usize, out_channels: usize, weight: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weight.len() != in_channels * out_channels * TAPS || bias.len() != out_channels {
            return Err(Error::invalid(format!(
                "conv kernel {in_channels}->{out_channels} needs {} weights and {out_channels} biases, got {} and {}",
                in_channels * out_channels * TAPS,
                weight.len(),
                bias.len()
            )));
        }
        Ok(ConvKernel {
            in_channels,
            out_channels,
            weight,
            bias,
        })
    }

    /// Center tap 1 between matching channels, everything else 0.
    pub fn identity(channels: usize) -> Self {
        let mut weight = vec![T::zero(); channels * channels * TAPS];
        for c in 0..channels {
            weight[(c * channels + c) * TAPS + 13] = T::one();
        }
        ConvKernel {
            in_channels: channels,
            out_channels: channels,
            weight,
            bias: vec![T::zero(); channels],
        }
    }
}

/// Geometry of the one-voxel padded layout.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Padding {
    dims: Dims,
    padded: Dims,
    /// First and one-past-last padded index that can hold an interior voxel.
    start: usize,
    end: usize,
    offsets: [isize; TAPS],
}

impl Padding {
    pub fn new(dims: Dims) -> Self {
        let padded = Dims::new(dims.nx + 2, dims.ny + 2, dims.nz + 2);
        let start = padded.index(1, 1, 1);
        let end = padded.index(dims.nx, dims.ny, dims.nz) + 1;
        let mut offsets = [0isize; TAPS];
        for (t, o) in offsets.iter_mut().enumerate() {
            let [dx, dy, dz] = tap_offset(t);
            *o = dx + padded.nx as isize * (dy + padded.ny as isize * dz);
        }
        Padding {
            dims,
            padded,
            start,
            end,
            offsets,
        }
    }

    fn plen(&self) -> usize {
        self.padded.len()
    }

    pub fn pad<T: Real>(&self, data: &[T], channels: usize) -> Vec<T> {
        let (n, p) = (self.dims.len(), self.plen());
        let nx = self.dims.nx;
        let mut out = vec![T::zero(); channels * p];
        for c in 0..channels {
            let src = &data[c * n..(c + 1) * n];
            let dst = &mut out[c * p..(c + 1) * p];
            for z in 0..self.dims.nz {
                for y in 0..self.dims.ny {
                    let s = self.dims.index(0, y, z);
                    let d = self.padded.index(1, y + 1, z + 1);
                    dst[d..d + nx].copy_from_slice(&src[s..s + nx]);
                }
            }
        }
        out
    }

    pub fn unpad<T: Real>(&self, data: &[T], channels: usize) -> Vec<T> {
        let (n, p) = (self.dims.len(), self.plen());
        let nx = self.dims.nx;
        let mut out = vec![T::zero(); channels * n];
        for c in 0..channels {
            let src = &data[c * p..(c + 1) * p];
            let dst = &mut out[c * n..(c + 1) * n];
            for z in 0..self.dims.nz {
                for y in 0..self.dims.ny {
                    let s = self.padded.index(1, y + 1, z + 1);
                    let d = self.dims.index(0, y, z);
                    dst[d..d + nx].copy_from_slice(&src[s..s + nx]);
                }
            }
        }
        out
    }

    #[inline(always)]
    fn span(&self, t: usize) -> usize {
        (self.start as isize + self.offsets[t]) as usize
    }
}

pub(crate) fn conv3_forward<T: Real>(
    input: &[T],
    cin: usize,
    dims: Dims,
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    let pad = Padding::new(dims);
    let pin = pad.pad(input, cin);
    let p = pad.plen();
    let len = pad.end - pad.start;
    let mut pout = vec![T::zero(); cout * p];
    for co in 0..cout {
        let out = &mut pout[co * p + pad.start..co * p + pad.end];
        for ci in 0..cin {
            let base = ci * p;
            let w = &weight[(co * cin + ci) * TAPS..(co * cin + ci + 1) * TAPS];
            for (t, &wt) in w.iter().enumerate() {
                if wt != T::zero() {
                    let s = base + pad.span(t);
                    axpy(out, wt, &pin[s..s + len]);
                }
            }
        }
    }
    let mut out = pad.unpad(&pout, cout);
    let n = dims.len();
    for co in 0..cout {
        for v in &mut out[co * n..(co + 1) * n] {
            *v += bias[co];
        }
    }
    out
}

/// Gradient of the convolution with respect to its input.
pub(crate) fn conv3_backward_input<T: Real>(
    grad: &[T],
    cout: usize,
    dims: Dims,
    weight: &[T],
    cin: usize,
) -> Vec<T> {
    let pad = Padding::new(dims);
    let pg = pad.pad(grad, cout);
    let p = pad.plen();
    let len = pad.end - pad.start;
    let mut pgin = vec![T::zero(); cin * p];
    for ci in 0..cin {
        let gin = &mut pgin[ci * p..(ci + 1) * p];
        for co in 0..cout {
            let g = &pg[co * p + pad.start..co * p + pad.end];
            let w = &weight[(co * cin + ci) * TAPS..(co * cin + ci + 1) * TAPS];
            for (t, &wt) in w.iter().enumerate() {
                let s = pad.span(t);
                axpy(&mut gin[s..s + len], wt, g);
            }
        }
    }
    pad.unpad(&pgin, cin)
}

/// Gradients of the convolution with respect to weights and biases.
pub(crate) fn conv3_backward_params<T: Real>(
    grad: &[T],
    cout: usize,
    input: &[T],
    cin: usize,
    dims: Dims,
) -> (Vec<T>, Vec<T>) {
    let pad = Padding::new(dims);
    let pg = pad.pad(grad, cout);
    let pin = pad.pad(input, cin);
    let p = pad.plen();
    let len = pad.end - pad.start;
    let mut gw = vec![T::zero(); cout * cin * TAPS];
    for co in 0..cout {
        let g = &pg[co * p + pad.start..co * p + pad.end];
        for ci in 0..cin {
            for t in 0..TAPS {
                let s = ci * p + pad.span(t);
                gw[(co * cin + ci) * TAPS + t] = dot(g, &pin[s..s + len]);
            }
        }
    }
    let n = dims.len();
    let gb = (0..cout).map(|co| sum(&grad[co * n..(co + 1) * n])).collect();
    (gw, gb)
}

/// Zero-padded, stride-1, shape-preserving 3x3x3 convolution.
pub fn conv3<T: Real>(fm: &FeatureMap<T>, k: &ConvKernel<T>) -> Result<FeatureMap<T>> {
    if fm.channels() != k.in_channels {
        return Err(Error::invalid(format!(
            "conv kernel expects {} input channels, feature map has {}",
            k.in_channels,
            fm.channels()
        )));
    }
    let out = conv3_forward(fm.data(), k.in_channels, fm.dims(), &k.weight, &k.bias, k.out_channels);
    Ok(FeatureMap::from_raw(k.out_channels, fm.dims(), out))
}

pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn instance_norm_forward<T: Real>(
    input: &[T],
    channels: usize,
    n: usize,
    scale: &[T],
    shift: &[T],
) -> (Vec<T>, NormStats<T>) {
    let eps = T::lit(INSTANCE_NORM_EPS);
    let inv_n = T::one() / T::from_usize(n);
    let mut out = vec![T::zero(); channels * n];
    let mut mean = Vec::with_capacity(channels);
    let mut inv_std = Vec::with_capacity(channels);
    for c in 0..channels {
        let x = &input[c * n..(c + 1) * n];
        let m = sum(x) * inv_n;
        let var = x.iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv_n;
        let inv = T::one() / (var + eps).sqrt();
        let (a, b) = (scale[c], shift[c]);
        for (o, &v) in out[c * n..(c + 1) * n].iter_mut().zip(x) {
            *o = a * ((v - m) * inv) + b;
        }
        mean.push(m);
        inv_std.push(inv);
    }
    (out, NormStats { mean, inv_std })
}

/// Returns (input grad, scale grad, shift grad).
pub(crate) fn instance_norm_backward<T: Real>(
    grad: &[T],
    input: &[T],
    channels: usize,
    n: usize,
    scale: &[T],
    stats: &NormStats<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); channels * n];
    let mut gscale = Vec::with_capacity(channels);
    let mut gshift = Vec::with_capacity(channels);
    let inv_n = T::one() / T::from_usize(n);
    for c in 0..channels {
        let (m, inv) = (stats.mean[c], stats.inv_std[c]);
        let x = &input[c * n..(c + 1) * n];
        let g = &grad[c * n..(c + 1) * n];
        let mut sg = T::zero();
        let mut sgx = T::zero();
        for (&gi, &xi) in g.iter().zip(x) {
            sg += gi;
            sgx += gi * (xi - m) * inv;
        }
        gscale.push(sgx);
        gshift.push(sg);
        let k = scale[c] * inv;
        for ((o, &gi), &xi) in gx[c * n..(c + 1) * n].iter_mut().zip(g).zip(x) {
            let xhat = (xi - m) * inv;
            *o = k * (gi - sg * inv_n - xhat * sgx * inv_n);
        }
    }
    (gx, gscale, gshift)
}

/// Per-channel `scale * (x - mean) / sqrt(var + 1e-5) + shift`, statistics over
/// all voxels of the channel.
pub fn instance_norm<T: Real>(fm: &FeatureMap<T>, scale: &[T], shift: &[T]) -> Result<FeatureMap<T>> {
    let c = fm.channels();
    if scale.len() != c || shift.len() != c {
        return Err(Error::invalid(format!(
            "instance norm affine has {}/{} entries for {c} channels",
            scale.len(),
            shift.len()
        )));
    }
    let (out, _) = instance_norm_forward(fm.data(), c, fm.dims().len(), scale, shift);
    Ok(FeatureMap::from_raw(c, fm.dims(), out))
}

#[inline(always)]
pub(crate) fn leaky<T: Real>(v: T, slope: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * slope
    }
}

/// Derivative at exactly 0 takes the negative-side branch.
#[inline(always)]
pub(crate) fn leaky_grad<T: Real>(v: T, slope: T) -> T {
    if v > T::zero() {
        T::one()
    } else {
        slope
    }
}

pub fn leaky_relu<T: Real>(fm: &FeatureMap<T>, slope: T) -> FeatureMap<T> {
    let data = fm.data().iter().map(|&v| leaky(v, slope)).collect();
    FeatureMap::from_raw(fm.channels(), fm.dims(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(channels: usize, dims: Dims, seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * dims.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMap::new(channels, dims, data).unwrap()
    }

    /// Six nested loops over output voxel, input channel and tap.
    fn brute_conv(fm: &FeatureMap<f64>, k: &ConvKernel<f64>) -> Vec<f64> {
        let d = fm.dims();
        let mut out = vec![0.0; k.out_channels * d.len()];
        for co in 0..k.out_channels {
            for (x, y, z) in d.coords() {
                let mut acc = k.bias[co];
                for ci in 0..k.in_channels {
                    for kz in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sx, sy, sz) = (x as isize + kx - 1, y as isize + ky - 1, z as isize + kz - 1);
                                if sx < 0 || sy < 0 || sz < 0 || sx >= d.nx as isize || sy >= d.ny as isize || sz >= d.nz as isize {
                                    continue;
                                }
                                let t = (kx + 3 * ky + 9 * kz) as usize;
                                acc += k.weight[(co * k.in_channels + ci) * TAPS + t]
                                    * fm.at(ci, sx as usize, sy as usize, sz as usize);
                            }
                        }
                    }
                }
                out[co * d.len() + d.index(x, y, z)] = acc;
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let fm = random_map(3, Dims::new(4, 5, 3), 1);
        let out = conv3(&fm, &ConvKernel::identity(3)).unwrap();
        assert_eq!(out.data(), fm.data());
    }

    #[test]
    fn all_ones_kernel_on_constant_interior() {
        let fm = FeatureMap::new(1, Dims::cube(5), vec![1.5f32; 125]).unwrap();
        let k = ConvKernel::new(1, 1, vec![1.0; 27], vec![0.0]).unwrap();
        let out = conv3(&fm, &k).unwrap();
        assert_eq!(out.at(0, 2, 2, 2), 27.0 * 1.5);
        // a corner only sees 8 in-bounds taps
        assert_eq!(out.at(0, 0, 0, 0), 8.0 * 1.5);
    }

    #[test]
    fn random_kernel_matches_brute_force() {
        let fm = random_map(1, Dims::cube(5), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = ConvKernel::new(
            1,
            2,
            (0..54).map(|_| rng.random_range(-1.0..1.0)).collect(),
            vec![0.3, -0.2],
        )
        .unwrap();
        let out = conv3(&fm, &k).unwrap();
        for (a, b) in out.data().iter().zip(brute_conv(&fm, &k)) {
            assert!((a - b).abs() < 1e-12);
        }
        // anisotropic grid with more channels
        let fm = random_map(3, Dims::new(6, 2, 4), 4);
        let k = ConvKernel::new(
            3,
            2,
            (0..3 * 2 * 27).map(|_| rng.random_range(-1.0..1.0)).collect(),
            vec![0.0, 1.0],
        )
        .unwrap();
        for (a, b) in conv3(&fm, &k).unwrap().data().iter().zip(brute_conv(&fm, &k)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let fm = random_map(2, Dims::cube(3), 5);
        assert!(conv3(&fm, &ConvKernel::identity(3)).is_err());
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let fm = FeatureMap::new(1, Dims::cube(3), vec![4.0f32; 27]).unwrap();
        let out = instance_norm(&fm, &[1.0], &[0.0]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_plus_minus_one() {
        let fm = FeatureMap::new(1, Dims::new(2, 1, 1), vec![-1.0f64, 1.0]).unwrap();
        let out = instance_norm(&fm, &[1.0], &[0.0]).unwrap();
        // var = 1, so the output is ±1/sqrt(1 + 1e-5)
        let delta = 1.0 - 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!(delta <= 1e-4);
        assert!((out.data()[0] - (-1.0 + delta)).abs() < 1e-15);
        assert!((out.data()[1] - (1.0 - delta)).abs() < 1e-15);
    }

    #[test]
    fn instance_norm_zero_scale_gives_shift() {
        let fm = random_map(2, Dims::cube(3), 6);
        let out = instance_norm(&fm, &[0.0, 0.0], &[0.7, -2.0]).unwrap();
        assert!(out.channel(0).iter().all(|&v| v == 0.7));
        assert!(out.channel(1).iter().all(|&v| v == -2.0));
    }

    #[test]
    fn leaky_relu_slope() {
        let fm = FeatureMap::new(1, Dims::new(3, 1, 1), vec![-2.0f32, 0.0, 3.0]).unwrap();
        assert_eq!(leaky_relu(&fm, 0.2).data(), &[-0.4, 0.0, 3.0]);
        assert_eq!(leaky_grad(0.0f32, 0.2), 0.2);
    }
}
