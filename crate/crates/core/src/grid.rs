//! Dense 3D grids: scalar volumes, multi-channel feature maps and
//! displacement fields.
//!
//! Storage is row-major with `x` fastest, so voxel `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`. Multi-channel data is channel-major.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Real, Result};

/// Voxel counts along x, y and z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub const fn axis(&self, axis: usize) -> usize {
        match axis {
            0 => self.nx,
            1 => self.ny,
            _ => self.nz,
        }
    }

    pub fn min_extent(&self) -> usize {
        self.nx.min(self.ny).min(self.nz)
    }

    #[inline(always)]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    /// Linear stride of one step along `axis`.
    pub const fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.nx,
            _ => self.nx * self.ny,
        }
    }

    /// Dims after one 2x pooling step (odd extents round up).
    pub const fn halved(&self) -> Self {
        Dims::new(self.nx.div_ceil(2), self.ny.div_ceil(2), self.nz.div_ceil(2))
    }

    /// Iterate `(x, y, z)` in storage order.
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize, usize)> {
        let (nx, ny, nz) = (self.nx, self.ny, self.nz);
        (0..nz).flat_map(move |z| (0..ny).flat_map(move |y| (0..nx).map(move |x| (x, y, z))))
    }
}

impl core::fmt::Display for Dims {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

pub(crate) fn check_finite<T: Real>(data: &[T], what: &'static str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::non_finite(what, format!("element {i} is {}", data[i]))),
    }
}

/// Scalar 3D image with physical voxel spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::invalid(format!(
                "volume data has {} scalars, dims {dims} need {}",
                data.len(),
                dims.len()
            )));
        }
        check_finite(&data, "volume")?;
        Ok(Volume { dims, spacing, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Volume {
            dims,
            spacing: [1.0; 3],
            data: vec![T::zero(); dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let data = dims.coords().map(|(x, y, z)| f(x, y, z)).collect();
        Volume {
            dims,
            spacing: [1.0; 3],
            data,
        }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::from_usize(self.data.len())
    }

    /// Single-channel feature-map view of this volume (copies the data).
    pub fn to_feature_map(&self) -> FeatureMap<T> {
        FeatureMap {
            channels: 1,
            dims: self.dims,
            data: self.data.clone(),
        }
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Multi-channel 3D grid, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    channels: usize,
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, dims: Dims, data: Vec<T>) -> Result<Self> {
        if channels == 0 || data.len() != channels * dims.len() {
            return Err(Error::invalid(format!(
                "feature map data has {} scalars, {channels} channels of {dims} need {}",
                data.len(),
                channels * dims.len()
            )));
        }
        check_finite(&data, "feature map")?;
        Ok(FeatureMap { channels, dims, data })
    }

    pub fn zeros(channels: usize, dims: Dims) -> Self {
        FeatureMap {
            channels,
            dims,
            data: vec![T::zero(); channels * dims.len()],
        }
    }

    pub(crate) fn from_raw(channels: usize, dims: Dims, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), channels * dims.len());
        FeatureMap { channels, dims, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, x: usize, y: usize, z: usize) -> T {
        self.data[c * self.dims.len() + self.dims.index(x, y, z)]
    }
}

/// Per-voxel displacement in voxels of the field's own grid.
///
/// Component 0 displaces along x, 1 along y and 2 along z; the data is stored
/// as three channel-major planes.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> DisplacementField<T> {
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != 3 * dims.len() {
            return Err(Error::invalid(format!(
                "displacement field has {} scalars, dims {dims} need {}",
                data.len(),
                3 * dims.len()
            )));
        }
        check_finite(&data, "displacement field")?;
        Ok(DisplacementField { dims, data })
    }

    pub fn identity(dims: Dims) -> Self {
        DisplacementField {
            dims,
            data: vec![T::zero(); 3 * dims.len()],
        }
    }

    pub fn constant(dims: Dims, v: [T; 3]) -> Self {
        let n = dims.len();
        let mut data = Vec::with_capacity(3 * n);
        for c in v {
            data.extend(core::iter::repeat_n(c, n));
        }
        DisplacementField { dims, data }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> [T; 3]) -> Self {
        let n = dims.len();
        let mut data = vec![T::zero(); 3 * n];
        for (i, (x, y, z)) in dims.coords().enumerate() {
            let v = f(x, y, z);
            data[i] = v[0];
            data[n + i] = v[1];
            data[2 * n + i] = v[2];
        }
        DisplacementField { dims, data }
    }

    pub(crate) fn from_raw(dims: Dims, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), 3 * dims.len());
        DisplacementField { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn component(&self, c: usize) -> &[T] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> [T; 3] {
        let n = self.dims.len();
        let i = self.dims.index(x, y, z);
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    /// Largest absolute component over the whole field.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Largest per-voxel vector length.
    pub fn max_norm(&self) -> T {
        (0..self.dims.len())
            .map(|i| self.norm_at(i))
            .fold(T::zero(), |m, v| m.max(v))
    }

    pub(crate) fn norm_at(&self, i: usize) -> T {
        let n = self.dims.len();
        let (a, b, c) = (self.data[i], self.data[n + i], self.data[2 * n + i]);
        (a * a + b * b + c * c).sqrt()
    }

    pub fn scaled(&self, factor: T) -> Self {
        DisplacementField {
            dims: self.dims,
            data: self.data.iter().map(|&v| v * factor).collect(),
        }
    }

    pub fn to_feature_map(&self) -> FeatureMap<T> {
        FeatureMap::from_raw(3, self.dims, self.data.clone())
    }

    pub fn cast<U: Real>(&self) -> DisplacementField<U> {
        DisplacementField {
            dims: self.dims,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}
