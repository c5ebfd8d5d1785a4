//! Label-overlap and surface-distance metrics for evaluating a registration.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

pub use crate::field::{folding_ratio, jacobian_determinant};
use crate::{Dims, DisplacementField, Error, Real, Result};

/// Integer segmentation on a grid; label 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(dims: Dims, data: Vec<u16>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::invalid(format!(
                "label data has {} voxels, dims {} need {}",
                data.len(),
                dims,
                dims.len()
            )));
        }
        Ok(LabelVolume { dims, spacing: [1.0; 3], data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> u16) -> Self {
        let data = dims.coords().map(|(x, y, z)| f(x, y, z)).collect();
        LabelVolume { dims, spacing: [1.0; 3], data }
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

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u16> {
        self.data
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> u16 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Distinct non-zero labels in increasing order.
    pub fn labels(&self) -> Vec<u16> {
        let set: BTreeSet<u16> = self.data.iter().copied().filter(|&l| l != 0).collect();
        set.into_iter().collect()
    }

    pub fn mask(&self, label: u16) -> Vec<bool> {
        self.data.iter().map(|&l| l == label).collect()
    }

    pub fn count(&self, label: u16) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }
}

fn check_same(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::invalid(format!("label volumes differ in shape: {} vs {}", a.dims, b.dims)));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)` for one label; 1 when the label is absent from both.
pub fn dice(a: &LabelVolume, b: &LabelVolume, label: u16) -> Result<f64> {
    check_same(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Mean Dice over the non-zero labels present in either volume; 1 if there
/// are none.
pub fn mean_dice(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    check_same(a, b)?;
    let labels: BTreeSet<u16> = a.labels().into_iter().chain(b.labels()).collect();
    if labels.is_empty() {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for &l in &labels {
        total += dice(a, b, l)?;
    }
    Ok(total / labels.len() as f64)
}

/// Foreground voxels with a background face neighbor or lying on the grid
/// border.
pub fn surface_voxels(mask: &[bool], dims: Dims) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, (x, y, z)) in dims.coords().enumerate() {
        if !mask[i] {
            continue;
        }
        let pos = [x, y, z];
        let boundary = (0..3).any(|a| {
            let s = dims.stride(a);
            pos[a] == 0 || pos[a] + 1 == dims.axis(a) || !mask[i - s] || !mask[i + s]
        });
        if boundary {
            out.push(i);
        }
    }
    out
}

/// Directed distances from every surface voxel of `a` to the nearest surface
/// voxel of `b`, followed by the reverse direction.
pub fn pooled_surface_distances(a: &LabelVolume, b: &LabelVolume, label: u16, spacing: [f64; 3]) -> Result<Vec<f64>> {
    check_same(a, b)?;
    let dims = a.dims;
    let sa = surface_voxels(&a.mask(label), dims);
    let sb = surface_voxels(&b.mask(label), dims);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::UndefinedMetric(format!("label {label} is empty in at least one volume")));
    }
    let mut out = directed(&sa, &sb, dims, spacing);
    out.extend(directed(&sb, &sa, dims, spacing));
    Ok(out)
}

/// Pair count above which the exact distance transform replaces the
/// all-pairs search.
const BRUTE_FORCE_PAIRS: usize = 1 << 22;

fn directed(from: &[usize], to: &[usize], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    if from.len() * to.len() <= BRUTE_FORCE_PAIRS {
        let pts: Vec<[f64; 3]> = to.iter().map(|&j| scaled_coords(dims, j, spacing)).collect();
        from.iter()
            .map(|&i| {
                let p = scaled_coords(dims, i, spacing);
                let best = pts
                    .iter()
                    .map(|q| (0..3).map(|a| Float::powi(p[a] - q[a], 2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                best.sqrt()
            })
            .collect()
    } else {
        let mut seeds = vec![false; dims.len()];
        for &j in to {
            seeds[j] = true;
        }
        let d2 = squared_edt(&seeds, dims, spacing);
        from.iter().map(|&i| Float::sqrt(d2[i])).collect()
    }
}

fn scaled_coords(dims: Dims, i: usize, spacing: [f64; 3]) -> [f64; 3] {
    let x = i % dims.nx;
    let y = (i / dims.nx) % dims.ny;
    let z = i / (dims.nx * dims.ny);
    [x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]]
}

/// Exact squared Euclidean distance to the nearest seed voxel, by separable
/// lower envelopes of parabolas.
pub fn squared_edt(seeds: &[bool], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let mut f = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let len = dims.axis(axis);
        let stride = dims.stride(axis);
        let others: Vec<usize> = (0..dims.len()).filter(|&i| axis_coord(dims, i, axis) == 0).collect();
        for start in others {
            f.clear();
            f.extend((0..len).map(|k| d[start + k * stride]));
            envelope_1d(&f, spacing[axis], &mut out);
            for k in 0..len {
                d[start + k * stride] = out[k];
            }
        }
    }
    d
}

fn axis_coord(dims: Dims, i: usize, axis: usize) -> usize {
    match axis {
        0 => i % dims.nx,
        1 => (i / dims.nx) % dims.ny,
        _ => i / (dims.nx * dims.ny),
    }
}

fn envelope_1d(f: &[f64], h: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let finite: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if finite.is_empty() {
        return;
    }
    let pos = |q: usize| q as f64 * h;
    let meet = |p: usize, q: usize| ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
    let mut v: Vec<usize> = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    for &q in &finite {
        while let Some(&last) = v.last() {
            let s = meet(last, q);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        }
    }
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < pos(q) {
            k += 1;
        }
        let p = v[k];
        out[q] = Float::powi(pos(q) - pos(p), 2) + f[p];
    }
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = Float::floor(rank) as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let t = rank - lo as f64;
    values[lo] + t * (values[hi] - values[lo])
}

/// 95th percentile of the pooled two-way surface distances, in mm.
pub fn hd95(a: &LabelVolume, b: &LabelVolume, label: u16, spacing: [f64; 3]) -> Result<f64> {
    let mut d = pooled_surface_distances(a, b, label, spacing)?;
    Ok(percentile(&mut d, 95.0))
}

/// Mean of the pooled two-way surface distances, in mm.
pub fn assd(a: &LabelVolume, b: &LabelVolume, label: u16, spacing: [f64; 3]) -> Result<f64> {
    let d = pooled_surface_distances(a, b, label, spacing)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Nearest-neighbor resampling of labels at `x + phi(x)`, clamped to the grid.
pub fn warp_labels<T: Real>(lab: &LabelVolume, phi: &DisplacementField<T>) -> Result<LabelVolume> {
    if lab.dims != phi.dims() {
        return Err(Error::invalid(format!(
            "labels are {} but the field is {}",
            lab.dims,
            phi.dims()
        )));
    }
    let dims = lab.dims;
    let ext = dims.as_array();
    let data = dims
        .coords()
        .map(|(x, y, z)| {
            let u = phi.at(x, y, z);
            let p = [x, y, z];
            let mut q = [0usize; 3];
            for a in 0..3 {
                let c = Float::round(p[a] as f64 + u[a].as_f64());
                q[a] = c.max(0.0).min((ext[a] - 1) as f64) as usize;
            }
            lab.at(q[0], q[1], q[2])
        })
        .collect();
    Ok(LabelVolume { dims, spacing: lab.spacing, data })
}

/// Metric report for one registered pair.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricSummary {
    /// `(label, dice)` for every label present in either volume.
    pub dsc_per_label: Vec<(u16, f64)>,
    pub mean_dsc: f64,
    /// Mean over labels present in both volumes; `None` if there are none.
    pub hd95: Option<f64>,
    pub assd: Option<f64>,
    /// Percentage of voxels with a non-positive Jacobian determinant.
    pub folding_pct: Option<f64>,
}

/// Compare a reference segmentation with a warped one, optionally scoring the
/// field that produced it.
pub fn evaluate<T: Real>(
    reference: &LabelVolume,
    warped: &LabelVolume,
    phi: Option<&DisplacementField<T>>,
    spacing: [f64; 3],
) -> Result<MetricSummary> {
    check_same(reference, warped)?;
    let labels: BTreeSet<u16> = reference.labels().into_iter().chain(warped.labels()).collect();
    let mut dsc_per_label = Vec::with_capacity(labels.len());
    let (mut hd, mut sd, mut n_dist) = (0.0, 0.0, 0usize);
    for &l in &labels {
        dsc_per_label.push((l, dice(reference, warped, l)?));
        if reference.count(l) > 0 && warped.count(l) > 0 {
            let mut d = pooled_surface_distances(reference, warped, l, spacing)?;
            sd += d.iter().sum::<f64>() / d.len() as f64;
            hd += percentile(&mut d, 95.0);
            n_dist += 1;
        }
    }
    let mean_dsc = if dsc_per_label.is_empty() {
        1.0
    } else {
        dsc_per_label.iter().map(|p| p.1).sum::<f64>() / dsc_per_label.len() as f64
    };
    let avg = |s: f64| (n_dist > 0).then(|| s / n_dist as f64);
    Ok(MetricSummary {
        dsc_per_label,
        mean_dsc,
        hd95: avg(hd),
        assd: avg(sd),
        folding_pct: phi.map(|p| 100.0 * folding_ratio(&jacobian_determinant(p))),
    })
}
