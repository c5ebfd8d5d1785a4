//! Multi-head neighborhood attention turned into displacement subfields.
//!
//! Features are projected to queries and keys with one shared linear map
//! followed by LayerNorm over all `heads * head_dim` channels. For every voxel
//! and head, attention is a softmax over the `n^3` neighbors of the dot
//! product between the query and the neighbor's key plus a learned bias per
//! relative offset. Keys outside the grid are zero, so their logit is the bias
//! alone. There is no `1/sqrt(d)` temperature.
//!
//! The values are not learned: they are the integer offsets of the
//! neighborhood, so each head's attention row collapses into a displacement
//! vector (a convex combination of offsets).
//!
//! [`neighborhood_attention_fused`] computes one position at a time and only
//! ever holds `n^3` logits of scratch. [`neighborhood_attention_naive`]
//! materializes every key window first; it is kept as the reference and as
//! the benchmark baseline.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::grid::check_finite;
use crate::vecops::{dot, sum};
use crate::{Dims, DisplacementField, Error, FeatureMap, Real, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Standard deviation of the projection weights at initialization.
pub const PROJECTION_INIT_STD: f64 = 1e-5;
pub const DEFAULT_NEIGHBORHOOD: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub neighborhood: usize,
}

impl AttentionConfig {
    pub fn new(heads: usize, head_dim: usize, neighborhood: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            heads,
            head_dim,
            neighborhood,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.neighborhood < 3 || self.neighborhood % 2 == 0 {
            return Err(Error::invalid(format!(
                "neighborhood size must be odd and at least 3, got {}",
                self.neighborhood
            )));
        }
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::invalid("attention needs at least one head of width >= 1"));
        }
        Ok(())
    }

    /// Channels produced by the projection.
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Offsets per neighborhood, `n^3`.
    pub fn taps(&self) -> usize {
        self.neighborhood.pow(3)
    }

    pub fn radius(&self) -> usize {
        self.neighborhood / 2
    }
}

/// Relative offsets of an `n^3` neighborhood. Offset `o` is
/// `(ox + r) + n * ((oy + r) + n * (oz + r))`, x fastest.
pub fn neighborhood_offsets(n: usize) -> Vec<[isize; 3]> {
    let r = (n / 2) as isize;
    let mut out = Vec::with_capacity(n * n * n);
    for oz in -r..=r {
        for oy in -r..=r {
            for ox in -r..=r {
                out.push([ox, oy, oz]);
            }
        }
    }
    out
}

/// Per-voxel feature vectors, position-major: `data[p * width + j]`.
///
/// Queries and keys use this layout so that one head of one voxel is a
/// contiguous run of `head_dim` values.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMap<T> {
    dims: Dims,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> TokenMap<T> {
    pub fn new(dims: Dims, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() * width {
            return Err(Error::invalid(format!(
                "token map of width {width} on {dims} needs {} values, got {}",
                dims.len() * width,
                data.len()
            )));
        }
        check_finite(&data, "token map")?;
        Ok(TokenMap { dims, width, data })
    }

    pub(crate) fn from_raw(dims: Dims, width: usize, data: Vec<T>) -> Self {
        TokenMap { dims, width, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn token(&self, p: usize) -> &[T] {
        &self.data[p * self.width..(p + 1) * self.width]
    }
}

/// Shared Q/K projection: weights `[width][in_channels]`, bias, and the
/// LayerNorm affine over the projected channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights<T> {
    pub in_channels: usize,
    pub width: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub ln_scale: Vec<T>,
    pub ln_shift: Vec<T>,
}

impl<T: Real> ProjectionWeights<T> {
    pub fn validate(&self) -> Result<()> {
        let (c, w) = (self.in_channels, self.width);
        if self.weight.len() != c * w || self.bias.len() != w || self.ln_scale.len() != w || self.ln_shift.len() != w {
            return Err(Error::invalid(format!("projection {c}->{w} has inconsistent tensor sizes")));
        }
        Ok(())
    }
}

/// Learned bias per head and neighborhood offset, `[heads][n^3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelPosBias<T> {
    pub heads: usize,
    pub taps: usize,
    pub data: Vec<T>,
}

impl<T: Real> RelPosBias<T> {
    pub fn zeros(cfg: &AttentionConfig) -> Self {
        RelPosBias {
            heads: cfg.heads,
            taps: cfg.taps(),
            data: vec![T::zero(); cfg.heads * cfg.taps()],
        }
    }
}

/// Attention weights laid out `[head][position][offset]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    pub heads: usize,
    pub dims: Dims,
    pub taps: usize,
    pub data: Vec<T>,
}

impl<T: Real> AttentionWeights<T> {
    pub fn row(&self, head: usize, p: usize) -> &[T] {
        let i = (head * self.dims.len() + p) * self.taps;
        &self.data[i..i + self.taps]
    }
}

/// One displacement subfield per head, stored as `3 * heads` channel-major
/// planes (head-major, then component).
#[derive(Clone, Debug, PartialEq)]
pub struct SubfieldStack<T> {
    heads: usize,
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> SubfieldStack<T> {
    pub fn from_fields(fields: &[DisplacementField<T>]) -> Result<Self> {
        let dims = fields
            .first()
            .map(|f| f.dims())
            .ok_or_else(|| Error::invalid("subfield stack needs at least one field"))?;
        if fields.iter().any(|f| f.dims() != dims) {
            return Err(Error::invalid("subfields must share one grid"));
        }
        let data = fields.iter().flat_map(|f| f.data().iter().copied()).collect();
        Ok(SubfieldStack {
            heads: fields.len(),
            dims,
            data,
        })
    }

    pub(crate) fn from_raw(heads: usize, dims: Dims, data: Vec<T>) -> Self {
        SubfieldStack { heads, dims, data }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn subfield(&self, head: usize) -> DisplacementField<T> {
        let n3 = 3 * self.dims.len();
        DisplacementField::from_raw(self.dims, self.data[head * n3..(head + 1) * n3].to_vec())
    }

    pub fn as_feature_map(&self) -> FeatureMap<T> {
        FeatureMap::from_raw(3 * self.heads, self.dims, self.data.clone())
    }
}

// ---------------------------------------------------------------------------
// projection + LayerNorm

/// `out[p][j] = bias[j] + sum_c weight[j][c] * input[c][p]`.
pub(crate) fn project_forward<T: Real>(input: &[T], cin: usize, n: usize, weight: &[T], bias: &[T]) -> Vec<T> {
    let width = bias.len();
    let mut out = Vec::with_capacity(n * width);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    let mut column = vec![T::zero(); width];
    for c in 0..cin {
        for (j, w) in column.iter_mut().enumerate() {
            *w = weight[j * cin + c];
        }
        let x = &input[c * n..(c + 1) * n];
        for (p, &xv) in x.iter().enumerate() {
            let row = &mut out[p * width..(p + 1) * width];
            for (o, &w) in row.iter_mut().zip(&column) {
                *o += w * xv;
            }
        }
    }
    out
}

/// Returns (input grad `[c][p]`, weight grad `[j][c]`, bias grad).
pub(crate) fn project_backward<T: Real>(
    grad: &[T],
    input: &[T],
    cin: usize,
    n: usize,
    weight: &[T],
    width: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gin = vec![T::zero(); cin * n];
    let mut gw = vec![T::zero(); width * cin];
    let mut gb = vec![T::zero(); width];
    for p in 0..n {
        let g = &grad[p * width..(p + 1) * width];
        for (b, &gv) in gb.iter_mut().zip(g) {
            *b += gv;
        }
    }
    let mut column = vec![T::zero(); width];
    for c in 0..cin {
        for (j, w) in column.iter_mut().enumerate() {
            *w = weight[j * cin + c];
        }
        let x = &input[c * n..(c + 1) * n];
        let gx = &mut gin[c * n..(c + 1) * n];
        let mut acc = vec![T::zero(); width];
        for p in 0..n {
            let g = &grad[p * width..(p + 1) * width];
            gx[p] = dot(g, &column);
            let xv = x[p];
            for (a, &gv) in acc.iter_mut().zip(g) {
                *a += gv * xv;
            }
        }
        for (j, a) in acc.into_iter().enumerate() {
            gw[j * cin + c] = a;
        }
    }
    (gin, gw, gb)
}

pub(crate) struct RowStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_forward<T: Real>(x: &[T], width: usize, scale: &[T], shift: &[T]) -> (Vec<T>, RowStats<T>) {
    let n = x.len() / width;
    let eps = T::lit(LAYER_NORM_EPS);
    let inv_w = T::one() / T::from_usize(width);
    let mut out = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(n);
    let mut inv_std = Vec::with_capacity(n);
    for p in 0..n {
        let row = &x[p * width..(p + 1) * width];
        let m = sum(row) * inv_w;
        let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv_w;
        let inv = T::one() / (var + eps).sqrt();
        for (j, (o, &v)) in out[p * width..(p + 1) * width].iter_mut().zip(row).enumerate() {
            *o = scale[j] * ((v - m) * inv) + shift[j];
        }
        mean.push(m);
        inv_std.push(inv);
    }
    (out, RowStats { mean, inv_std })
}

pub(crate) fn layer_norm_backward<T: Real>(
    grad: &[T],
    x: &[T],
    width: usize,
    scale: &[T],
    stats: &RowStats<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = x.len() / width;
    let inv_w = T::one() / T::from_usize(width);
    let mut gx = vec![T::zero(); x.len()];
    let mut gscale = vec![T::zero(); width];
    let mut gshift = vec![T::zero(); width];
    let mut ghat = vec![T::zero(); width];
    for p in 0..n {
        let (m, inv) = (stats.mean[p], stats.inv_std[p]);
        let row = &x[p * width..(p + 1) * width];
        let g = &grad[p * width..(p + 1) * width];
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..width {
            let xhat = (row[j] - m) * inv;
            gscale[j] += g[j] * xhat;
            gshift[j] += g[j];
            ghat[j] = g[j] * scale[j];
            s1 += ghat[j];
            s2 += ghat[j] * xhat;
        }
        for j in 0..width {
            let xhat = (row[j] - m) * inv;
            gx[p * width + j] = inv * (ghat[j] - s1 * inv_w - xhat * s2 * inv_w);
        }
    }
    (gx, gscale, gshift)
}

fn project_one<T: Real>(fm: &FeatureMap<T>, p: &ProjectionWeights<T>) -> TokenMap<T> {
    let n = fm.dims().len();
    let proj = project_forward(fm.data(), p.in_channels, n, &p.weight, &p.bias);
    let (normed, _) = layer_norm_forward(&proj, p.width, &p.ln_scale, &p.ln_shift);
    TokenMap::from_raw(fm.dims(), p.width, normed)
}

/// `Q = LN(proj(F))`, `K = LN(proj(M))` with one set of weights.
pub fn project_qk<T: Real>(
    fixed: &FeatureMap<T>,
    moving: &FeatureMap<T>,
    p: &ProjectionWeights<T>,
    cfg: &AttentionConfig,
) -> Result<(TokenMap<T>, TokenMap<T>)> {
    p.validate()?;
    if fixed.dims() != moving.dims() || fixed.channels() != moving.channels() {
        return Err(Error::invalid("fixed and moving feature maps differ in shape"));
    }
    if fixed.channels() != p.in_channels {
        return Err(Error::invalid(format!(
            "projection expects {} channels, features have {}",
            p.in_channels,
            fixed.channels()
        )));
    }
    if p.width != cfg.width() {
        return Err(Error::invalid(format!(
            "projection width {} does not match {} heads x {}",
            p.width, cfg.heads, cfg.head_dim
        )));
    }
    Ok((project_one(fixed, p), project_one(moving, p)))
}

// ---------------------------------------------------------------------------
// neighborhood attention

#[derive(Clone, Copy)]
struct Neighbor {
    d: [isize; 3],
    delta: isize,
}

fn neighbors(dims: Dims, n: usize) -> Vec<Neighbor> {
    neighborhood_offsets(n)
        .into_iter()
        .map(|d| Neighbor {
            d,
            delta: d[0] + dims.nx as isize * (d[1] + dims.ny as isize * d[2]),
        })
        .collect()
}

#[inline(always)]
fn in_bounds(dims: Dims, x: usize, y: usize, z: usize, d: [isize; 3]) -> bool {
    let (xx, yy, zz) = (x as isize + d[0], y as isize + d[1], z as isize + d[2]);
    xx >= 0 && yy >= 0 && zz >= 0 && (xx as usize) < dims.nx && (yy as usize) < dims.ny && (zz as usize) < dims.nz
}

#[inline(always)]
fn small_dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// In-place softmax with max subtraction; returns false if the row max is
/// not finite.
#[inline(always)]
fn softmax_in_place<T: Real>(row: &mut [T]) -> bool {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if !max.is_finite() {
        return false;
    }
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
    true
}

fn check_attention_inputs<T: Real>(
    q: &TokenMap<T>,
    k: &TokenMap<T>,
    b: &RelPosBias<T>,
    cfg: &AttentionConfig,
) -> Result<()> {
    cfg.validate()?;
    if q.dims != k.dims || q.width != k.width {
        return Err(Error::invalid("query and key maps differ in shape"));
    }
    if q.width != cfg.width() {
        return Err(Error::invalid(format!(
            "token width {} does not match {} heads x {}",
            q.width, cfg.heads, cfg.head_dim
        )));
    }
    if b.heads != cfg.heads || b.taps != cfg.taps() || b.data.len() != cfg.heads * cfg.taps() {
        return Err(Error::invalid("relative position bias does not match the attention config"));
    }
    Ok(())
}

fn non_finite_at(dims: Dims, p: usize, head: usize) -> Error {
    let x = p % dims.nx;
    let y = (p / dims.nx) % dims.ny;
    let z = p / (dims.nx * dims.ny);
    Error::non_finite(
        "neighborhood attention",
        format!("non-finite logits for head {head} at voxel ({x}, {y}, {z})"),
    )
}

pub(crate) fn attention_fused_forward<T: Real>(
    q: &[T],
    k: &[T],
    bias: &[T],
    dims: Dims,
    cfg: &AttentionConfig,
) -> Result<Vec<T>> {
    let (heads, hd, taps) = (cfg.heads, cfg.head_dim, cfg.taps());
    let width = cfg.width();
    let npos = dims.len();
    let nbrs = neighbors(dims, cfg.neighborhood);
    let mut out = vec![T::zero(); heads * npos * taps];
    let mut logits = vec![T::zero(); taps];
    for (p, (x, y, z)) in dims.coords().enumerate() {
        for s in 0..heads {
            let qv = &q[p * width + s * hd..p * width + (s + 1) * hd];
            let b = &bias[s * taps..(s + 1) * taps];
            for (o, nb) in nbrs.iter().enumerate() {
                let qk = if in_bounds(dims, x, y, z, nb.d) {
                    let j = (p as isize + nb.delta) as usize;
                    small_dot(qv, &k[j * width + s * hd..j * width + (s + 1) * hd])
                } else {
                    T::zero()
                };
                logits[o] = qk + b[o];
            }
            if !softmax_in_place(&mut logits) {
                return Err(non_finite_at(dims, p, s));
            }
            let base = (s * npos + p) * taps;
            out[base..base + taps].copy_from_slice(&logits);
        }
    }
    Ok(out)
}

pub(crate) fn attention_naive_forward<T: Real>(
    q: &[T],
    k: &[T],
    bias: &[T],
    dims: Dims,
    cfg: &AttentionConfig,
) -> Result<Vec<T>> {
    let (heads, hd, taps) = (cfg.heads, cfg.head_dim, cfg.taps());
    let width = cfg.width();
    let npos = dims.len();
    let nbrs = neighbors(dims, cfg.neighborhood);
    // sliding windows of keys, zero where the neighbor falls outside the grid
    let mut windows = vec![T::zero(); heads * npos * taps * hd];
    for s in 0..heads {
        for (p, (x, y, z)) in dims.coords().enumerate() {
            for (o, nb) in nbrs.iter().enumerate() {
                if in_bounds(dims, x, y, z, nb.d) {
                    let j = (p as isize + nb.delta) as usize;
                    let w = ((s * npos + p) * taps + o) * hd;
                    windows[w..w + hd].copy_from_slice(&k[j * width + s * hd..j * width + (s + 1) * hd]);
                }
            }
        }
    }
    let mut out = vec![T::zero(); heads * npos * taps];
    for s in 0..heads {
        for p in 0..npos {
            let qv = &q[p * width + s * hd..p * width + (s + 1) * hd];
            let base = (s * npos + p) * taps;
            for o in 0..taps {
                let w = (base + o) * hd;
                out[base + o] = small_dot(qv, &windows[w..w + hd]) + bias[s * taps + o];
            }
            if !softmax_in_place(&mut out[base..base + taps]) {
                return Err(non_finite_at(dims, p, s));
            }
        }
    }
    Ok(out)
}

/// Returns (query grad, key grad, bias grad).
pub(crate) fn attention_backward<T: Real>(
    grad: &[T],
    attn: &[T],
    q: &[T],
    k: &[T],
    dims: Dims,
    cfg: &AttentionConfig,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (heads, hd, taps) = (cfg.heads, cfg.head_dim, cfg.taps());
    let width = cfg.width();
    let npos = dims.len();
    let nbrs = neighbors(dims, cfg.neighborhood);
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); heads * taps];
    let mut gl = vec![T::zero(); taps];
    for (p, (x, y, z)) in dims.coords().enumerate() {
        for s in 0..heads {
            let base = (s * npos + p) * taps;
            let a = &attn[base..base + taps];
            let g = &grad[base..base + taps];
            let ag = small_dot(a, g);
            for o in 0..taps {
                gl[o] = a[o] * (g[o] - ag);
                gb[s * taps + o] += gl[o];
            }
            let qo = p * width + s * hd;
            for (o, nb) in nbrs.iter().enumerate() {
                if gl[o] == T::zero() || !in_bounds(dims, x, y, z, nb.d) {
                    continue;
                }
                let ko = (p as isize + nb.delta) as usize * width + s * hd;
                for c in 0..hd {
                    gq[qo + c] += gl[o] * k[ko + c];
                    gk[ko + c] += gl[o] * q[qo + c];
                }
            }
        }
    }
    (gq, gk, gb)
}

/// Softmax of `Q_p . K_{p+o} + B_o` over the neighborhood, computed one
/// position at a time with `n^3` scratch values.
pub fn neighborhood_attention_fused<T: Real>(
    q: &TokenMap<T>,
    k: &TokenMap<T>,
    b: &RelPosBias<T>,
    cfg: &AttentionConfig,
) -> Result<AttentionWeights<T>> {
    check_attention_inputs(q, k, b, cfg)?;
    let data = attention_fused_forward(&q.data, &k.data, &b.data, q.dims, cfg)?;
    Ok(AttentionWeights {
        heads: cfg.heads,
        dims: q.dims,
        taps: cfg.taps(),
        data,
    })
}

/// Reference implementation that builds every key window explicitly.
/// Intended for tests and benchmarks on small grids.
pub fn neighborhood_attention_naive<T: Real>(
    q: &TokenMap<T>,
    k: &TokenMap<T>,
    b: &RelPosBias<T>,
    cfg: &AttentionConfig,
) -> Result<AttentionWeights<T>> {
    check_attention_inputs(q, k, b, cfg)?;
    let data = attention_naive_forward(&q.data, &k.data, &b.data, q.dims, cfg)?;
    Ok(AttentionWeights {
        heads: cfg.heads,
        dims: q.dims,
        taps: cfg.taps(),
        data,
    })
}

/// Bytes of scratch the fused kernel holds while computing one position.
pub fn fused_scratch_bytes<T>(cfg: &AttentionConfig) -> usize {
    cfg.taps() * core::mem::size_of::<T>()
}

/// Bytes of the key-window tensor the naive kernel materializes.
pub fn naive_window_bytes<T>(dims: Dims, cfg: &AttentionConfig) -> usize {
    cfg.heads * dims.len() * cfg.taps() * cfg.head_dim * core::mem::size_of::<T>()
}

// ---------------------------------------------------------------------------
// subfields

pub(crate) fn subfields_forward<T: Real>(attn: &[T], heads: usize, npos: usize, n: usize) -> Vec<T> {
    let offs = neighborhood_offsets(n);
    let taps = offs.len();
    let offs: Vec<[T; 3]> = offs
        .iter()
        .map(|d| [T::lit(d[0] as f64), T::lit(d[1] as f64), T::lit(d[2] as f64)])
        .collect();
    let mut out = vec![T::zero(); 3 * heads * npos];
    for s in 0..heads {
        for p in 0..npos {
            let a = &attn[(s * npos + p) * taps..(s * npos + p + 1) * taps];
            let mut acc = [T::zero(); 3];
            for (w, off) in a.iter().zip(&offs) {
                acc[0] += *w * off[0];
                acc[1] += *w * off[1];
                acc[2] += *w * off[2];
            }
            for c in 0..3 {
                out[(3 * s + c) * npos + p] = acc[c];
            }
        }
    }
    out
}

pub(crate) fn subfields_backward<T: Real>(grad: &[T], heads: usize, npos: usize, n: usize) -> Vec<T> {
    let offs = neighborhood_offsets(n);
    let taps = offs.len();
    let mut ga = vec![T::zero(); heads * npos * taps];
    for s in 0..heads {
        for p in 0..npos {
            let g = [
                grad[(3 * s) * npos + p],
                grad[(3 * s + 1) * npos + p],
                grad[(3 * s + 2) * npos + p],
            ];
            let row = &mut ga[(s * npos + p) * taps..(s * npos + p + 1) * taps];
            for (r, d) in row.iter_mut().zip(&offs) {
                *r = g[0] * T::lit(d[0] as f64) + g[1] * T::lit(d[1] as f64) + g[2] * T::lit(d[2] as f64);
            }
        }
    }
    ga
}

/// Turn attention rows into per-head displacement subfields by weighting the
/// fixed grid of neighborhood offsets.
pub fn subfields_from_attention<T: Real>(w: &AttentionWeights<T>, cfg: &AttentionConfig) -> Result<SubfieldStack<T>> {
    cfg.validate()?;
    if w.heads != cfg.heads || w.taps != cfg.taps() || w.data.len() != w.heads * w.dims.len() * w.taps {
        return Err(Error::invalid("attention weights do not match the attention config"));
    }
    let tol = T::lit(1e-5);
    for (i, row) in w.data.chunks_exact(w.taps).enumerate() {
        let total: T = row.iter().copied().sum();
        if !((total - T::one()).abs() <= tol) {
            return Err(Error::invalid(format!(
                "attention row {i} sums to {total}, expected 1 within 1e-5"
            )));
        }
    }
    let data = subfields_forward(&w.data, w.heads, w.dims.len(), cfg.neighborhood);
    Ok(SubfieldStack::from_raw(w.heads, w.dims, data))
}
