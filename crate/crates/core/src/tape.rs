//! Reverse-mode differentiation over the registration pipeline.
//!
//! A [`Tape`] records every operation of one forward pass together with the
//! activations its backward rule needs. [`Tape::backward`] walks the record in
//! reverse and returns the gradient of a scalar node with respect to every
//! leaf and parameter node that requires one.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{
    attention_backward, attention_fused_forward, layer_norm_backward, layer_norm_forward, project_backward,
    project_forward, subfields_backward, subfields_forward, AttentionConfig, RowStats,
};
use crate::conv::{
    conv3_backward_input, conv3_backward_params, conv3_forward, instance_norm_backward, instance_norm_forward,
    leaky, leaky_grad, NormStats, TAPS,
};
use crate::field::{compose_backward, compose_forward, warp_backward, warp_forward};
use crate::objective::{grad_reg_backward, grad_reg_forward, ncc_backward, ncc_forward};
use crate::params::{ParamId, ParamStore};
use crate::sample::{check_upsample_target, pool2x_backward, pool2x_forward, upsample2x_backward, upsample2x_forward};
use crate::{Dims, Error, Real, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op<T> {
    Constant,
    Leaf,
    Param,
    Conv3 { x: NodeId, w: NodeId, b: NodeId, cin: usize, cout: usize, dims: Dims },
    InstanceNorm { x: NodeId, scale: NodeId, shift: NodeId, channels: usize, stats: NormStats<T> },
    LeakyRelu { x: NodeId, slope: T },
    AvgPool { x: NodeId, channels: usize, dims: Dims },
    Project { x: NodeId, w: NodeId, b: NodeId, cin: usize, width: usize },
    LayerNorm { x: NodeId, scale: NodeId, shift: NodeId, width: usize, stats: RowStats<T> },
    Attention { q: NodeId, k: NodeId, b: NodeId, dims: Dims, cfg: AttentionConfig },
    Subfields { attn: NodeId, heads: usize, npos: usize, n: usize },
    Upsample { x: NodeId, channels: usize, from: Dims, to: Dims, factor: T },
    Warp { src: NodeId, field: NodeId, channels: usize, dims: Dims },
    Compose { prev: NodeId, res: NodeId, dims: Dims },
    Scale { x: NodeId, factor: T },
    Ncc { f: NodeId, g: NodeId, dims: Dims, window: usize },
    GradReg { u: NodeId, dims: Dims },
    Combine { a: NodeId, b: NodeId, wa: T, wb: T },
    Sum { x: NodeId },
    HalfSquaredNorm { x: NodeId },
    WeightedSum { x: NodeId, weights: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Conv3 { .. } => "conv3",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::AvgPool { .. } => "avg_pool_2x",
            Op::Project { .. } => "projection",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "neighborhood_attention",
            Op::Subfields { .. } => "subfields",
            Op::Upsample { .. } => "upsample_2x",
            Op::Warp { .. } => "warp",
            Op::Compose { .. } => "compose",
            Op::Scale { .. } => "scale",
            Op::Ncc { .. } => "ncc_loss",
            Op::GradReg { .. } => "grad_reg",
            Op::Combine { .. } => "combine",
            Op::Sum { .. } => "sum",
            Op::HalfSquaredNorm { .. } => "half_squared_norm",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Vec<T>,
    requires_grad: bool,
}

/// Record of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, NodeId)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_error(op: &str, detail: String) -> Error {
    Error::invalid(format!("{op}: {detail}"))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    /// The single value of a scalar node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value[0]
    }

    pub fn take_value(&mut self, id: NodeId) -> Vec<T> {
        core::mem::take(&mut self.nodes[id.0].value)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Name of the operation that produced `id`.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    fn push(&mut self, op: Op<T>, value: Vec<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn len_of(&self, id: NodeId) -> usize {
        self.nodes[id.0].value.len()
    }

    fn expect_len(&self, op: &str, what: &str, id: NodeId, len: usize) -> Result<()> {
        let got = self.len_of(id);
        if got != len {
            return Err(shape_error(op, format!("{what} has {got} values, expected {len}")));
        }
        Ok(())
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Vec<T>) -> NodeId {
        self.nodes.push(Node { op: Op::Constant, value, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Vec<T>) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    /// Node holding parameter `id`. Repeated calls return the same node so
    /// every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&(_, node)) = self.params.iter().find(|(p, _)| *p == id) {
            return node;
        }
        self.nodes.push(Node {
            op: Op::Param,
            value: store.values(id).to_vec(),
            requires_grad: true,
        });
        let node = NodeId(self.nodes.len() - 1);
        self.params.push((id, node));
        node
    }

    /// Parameter nodes recorded so far.
    pub fn param_nodes(&self) -> &[(ParamId, NodeId)] {
        &self.params
    }

    /// Zero-padded 3x3x3 convolution; weight `[cout][cin][27]`, bias `[cout]`.
    pub fn conv3(&mut self, x: NodeId, w: NodeId, b: NodeId, cin: usize, cout: usize, dims: Dims) -> Result<NodeId> {
        self.expect_len("conv3", "input", x, cin * dims.len())?;
        self.expect_len("conv3", "weight", w, cout * cin * TAPS)?;
        self.expect_len("conv3", "bias", b, cout)?;
        let out = conv3_forward(self.value(x), cin, dims, self.value(w), self.value(b), cout);
        Ok(self.push(Op::Conv3 { x, w, b, cin, cout, dims }, out, &[x, w, b]))
    }

    pub fn instance_norm(&mut self, x: NodeId, scale: NodeId, shift: NodeId, channels: usize) -> Result<NodeId> {
        let len = self.len_of(x);
        if channels == 0 || len % channels != 0 || len == 0 {
            return Err(shape_error("instance_norm", format!("{len} values do not split into {channels} channels")));
        }
        self.expect_len("instance_norm", "scale", scale, channels)?;
        self.expect_len("instance_norm", "shift", shift, channels)?;
        let (out, stats) =
            instance_norm_forward(self.value(x), channels, len / channels, self.value(scale), self.value(shift));
        Ok(self.push(Op::InstanceNorm { x, scale, shift, channels, stats }, out, &[x, scale, shift]))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> NodeId {
        let out = self.value(x).iter().map(|&v| leaky(v, slope)).collect();
        self.push(Op::LeakyRelu { x, slope }, out, &[x])
    }

    /// 2x2x2 mean pooling; returns the node and the pooled dims.
    pub fn avg_pool(&mut self, x: NodeId, channels: usize, dims: Dims) -> Result<(NodeId, Dims)> {
        self.expect_len("avg_pool_2x", "input", x, channels * dims.len())?;
        let (out, out_dims) = pool2x_forward(self.value(x), channels, dims);
        Ok((self.push(Op::AvgPool { x, channels, dims }, out, &[x]), out_dims))
    }

    /// Channel-major `[cin][N]` features to position-major `[N][width]` tokens.
    pub fn project(&mut self, x: NodeId, w: NodeId, b: NodeId, cin: usize, width: usize) -> Result<NodeId> {
        let len = self.len_of(x);
        if cin == 0 || len % cin != 0 {
            return Err(shape_error("projection", format!("{len} values do not split into {cin} channels")));
        }
        self.expect_len("projection", "weight", w, width * cin)?;
        self.expect_len("projection", "bias", b, width)?;
        let out = project_forward(self.value(x), cin, len / cin, self.value(w), self.value(b));
        Ok(self.push(Op::Project { x, w, b, cin, width }, out, &[x, w, b]))
    }

    pub fn layer_norm(&mut self, x: NodeId, scale: NodeId, shift: NodeId, width: usize) -> Result<NodeId> {
        let len = self.len_of(x);
        if width == 0 || len % width != 0 {
            return Err(shape_error("layer_norm", format!("{len} values do not split into rows of {width}")));
        }
        self.expect_len("layer_norm", "scale", scale, width)?;
        self.expect_len("layer_norm", "shift", shift, width)?;
        let (out, stats) = layer_norm_forward(self.value(x), width, self.value(scale), self.value(shift));
        Ok(self.push(Op::LayerNorm { x, scale, shift, width, stats }, out, &[x, scale, shift]))
    }

    /// Neighborhood attention weights `[S][N][n^3]` using the fused kernel.
    pub fn attention(&mut self, q: NodeId, k: NodeId, b: NodeId, dims: Dims, cfg: AttentionConfig) -> Result<NodeId> {
        cfg.validate()?;
        self.expect_len("neighborhood_attention", "queries", q, dims.len() * cfg.width())?;
        self.expect_len("neighborhood_attention", "keys", k, dims.len() * cfg.width())?;
        self.expect_len("neighborhood_attention", "bias", b, cfg.heads * cfg.taps())?;
        let out = attention_fused_forward(self.value(q), self.value(k), self.value(b), dims, &cfg)?;
        Ok(self.push(Op::Attention { q, k, b, dims, cfg }, out, &[q, k, b]))
    }

    /// Attention rows to `3S` channel-major subfield components.
    pub fn subfields(&mut self, attn: NodeId, heads: usize, npos: usize, n: usize) -> Result<NodeId> {
        self.expect_len("subfields", "attention", attn, heads * npos * n * n * n)?;
        let out = subfields_forward(self.value(attn), heads, npos, n);
        Ok(self.push(Op::Subfields { attn, heads, npos, n }, out, &[attn]))
    }

    /// Trilinear 2x upsampling followed by multiplication with `factor`.
    pub fn upsample(&mut self, x: NodeId, channels: usize, from: Dims, to: Dims, factor: T) -> Result<NodeId> {
        check_upsample_target(from, to)?;
        self.expect_len("upsample_2x", "input", x, channels * from.len())?;
        let out = upsample2x_forward(self.value(x), channels, from, to, factor);
        Ok(self.push(Op::Upsample { x, channels, from, to, factor }, out, &[x]))
    }

    /// `out_c(x) = src_c(x + field(x))` for every channel.
    pub fn warp(&mut self, src: NodeId, field: NodeId, channels: usize, dims: Dims) -> Result<NodeId> {
        self.expect_len("warp", "source", src, channels * dims.len())?;
        self.expect_len("warp", "field", field, 3 * dims.len())?;
        let out = warp_forward(self.value(src), channels, dims, self.value(field));
        Ok(self.push(Op::Warp { src, field, channels, dims }, out, &[src, field]))
    }

    /// `res(x) + prev(x + res(x))`.
    pub fn compose(&mut self, prev: NodeId, res: NodeId, dims: Dims) -> Result<NodeId> {
        self.expect_len("compose", "prev", prev, 3 * dims.len())?;
        self.expect_len("compose", "res", res, 3 * dims.len())?;
        let out = compose_forward(self.value(prev), self.value(res), dims);
        Ok(self.push(Op::Compose { prev, res, dims }, out, &[prev, res]))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        self.push(Op::Scale { x, factor }, out, &[x])
    }

    /// Velocity integration by scaling and squaring.
    pub fn scaling_squaring(&mut self, v: NodeId, dims: Dims, steps: usize) -> Result<NodeId> {
        if steps == 0 {
            return Err(Error::invalid("scaling and squaring needs at least one step"));
        }
        let mut phi = self.scale(v, T::one() / T::from_usize(1usize << steps));
        for _ in 0..steps {
            phi = self.compose(phi, phi, dims)?;
        }
        Ok(phi)
    }

    pub fn ncc(&mut self, f: NodeId, g: NodeId, dims: Dims, window: usize) -> Result<NodeId> {
        self.expect_len("ncc_loss", "fixed", f, dims.len())?;
        self.expect_len("ncc_loss", "warped", g, dims.len())?;
        if window < 3 || window % 2 == 0 {
            return Err(shape_error("ncc_loss", format!("window must be odd and >= 3, got {window}")));
        }
        let out = ncc_forward(self.value(f), self.value(g), dims, window);
        Ok(self.push(Op::Ncc { f, g, dims, window }, vec![out], &[f, g]))
    }

    pub fn grad_reg(&mut self, u: NodeId, dims: Dims) -> Result<NodeId> {
        self.expect_len("grad_reg", "field", u, 3 * dims.len())?;
        let out = grad_reg_forward(self.value(u), dims);
        Ok(self.push(Op::GradReg { u, dims }, vec![out], &[u]))
    }

    /// `wa * a + wb * b` elementwise.
    pub fn combine(&mut self, a: NodeId, b: NodeId, wa: T, wb: T) -> Result<NodeId> {
        let n = self.len_of(a);
        self.expect_len("combine", "second operand", b, n)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| wa * x + wb * y).collect();
        Ok(self.push(Op::Combine { a, b, wa, wb }, out, &[a, b]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().copied().sum();
        self.push(Op::Sum { x }, vec![s], &[x])
    }

    pub fn half_squared_norm(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().map(|&v| v * v).sum::<T>() * T::lit(0.5);
        self.push(Op::HalfSquaredNorm { x }, vec![s], &[x])
    }

    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<T>) -> Result<NodeId> {
        self.expect_len("weighted_sum", "input", x, weights.len())?;
        let s = self.value(x).iter().zip(&weights).map(|(&v, &w)| v * w).sum();
        Ok(self.push(Op::WeightedSum { x, weights }, vec![s], &[x]))
    }

    /// Gradients of scalar node `root`, scaled by `seed`, for every node that
    /// requires one. Fails with the offending op's name if a gradient is not
    /// finite.
    pub fn backward(&self, root: NodeId, seed: T) -> Result<Gradients<T>> {
        if self.len_of(root) != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, {} has {} values",
                self.op_name(root),
                self.len_of(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![seed]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut out: Vec<(NodeId, Vec<T>)> = Vec::new();
            let need = |id: NodeId| self.nodes[id.0].requires_grad;
            match &node.op {
                Op::Constant | Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                &Op::Conv3 { x, w, b, cin, cout, dims } => {
                    if need(x) {
                        out.push((x, conv3_backward_input(&g, cout, dims, self.value(w), cin)));
                    }
                    if need(w) || need(b) {
                        let (gw, gb) = conv3_backward_params(&g, cout, self.value(x), cin, dims);
                        out.push((w, gw));
                        out.push((b, gb));
                    }
                }
                Op::InstanceNorm { x, scale, shift, channels, stats } => {
                    let n = self.len_of(*x) / channels;
                    let (gx, gs, gb) =
                        instance_norm_backward(&g, self.value(*x), *channels, n, self.value(*scale), stats);
                    out.push((*x, gx));
                    out.push((*scale, gs));
                    out.push((*shift, gb));
                }
                &Op::LeakyRelu { x, slope } => {
                    let gx = g.iter().zip(self.value(x)).map(|(&gv, &v)| gv * leaky_grad(v, slope)).collect();
                    out.push((x, gx));
                }
                &Op::AvgPool { x, channels, dims } => {
                    out.push((x, pool2x_backward(&g, channels, dims)));
                }
                &Op::Project { x, w, b, cin, width } => {
                    let n = self.len_of(x) / cin;
                    let (gx, gw, gb) = project_backward(&g, self.value(x), cin, n, self.value(w), width);
                    out.push((x, gx));
                    out.push((w, gw));
                    out.push((b, gb));
                }
                Op::LayerNorm { x, scale, shift, width, stats } => {
                    let (gx, gs, gb) = layer_norm_backward(&g, self.value(*x), *width, self.value(*scale), stats);
                    out.push((*x, gx));
                    out.push((*scale, gs));
                    out.push((*shift, gb));
                }
                Op::Attention { q, k, b, dims, cfg } => {
                    let (gq, gk, gb) = attention_backward(&g, &node.value, self.value(*q), self.value(*k), *dims, cfg);
                    out.push((*q, gq));
                    out.push((*k, gk));
                    out.push((*b, gb));
                }
                &Op::Subfields { attn, heads, npos, n } => {
                    out.push((attn, subfields_backward(&g, heads, npos, n)));
                }
                &Op::Upsample { x, channels, from, to, factor } => {
                    out.push((x, upsample2x_backward(&g, channels, from, to, factor)));
                }
                &Op::Warp { src, field, channels, dims } => {
                    let (gs, gf) =
                        warp_backward(&g, self.value(src), channels, dims, self.value(field), need(src), need(field));
                    if let Some(gs) = gs {
                        out.push((src, gs));
                    }
                    if let Some(gf) = gf {
                        out.push((field, gf));
                    }
                }
                &Op::Compose { prev, res, dims } => {
                    let (gp, gr) = compose_backward(&g, self.value(prev), self.value(res), dims);
                    out.push((prev, gp));
                    out.push((res, gr));
                }
                &Op::Scale { x, factor } => {
                    out.push((x, g.iter().map(|&v| v * factor).collect()));
                }
                &Op::Ncc { f, g: w, dims, window } => {
                    let (gf, gw) = ncc_backward(g[0], self.value(f), self.value(w), dims, window, need(f), need(w));
                    if let Some(gf) = gf {
                        out.push((f, gf));
                    }
                    if let Some(gw) = gw {
                        out.push((w, gw));
                    }
                }
                &Op::GradReg { u, dims } => {
                    out.push((u, grad_reg_backward(g[0], self.value(u), dims)));
                }
                &Op::Combine { a, b, wa, wb } => {
                    out.push((a, g.iter().map(|&v| v * wa).collect()));
                    out.push((b, g.iter().map(|&v| v * wb).collect()));
                }
                &Op::Sum { x } => {
                    out.push((x, vec![g[0]; self.len_of(x)]));
                }
                &Op::HalfSquaredNorm { x } => {
                    out.push((x, self.value(x).iter().map(|&v| v * g[0]).collect()));
                }
                Op::WeightedSum { x, weights } => {
                    out.push((*x, weights.iter().map(|&w| w * g[0]).collect()));
                }
            }
            for (id, gv) in out {
                if !need(id) {
                    continue;
                }
                if let Some(bad) = gv.iter().position(|v| !v.is_finite()) {
                    return Err(Error::non_finite(
                        node.op.name(),
                        format!("gradient entry {bad} for input node {} is {}", id.0, gv[bad]),
                    ));
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(gv),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Zero the store's gradient slots, run [`Tape::backward`] and write the
    /// parameter gradients into the store.
    pub fn backward_into(&self, root: NodeId, seed: T, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        store.zero_grad();
        let grads = self.backward(root, seed)?;
        for &(pid, node) in &self.params {
            if let Some(g) = grads.get(node) {
                store.get_mut(pid).grad.copy_from_slice(g);
            }
        }
        Ok(grads)
    }
}

/// Result of [`Tape::backward`]: gradients of leaf and parameter nodes.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf or parameter node; `None` if it did not influence
    /// the root.
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamRole;

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", ParamRole::Projection, &[5], vec![0.3, -1.0, 2.0, 4.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let loss = tape.sum(p);
        tape.backward_into(loss, 1.0, &mut store).unwrap();
        assert_eq!(store.get(id).grad, vec![1.0; 5]);
    }

    #[test]
    fn half_squared_norm_gradient_is_the_params() {
        let mut store = ParamStore::<f64>::new();
        let vals = vec![0.3, -1.0, 2.0];
        let id = store.add("p", ParamRole::Projection, &[3], vals.clone()).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let loss = tape.half_squared_norm(p);
        tape.backward_into(loss, 1.0, &mut store).unwrap();
        assert_eq!(store.get(id).grad, vals);
    }

    #[test]
    fn reused_param_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", ParamRole::Projection, &[2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let c = tape.combine(a, b, 2.0, 3.0).unwrap();
        let loss = tape.sum(c);
        tape.backward_into(loss, 1.0, &mut store).unwrap();
        assert_eq!(store.get(id).grad, vec![5.0, 5.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(vec![1.0, 2.0]);
        let l = tape.leaf(vec![3.0, 4.0]);
        let s = tape.combine(c, l, 1.0, 1.0).unwrap();
        let loss = tape.half_squared_norm(s);
        let g = tape.backward(loss, 1.0).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(l).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn non_finite_gradient_names_the_op() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(vec![1.0, 2.0]);
        let s = tape.scale(l, f64::INFINITY);
        let loss = tape.sum(s);
        match tape.backward(loss, 1.0) {
            Err(Error::NonFinite { op, .. }) => assert_eq!(op, "scale"),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn seed_scales_gradients_exactly() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(vec![0.5, -1.5, 2.0]);
        let loss = tape.half_squared_norm(l);
        let g1 = tape.backward(loss, 1.0).unwrap().get(l).unwrap().to_vec();
        let g3 = tape.backward(loss, 3.0).unwrap().get(l).unwrap().to_vec();
        for (a, b) in g1.iter().zip(&g3) {
            assert_eq!(3.0 * a, *b);
        }
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(vec![1.0, 2.0]);
        assert!(tape.backward(l, 1.0).is_err());
    }
}
