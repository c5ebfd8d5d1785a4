//! Central finite-difference checks of every differentiable operation in f64.
//!
//! Each check records an operation on a [`Tape`], reduces vector outputs with
//! fixed random weights, and compares the analytic gradient of every input
//! with `(f(x + h) - f(x - h)) / 2h` on a sample of entries. The error of one
//! entry is `|a - n| / max(|a|, |n|, floor)` where `floor` is `1e-3` times the
//! largest numeric gradient of that input, and never less than
//! [`ROUNDOFF_FLOOR`] times the checked scalar; this keeps entries whose true
//! gradient is tiny from being judged on round-off alone.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::AttentionConfig;
use crate::conv::TAPS;
use crate::encoder::{encode_on_tape, EncoderConfig};
use crate::model::{Model, ModelConfig};
use crate::params::ParamRole;
use crate::synth::{gaussian_smooth, smooth_velocity, synthetic_pair, SynthConfig};
use crate::tape::{NodeId, Tape};
use crate::{Dims, Result};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Composition compounds interpolation error, so the integration check is
/// looser.
pub const SS_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_STEP: f64 = 1e-5;
/// Smallest denominator of the relative error, as a fraction of the checked
/// scalar. Central differences at the default step carry round-off up to
/// about `1e-10` of that scalar once the loss reductions are included, so
/// gradients below this are compared absolutely.
pub const ROUNDOFF_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Entries compared per input; inputs at most this long are checked in
    /// full.
    pub samples_per_input: usize,
    pub seed: u64,
    /// Grid used by the per-operation cases.
    pub dims: Dims,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: DEFAULT_STEP, samples_per_input: 12, seed: 0, dims: Dims::cube(16) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub name: String,
    pub checked: usize,
    /// Entries evaluated at a shifted base point because a kink lay inside
    /// the difference stencil.
    pub relocated: usize,
    pub worst_rel: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub tolerance: f64,
    pub inputs: Vec<InputReport>,
    /// Set when the forward or backward pass itself failed.
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn worst_rel(&self) -> f64 {
        self.inputs.iter().map(|i| i.worst_rel).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.error.is_none() && !self.inputs.is_empty() && self.worst_rel() <= self.tolerance
    }

    fn failed(op: &str, tolerance: f64, err: crate::Error) -> Self {
        GradCheckReport { op: op.to_string(), tolerance, inputs: Vec::new(), error: Some(err.to_string()) }
    }
}

fn entries(len: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= k {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, k).into_vec();
        v.sort_unstable();
        v
    }
}

/// Access to the scalar function under test.
trait Probe {
    /// Value with entry `j` of input `i` offset by `delta` from its base.
    fn eval(&mut self, i: usize, j: usize, delta: f64) -> Result<f64>;
    /// Move the base of entry `(i, j)` to its original value plus `offset`
    /// and return the analytic derivative there.
    fn rebase(&mut self, i: usize, j: usize, offset: f64) -> Result<f64>;
    fn restore(&mut self, i: usize, j: usize);
}

/// On a smooth function the fourth difference over `x + {-h, -h/2, 0, h/2, h}`
/// vanishes to fourth order in `h`; a kink of trilinear sampling or leaky
/// ReLU anywhere inside the stencil leaves a residue proportional to its
/// slope jump. Such entries are moved to a nearby base point.
const MAX_RELOCATIONS: usize = 12;

fn compare(
    names: &[String],
    analytic: &[Vec<f64>],
    value: f64,
    tolerance: f64,
    cfg: &GradCheckConfig,
    probe: &mut dyn Probe,
) -> Result<Vec<InputReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let h = cfg.step;
    let abs_floor = ROUNDOFF_FLOOR * value.abs().max(1.0);
    let mut out = Vec::with_capacity(names.len());
    for (i, (name, grad)) in names.iter().zip(analytic).enumerate() {
        let idx = entries(grad.len(), cfg.samples_per_input, &mut rng);
        let mut rows = Vec::with_capacity(idx.len());
        let mut relocated = 0;
        for &j in &idx {
            let mut a = grad[j];
            let mut moves = 0;
            let num = loop {
                let mut f = [0.0; 5];
                for (fk, d) in f.iter_mut().zip([-h, -h / 2.0, 0.0, h / 2.0, h]) {
                    *fk = probe.eval(i, j, d)?;
                }
                let central = (f[4] - f[0]) / (2.0 * h);
                let half = (f[3] - f[1]) / h;
                let fourth = (f[0] - 4.0 * f[1] + 6.0 * f[2] - 4.0 * f[3] + f[4]).abs();
                let noise = 64.0 * f64::EPSILON * f[2].abs().max(1.0);
                let scale = central.abs().max(abs_floor);
                let smooth = fourth <= (0.05 * tolerance * scale * h).max(noise)
                    && (central - half).abs() <= (0.05 * tolerance * scale).max(noise / h);
                if smooth || moves == MAX_RELOCATIONS {
                    break central;
                }
                moves += 1;
                let offset = rng.random_range(20.0..100.0) * h * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                a = probe.rebase(i, j, offset)?;
            };
            if moves > 0 {
                probe.restore(i, j);
                relocated += 1;
            }
            rows.push((j, a, num));
        }
        let floor = (1e-3 * rows.iter().map(|p| p.2.abs()).fold(0.0, f64::max)).max(abs_floor);
        let mut rep = InputReport {
            name: name.clone(),
            checked: rows.len(),
            relocated,
            worst_rel: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (j, a, n) in rows {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            let rel = if rel.is_finite() { rel } else { f64::INFINITY };
            if rel > rep.worst_rel {
                rep = InputReport { worst_rel: rel, worst_index: j, analytic: a, numeric: n, ..rep };
            }
        }
        out.push(rep);
    }
    Ok(out)
}

/// Reduce a recorded output to a scalar with weights fixed by `seed`.
fn reduce(tape: &mut Tape<f64>, out: NodeId, seed: u64) -> Result<NodeId> {
    let n = tape.value(out).len();
    if n == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    tape.weighted_sum(out, w)
}

type Eval<'a> = dyn Fn(&[Vec<f64>], bool) -> Result<(f64, Vec<Vec<f64>>)> + 'a;

struct LeafProbe<'a> {
    run: &'a Eval<'a>,
    original: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl Probe for LeafProbe<'_> {
    fn eval(&mut self, i: usize, j: usize, delta: f64) -> Result<f64> {
        let base = self.values[i][j];
        self.values[i][j] = base + delta;
        let r = (self.run)(&self.values, false).map(|r| r.0);
        self.values[i][j] = base;
        r
    }

    fn rebase(&mut self, i: usize, j: usize, offset: f64) -> Result<f64> {
        self.values[i][j] = self.original[i][j] + offset;
        Ok((self.run)(&self.values, true)?.1[i][j])
    }

    fn restore(&mut self, i: usize, j: usize) {
        self.values[i][j] = self.original[i][j];
    }
}

/// Check an operation built by `build` from leaf inputs.
pub fn grad_check<F>(op: &str, inputs: &[(&str, Vec<f64>)], tolerance: f64, cfg: &GradCheckConfig, build: F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let run = |values: &[Vec<f64>], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &leaves)?;
        let root = reduce(&mut tape, out, cfg.seed)?;
        let value = tape.scalar(root);
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(root, 1.0)?;
        let grads = leaves
            .iter()
            .zip(values)
            .map(|(&l, v)| g.get(l).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; v.len()]))
            .collect();
        Ok((value, grads))
    };
    let values: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let names: Vec<String> = inputs.iter().map(|(n, _)| format!("{op}/{n}")).collect();
    let result = run(&values, true).and_then(|(value, analytic)| {
        let mut probe = LeafProbe { run: &run, original: values.clone(), values };
        compare(&names, &analytic, value, tolerance, cfg, &mut probe)
    });
    match result {
        Ok(inputs) => GradCheckReport { op: op.to_string(), tolerance, inputs, error: None },
        Err(e) => GradCheckReport::failed(op, tolerance, e),
    }
}

type LossFn<'a> = dyn Fn(&Model<f64>, bool) -> Result<(f64, Vec<Vec<f64>>)> + 'a;

struct ModelProbe<'a> {
    model: &'a mut Model<f64>,
    loss: &'a LossFn<'a>,
    original: Vec<Vec<f64>>,
}

impl ModelProbe<'_> {
    fn slot(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.model.params_mut().get_mut(crate::params::ParamId(i)).values[j]
    }
}

impl Probe for ModelProbe<'_> {
    fn eval(&mut self, i: usize, j: usize, delta: f64) -> Result<f64> {
        let base = *self.slot(i, j);
        *self.slot(i, j) = base + delta;
        let r = (self.loss)(self.model, false).map(|r| r.0);
        *self.slot(i, j) = base;
        r
    }

    fn rebase(&mut self, i: usize, j: usize, offset: f64) -> Result<f64> {
        *self.slot(i, j) = self.original[i][j] + offset;
        Ok((self.loss)(self.model, true)?.1[i][j])
    }

    fn restore(&mut self, i: usize, j: usize) {
        let v = self.original[i][j];
        *self.slot(i, j) = v;
    }
}

/// Check the registration loss with respect to every model parameter.
pub fn grad_check_model(
    op: &str,
    model: &mut Model<f64>,
    fixed: &[f64],
    moving: &[f64],
    dims: Dims,
    tolerance: f64,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let loss = |model: &Model<f64>, want: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let f = tape.constant(fixed.to_vec());
        let m = tape.constant(moving.to_vec());
        let g = model.build_forward(&mut tape, f, m, dims)?;
        let sim = tape.ncc(f, g.warped, dims, crate::objective::DEFAULT_NCC_WINDOW)?;
        let reg = tape.grad_reg(g.phi, dims)?;
        let root = tape.combine(sim, reg, 1.0, 0.5)?;
        if !want {
            return Ok((tape.scalar(root), Vec::new()));
        }
        let grads = tape.backward(root, 1.0)?;
        let mut out: Vec<Vec<f64>> = model.params().iter().map(|t| vec![0.0; t.len()]).collect();
        for &(pid, node) in tape.param_nodes() {
            if let Some(v) = grads.get(node) {
                out[pid.0] = v.to_vec();
            }
        }
        Ok((tape.scalar(root), out))
    };
    let names: Vec<String> = model.params().iter().map(|t| format!("{op}/{}", t.name)).collect();
    let original: Vec<Vec<f64>> = model.params().iter().map(|t| t.values.clone()).collect();
    let result = loss(model, true).and_then(|(value, analytic)| {
        let mut probe = ModelProbe { model, loss: &loss, original };
        compare(&names, &analytic, value, tolerance, cfg, &mut probe)
    });
    match result {
        Ok(inputs) => GradCheckReport { op: op.to_string(), tolerance, inputs, error: None },
        Err(e) => GradCheckReport::failed(op, tolerance, e),
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Displacements whose targets stay at least 0.15 voxel away from lattice
/// planes, so a small perturbation never crosses a kink of the interpolant.
fn off_lattice(rng: &mut ChaCha8Rng, n: usize, max_int: i32) -> Vec<f64> {
    (0..n)
        .map(|_| rng.random_range(-max_int..=max_int) as f64 + rng.random_range(0.15..0.85))
        .collect()
}

fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Normalized random rows of length `taps`.
fn simplex_rows(rng: &mut ChaCha8Rng, rows: usize, taps: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * taps);
    for _ in 0..rows {
        let r = uniform(rng, taps, 0.01, 1.0);
        let s: f64 = r.iter().sum();
        out.extend(r.iter().map(|v| v / s));
    }
    out
}

fn smooth(dims: Dims, amp: f64, seed: u64) -> Vec<f64> {
    smooth_velocity::<f64>(dims, 3.0, amp, seed).into_data()
}

/// Names of the cases run by [`gradient_suite`], in order.
pub const SUITE_CASES: [&str; 19] = [
    "trilinear_sample",
    "warp",
    "compose",
    "upsample_field_2x",
    "avg_pool_2x",
    "conv3",
    "instance_norm",
    "leaky_relu",
    "projection",
    "layer_norm",
    "neighborhood_attention",
    "subfields_from_attention",
    "reghead_fuse",
    "scaling_squaring",
    "ncc_loss",
    "grad_reg",
    "total_loss",
    "encode",
    "full_pipeline",
];

/// One check per differentiable operation plus the encoder and the full
/// registration loss.
pub fn gradient_suite(cfg: &GradCheckConfig) -> Vec<GradCheckReport> {
    SUITE_CASES.iter().map(|name| run_case(name, cfg)).collect()
}

/// Run a single named case of the suite.
pub fn run_case(name: &str, cfg: &GradCheckConfig) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(name.len() as u64 * 7919));
    let d = cfg.dims;
    let n = d.len();
    let tol = DEFAULT_TOLERANCE;
    match name {
        "trilinear_sample" => {
            let src = uniform(&mut rng, n, 0.0, 1.0);
            let field = off_lattice(&mut rng, 3 * n, 2);
            grad_check(name, &[("coords", field)], tol, cfg, |t, x| {
                let s = t.constant(src.clone());
                t.warp(s, x[0], 1, d)
            })
        }
        "warp" => {
            let src = uniform(&mut rng, 2 * n, 0.0, 1.0);
            let field = off_lattice(&mut rng, 3 * n, 1);
            grad_check(name, &[("source", src), ("field", field)], tol, cfg, |t, x| t.warp(x[0], x[1], 2, d))
        }
        "compose" => {
            let prev = smooth(d, 1.5, cfg.seed + 1);
            let res = off_lattice(&mut rng, 3 * n, 1);
            grad_check(name, &[("prev", prev), ("res", res)], tol, cfg, |t, x| t.compose(x[0], x[1], d))
        }
        "upsample_field_2x" => {
            let from = d.halved();
            let v = uniform(&mut rng, 3 * from.len(), -1.0, 1.0);
            grad_check(name, &[("field", v)], tol, cfg, |t, x| t.upsample(x[0], 3, from, d, 2.0))
        }
        "avg_pool_2x" => {
            let odd = Dims::new(d.nx - 1, d.ny, d.nz);
            let v = uniform(&mut rng, 2 * odd.len(), -1.0, 1.0);
            grad_check(name, &[("input", v)], tol, cfg, |t, x| t.avg_pool(x[0], 2, odd).map(|r| r.0))
        }
        "conv3" => {
            let (cin, cout) = (2, 3);
            let x = uniform(&mut rng, cin * n, -1.0, 1.0);
            let w = normal(&mut rng, cout * cin * TAPS, 0.3);
            let b = normal(&mut rng, cout, 0.3);
            grad_check(name, &[("input", x), ("weight", w), ("bias", b)], tol, cfg, |t, v| {
                t.conv3(v[0], v[1], v[2], cin, cout, d)
            })
        }
        "instance_norm" => {
            let c = 3;
            let x = uniform(&mut rng, c * n, -1.0, 2.0);
            let s = uniform(&mut rng, c, 0.5, 1.5);
            let b = normal(&mut rng, c, 0.3);
            grad_check(name, &[("input", x), ("scale", s), ("shift", b)], tol, cfg, |t, v| {
                t.instance_norm(v[0], v[1], v[2], c)
            })
        }
        "leaky_relu" => {
            let x = away_from_zero(&mut rng, n);
            grad_check(name, &[("input", x)], tol, cfg, |t, v| Ok(t.leaky_relu(v[0], 0.2)))
        }
        "projection" => {
            let (cin, width) = (8, 12);
            let x = uniform(&mut rng, cin * n, -1.0, 1.0);
            let w = normal(&mut rng, width * cin, 0.3);
            let b = normal(&mut rng, width, 0.1);
            grad_check(name, &[("input", x), ("weight", w), ("bias", b)], tol, cfg, |t, v| {
                t.project(v[0], v[1], v[2], cin, width)
            })
        }
        "layer_norm" => {
            let width = 12;
            let x = uniform(&mut rng, width * n, -1.0, 1.0);
            let s = uniform(&mut rng, width, 0.5, 1.5);
            let b = normal(&mut rng, width, 0.3);
            grad_check(name, &[("input", x), ("scale", s), ("shift", b)], tol, cfg, |t, v| {
                t.layer_norm(v[0], v[1], v[2], width)
            })
        }
        "neighborhood_attention" => {
            let att = AttentionConfig::new(2, 3, 3).expect("valid attention config");
            let q = normal(&mut rng, n * att.width(), 0.7);
            let k = normal(&mut rng, n * att.width(), 0.7);
            let b = normal(&mut rng, att.heads * att.taps(), 0.5);
            grad_check(name, &[("q", q), ("k", k), ("bias", b)], tol, cfg, |t, v| t.attention(v[0], v[1], v[2], d, att))
        }
        "subfields_from_attention" => {
            let heads = 2;
            let w = simplex_rows(&mut rng, heads * n, 27);
            grad_check(name, &[("weights", w)], tol, cfg, |t, v| t.subfields(v[0], heads, n, 3))
        }
        "reghead_fuse" => {
            let heads = 2;
            let x = uniform(&mut rng, 3 * heads * n, -1.0, 1.0);
            let w = normal(&mut rng, 3 * 3 * heads * TAPS, 0.1);
            let b = normal(&mut rng, 3, 0.1);
            grad_check(name, &[("subfields", x), ("weight", w), ("bias", b)], tol, cfg, |t, v| {
                t.conv3(v[0], v[1], v[2], 3 * heads, 3, d)
            })
        }
        "scaling_squaring" => {
            let v = smooth(d, 2.0, cfg.seed + 2);
            grad_check(name, &[("velocity", v)], SS_TOLERANCE, cfg, |t, x| t.scaling_squaring(x[0], d, 4))
        }
        "ncc_loss" => {
            let f = uniform(&mut rng, n, 0.0, 1.0);
            let g: Vec<f64> = f.iter().map(|v| 0.6 * v + rng.random_range(0.0..0.4)).collect();
            grad_check(name, &[("fixed", f), ("warped", g)], tol, cfg, |t, v| {
                t.ncc(v[0], v[1], d, crate::objective::DEFAULT_NCC_WINDOW)
            })
        }
        "grad_reg" => {
            let u = uniform(&mut rng, 3 * n, -1.0, 1.0);
            grad_check(name, &[("field", u)], tol, cfg, |t, v| t.grad_reg(v[0], d))
        }
        "total_loss" => {
            let pair = match synthetic_pair::<f64>(&SynthConfig { dims: d, ..SynthConfig::default() }, cfg.seed) {
                Ok(p) => p,
                Err(e) => return GradCheckReport::failed(name, tol, e),
            };
            let phi = off_lattice(&mut rng, 3 * n, 1);
            grad_check(name, &[("field", phi)], tol, cfg, |t, v| {
                let f = t.constant(pair.fixed.data().to_vec());
                let m = t.constant(pair.moving.data().to_vec());
                let w = t.warp(m, v[0], 1, d)?;
                let sim = t.ncc(f, w, d, crate::objective::DEFAULT_NCC_WINDOW)?;
                let reg = t.grad_reg(v[0], d)?;
                t.combine(sim, reg, 1.0, 0.5)
            })
        }
        "encode" => {
            let enc = EncoderConfig::new(2);
            let model = match Model::<f64>::new(ModelConfig { encoder: enc, ..ModelConfig::small() }, cfg.seed) {
                Ok(m) => m,
                Err(e) => return GradCheckReport::failed(name, tol, e),
            };
            let img = uniform(&mut rng, n, 0.0, 1.0);
            grad_check(name, &[("image", img)], tol, cfg, |t, v| {
                let levels = encode_on_tape(t, model.params(), model.encoder_ids(), &enc, v[0], d)?;
                let mut acc: Option<NodeId> = None;
                for (i, l) in levels.iter().enumerate() {
                    let r = reduce(t, l.node, cfg.seed + i as u64)?;
                    acc = Some(match acc {
                        None => r,
                        Some(a) => t.combine(a, r, 1.0, 1.0)?,
                    });
                }
                Ok(acc.expect("five levels"))
            })
        }
        "full_pipeline" => full_pipeline(cfg),
        other => GradCheckReport::failed(other, tol, crate::Error::invalid(format!("unknown gradcheck case {other}"))),
    }
}

/// Model and image pair used by the full-pipeline check.
pub struct PipelineInstance {
    pub model: Model<f64>,
    pub fixed: Vec<f64>,
    pub moving: Vec<f64>,
}

/// Image blur of the full-pipeline pair. Every difference stencil of a
/// parameter moves thousands of sample points, and each lattice plane they
/// cross bends the loss by an amount set by the image's second differences;
/// blurring keeps those bends small next to the gradient.
pub const PIPELINE_IMAGE_SIGMA: f64 = 1.5;

/// Small-preset model on a blurred synthetic pair, with every parameter other
/// than the encoder kernels moved off its initialization so all paths carry
/// signal and no activation sits at its kink.
pub fn full_pipeline_instance(cfg: &GradCheckConfig) -> Result<PipelineInstance> {
    let d = cfg.dims;
    let config = ModelConfig { encoder: EncoderConfig::new(2), head_dim: 3, ..ModelConfig::small() };
    let mut model = Model::<f64>::new(config, cfg.seed)?;
    let pair = synthetic_pair::<f64>(&SynthConfig { dims: d, max_disp: 1.5, ..SynthConfig::default() }, cfg.seed + 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 11);
    for t in model.params_mut().iter_mut() {
        let n = t.values.len();
        if t.name.ends_with(".scale") {
            t.values = normal(&mut rng, n, 0.1).iter().map(|v| 1.0 + v).collect();
            continue;
        }
        let std = match t.role {
            ParamRole::Projection | ParamRole::RelPosBias => 0.5,
            ParamRole::RegHeadConv => 0.05,
            ParamRole::NormAffine => 0.2,
            ParamRole::EncoderConv if t.name.ends_with(".bias") => 0.1,
            ParamRole::EncoderConv => continue,
        };
        t.values = normal(&mut rng, n, std);
    }
    Ok(PipelineInstance {
        model,
        fixed: gaussian_smooth(pair.fixed.data(), d, PIPELINE_IMAGE_SIGMA),
        moving: gaussian_smooth(pair.moving.data(), d, PIPELINE_IMAGE_SIGMA),
    })
}

fn full_pipeline(cfg: &GradCheckConfig) -> GradCheckReport {
    let name = "full_pipeline";
    match full_pipeline_instance(cfg) {
        Ok(mut inst) => {
            let per_tensor = GradCheckConfig { samples_per_input: cfg.samples_per_input.min(3), ..*cfg };
            grad_check_model(name, &mut inst.model, &inst.fixed, &inst.moving, cfg.dims, DEFAULT_TOLERANCE, &per_tensor)
        }
        Err(e) => GradCheckReport::failed(name, DEFAULT_TOLERANCE, e),
    }
}
