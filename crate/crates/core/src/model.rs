//! The coarse-to-fine registration network: shared encoder, one attention
//! stage per pyramid level and field composition between levels.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{AttentionConfig, DEFAULT_NEIGHBORHOOD, PROJECTION_INIT_STD};
use crate::conv::TAPS;
use crate::encoder::{self, EncoderConfig, EncoderIds, LevelNode, LEVELS};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::reghead::{DEFAULT_SS_STEPS, REGHEAD_INIT_STD};
use crate::tape::{NodeId, Tape};
use crate::{Dims, DisplacementField, Error, Real, Result, Volume};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Attention heads per stage, coarse to fine.
    pub heads_per_level: [usize; LEVELS],
    pub head_dim: usize,
    pub neighborhood: usize,
    pub diffeomorphic: bool,
    pub ss_steps: usize,
}

impl ModelConfig {
    pub fn small() -> Self {
        ModelConfig {
            encoder: EncoderConfig::new(8),
            heads_per_level: [8, 4, 2, 1, 1],
            head_dim: 6,
            neighborhood: DEFAULT_NEIGHBORHOOD,
            diffeomorphic: false,
            ss_steps: DEFAULT_SS_STEPS,
        }
    }

    pub fn large() -> Self {
        ModelConfig {
            encoder: EncoderConfig::new(32),
            heads_per_level: [32, 16, 8, 4, 1],
            head_dim: 12,
            neighborhood: DEFAULT_NEIGHBORHOOD,
            diffeomorphic: false,
            ss_steps: DEFAULT_SS_STEPS,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "small" => Ok(Self::small()),
            "large" => Ok(Self::large()),
            other => Err(Error::invalid(format!("unknown preset {other:?}, expected small or large"))),
        }
    }

    pub fn with_diffeomorphic(mut self, on: bool) -> Self {
        self.diffeomorphic = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.heads_per_level.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid(format!(
                "heads must not increase from coarse to fine, got {:?}",
                self.heads_per_level
            )));
        }
        for k in 0..LEVELS {
            self.attention(k)?;
        }
        if self.diffeomorphic && self.ss_steps == 0 {
            return Err(Error::invalid("scaling and squaring needs at least one step"));
        }
        Ok(())
    }

    /// Attention settings of stage `stage` (0 = coarsest).
    pub fn attention(&self, stage: usize) -> Result<AttentionConfig> {
        AttentionConfig::new(self.heads_per_level[stage], self.head_dim, self.neighborhood)
    }

    /// Encoder level (1 = finest) feeding stage `stage` (0 = coarsest).
    pub fn encoder_level(stage: usize) -> usize {
        LEVELS - stage
    }
}

/// Parameters of one attention stage plus its fusion head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageIds {
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
    pub ln_scale: ParamId,
    pub ln_shift: ParamId,
    pub rel_bias: ParamId,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: EncoderIds,
    /// Coarse to fine.
    stages: Vec<StageIds>,
}

struct StageShape {
    cin: usize,
    width: usize,
    heads: usize,
    taps: usize,
}

fn stage_shape(cfg: &ModelConfig, stage: usize) -> Result<StageShape> {
    let att = cfg.attention(stage)?;
    Ok(StageShape {
        cin: cfg.encoder.channels(ModelConfig::encoder_level(stage)),
        width: att.width(),
        heads: att.heads,
        taps: att.taps(),
    })
}

fn normal_values<T: Real>(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| T::lit(dist.sample(rng))).collect()
}

impl<T: Real> Model<T> {
    /// Fresh parameters: Kaiming-uniform encoder, `N(0, 1e-5)` projections and
    /// fusion heads, zero biases and unit LayerNorm scale.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = encoder::init_encoder(&mut store, &config.encoder, &mut rng)?;
        let mut stages = Vec::with_capacity(LEVELS);
        for k in 0..LEVELS {
            let s = stage_shape(&config, k)?;
            let p = format!("stage{}", k + 1);
            let zeros = |n: usize| vec![T::zero(); n];
            stages.push(StageIds {
                proj_weight: store.add(
                    format!("{p}.proj.weight"),
                    ParamRole::Projection,
                    &[s.width, s.cin],
                    normal_values(&mut rng, s.width * s.cin, PROJECTION_INIT_STD),
                )?,
                proj_bias: store.add(format!("{p}.proj.bias"), ParamRole::Projection, &[s.width], zeros(s.width))?,
                ln_scale: store.add(
                    format!("{p}.norm.scale"),
                    ParamRole::NormAffine,
                    &[s.width],
                    vec![T::one(); s.width],
                )?,
                ln_shift: store.add(format!("{p}.norm.shift"), ParamRole::NormAffine, &[s.width], zeros(s.width))?,
                rel_bias: store.add(
                    format!("{p}.rel_bias"),
                    ParamRole::RelPosBias,
                    &[s.heads, s.taps],
                    zeros(s.heads * s.taps),
                )?,
                head_weight: store.add(
                    format!("{p}.reghead.weight"),
                    ParamRole::RegHeadConv,
                    &[3, 3 * s.heads, 3, 3, 3],
                    normal_values(&mut rng, 9 * s.heads * TAPS, REGHEAD_INIT_STD),
                )?,
                head_bias: store.add(format!("{p}.reghead.bias"), ParamRole::RegHeadConv, &[3], zeros(3))?,
            });
        }
        Ok(Model { config, params: store, encoder, stages })
    }

    /// Rebuild a model around an existing parameter set, checking every
    /// tensor the configuration needs.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let encoder = encoder::find_encoder(&params, &config.encoder)?;
        let get = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .find(name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
            if params.get(id).shape != shape {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    params.get(id).shape
                )));
            }
            Ok(id)
        };
        let mut stages = Vec::with_capacity(LEVELS);
        for k in 0..LEVELS {
            let s = stage_shape(&config, k)?;
            let p = format!("stage{}", k + 1);
            stages.push(StageIds {
                proj_weight: get(&format!("{p}.proj.weight"), &[s.width, s.cin])?,
                proj_bias: get(&format!("{p}.proj.bias"), &[s.width])?,
                ln_scale: get(&format!("{p}.norm.scale"), &[s.width])?,
                ln_shift: get(&format!("{p}.norm.shift"), &[s.width])?,
                rel_bias: get(&format!("{p}.rel_bias"), &[s.heads, s.taps])?,
                head_weight: get(&format!("{p}.reghead.weight"), &[3, 3 * s.heads, 3, 3, 3])?,
                head_bias: get(&format!("{p}.reghead.bias"), &[3])?,
            });
        }
        Ok(Model { config, params, encoder, stages })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn encoder_ids(&self) -> &EncoderIds {
        &self.encoder
    }

    pub fn stage_ids(&self) -> &[StageIds] {
        &self.stages
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            stages: self.stages.clone(),
        }
    }

    /// Record the full forward pass on `tape`. `fixed` and `moving` are
    /// single-channel image nodes of shape `dims`.
    pub fn build_forward(&self, tape: &mut Tape<T>, fixed: NodeId, moving: NodeId, dims: Dims) -> Result<ForwardGraph> {
        let enc = &self.config.encoder;
        let fp = encoder::encode_on_tape(tape, &self.params, &self.encoder, enc, fixed, dims)?;
        let mp = encoder::encode_on_tape(tape, &self.params, &self.encoder, enc, moving, dims)?;
        let mut residuals = Vec::with_capacity(LEVELS);
        let mut phi: Option<(NodeId, Dims)> = None;
        for (k, ids) in self.stages.iter().enumerate() {
            let l = ModelConfig::encoder_level(k) - 1;
            let (f, m): (LevelNode, LevelNode) = (fp[l], mp[l]);
            let up = match phi {
                None => None,
                Some((node, from)) => Some(tape.upsample(node, 3, from, f.dims, T::lit(2.0))?),
            };
            let m_node = match up {
                None => m.node,
                Some(u) => tape.warp(m.node, u, m.channels, m.dims)?,
            };
            let res = self.stage_on_tape(tape, ids, k, f.node, m_node, f.channels, f.dims)?;
            residuals.push((res, f.dims));
            let total = match up {
                None => res,
                Some(u) => tape.compose(u, res, f.dims)?,
            };
            phi = Some((total, f.dims));
        }
        let (phi, phi_dims) = phi.expect("at least one stage");
        if phi_dims != dims {
            return Err(Error::invalid(format!("final field has dims {phi_dims}, expected {dims}")));
        }
        let warped = tape.warp(moving, phi, 1, dims)?;
        Ok(ForwardGraph { phi, residuals, warped, dims })
    }

    #[allow(clippy::too_many_arguments)]
    fn stage_on_tape(
        &self,
        tape: &mut Tape<T>,
        ids: &StageIds,
        stage: usize,
        f: NodeId,
        m: NodeId,
        channels: usize,
        dims: Dims,
    ) -> Result<NodeId> {
        let att = self.config.attention(stage)?;
        let p = &self.params;
        let (w, b) = (tape.param(p, ids.proj_weight), tape.param(p, ids.proj_bias));
        let (s, t) = (tape.param(p, ids.ln_scale), tape.param(p, ids.ln_shift));
        let qf = tape.project(f, w, b, channels, att.width())?;
        let q = tape.layer_norm(qf, s, t, att.width())?;
        let km = tape.project(m, w, b, channels, att.width())?;
        let k = tape.layer_norm(km, s, t, att.width())?;
        let rb = tape.param(p, ids.rel_bias);
        let attn = tape.attention(q, k, rb, dims, att)?;
        let sub = tape.subfields(attn, att.heads, dims.len(), att.neighborhood)?;
        let (hw, hb) = (tape.param(p, ids.head_weight), tape.param(p, ids.head_bias));
        let fused = tape.conv3(sub, hw, hb, 3 * att.heads, 3, dims)?;
        if self.config.diffeomorphic {
            tape.scaling_squaring(fused, dims, self.config.ss_steps)
        } else {
            Ok(fused)
        }
    }

    /// Inference: total field, per-stage residuals and the warped image.
    pub fn forward(&self, fixed: &Volume<T>, moving: &Volume<T>) -> Result<RegistrationResult<T>> {
        check_pair(fixed, moving)?;
        let mut tape = Tape::new();
        let f = tape.constant(fixed.data().to_vec());
        let m = tape.constant(moving.data().to_vec());
        let g = self.build_forward(&mut tape, f, m, fixed.dims())?;
        g.extract(&tape, moving.spacing())
    }
}

pub(crate) fn check_pair<T: Real>(fixed: &Volume<T>, moving: &Volume<T>) -> Result<()> {
    if fixed.dims() != moving.dims() {
        return Err(Error::invalid(format!(
            "fixed image has dims {}, moving image has dims {}",
            fixed.dims(),
            moving.dims()
        )));
    }
    encoder::check_input_dims(fixed.dims())
}

/// Node handles of one recorded forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardGraph {
    pub phi: NodeId,
    /// Coarse to fine, with the grid of each stage.
    pub residuals: Vec<(NodeId, Dims)>,
    pub warped: NodeId,
    pub dims: Dims,
}

impl ForwardGraph {
    pub fn extract<T: Real>(&self, tape: &Tape<T>, spacing: [f64; 3]) -> Result<RegistrationResult<T>> {
        let phi = DisplacementField::new(self.dims, tape.value(self.phi).to_vec())?;
        let residuals = self
            .residuals
            .iter()
            .map(|&(n, d)| DisplacementField::new(d, tape.value(n).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let warped = Volume::new(self.dims, spacing, tape.value(self.warped).to_vec())?;
        Ok(RegistrationResult { phi, residuals, warped, loss_trace: Vec::new() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult<T> {
    /// Total field at input resolution.
    pub phi: DisplacementField<T>,
    /// Per-stage residuals, coarse to fine.
    pub residuals: Vec<DisplacementField<T>>,
    pub warped: Volume<T>,
    pub loss_trace: Vec<f64>,
}
