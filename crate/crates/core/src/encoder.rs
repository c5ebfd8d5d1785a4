//! Five-level convolutional feature pyramid shared by the fixed and moving
//! images.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::conv::{DEFAULT_LEAKY_SLOPE, TAPS};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::{Dims, Error, FeatureMap, Real, Result, Volume};

pub const LEVELS: usize = 5;

/// Smallest extent per axis that still leaves one voxel at the coarsest level.
pub const MIN_EXTENT: usize = 1 << (LEVELS - 1);

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncoderConfig {
    /// Channels at the finest level; doubled at every coarser level.
    pub base_channels: usize,
    pub leaky_slope: f64,
}

impl EncoderConfig {
    pub fn new(base_channels: usize) -> Self {
        EncoderConfig { base_channels, leaky_slope: DEFAULT_LEAKY_SLOPE }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::invalid("encoder needs at least one base channel"));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid(format!("leaky slope must lie in [0, 1), got {}", self.leaky_slope)));
        }
        Ok(())
    }

    /// Output channels of level `level` (1 = finest).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    pub fn in_channels(&self, level: usize) -> usize {
        if level == 1 {
            1
        } else {
            self.channels(level - 1)
        }
    }
}

/// Parameters of one `[conv, instance norm, leaky ReLU] x 2` block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvBlockIds {
    pub conv1_weight: ParamId,
    pub conv1_bias: ParamId,
    pub norm1_scale: ParamId,
    pub norm1_shift: ParamId,
    pub conv2_weight: ParamId,
    pub conv2_bias: ParamId,
    pub norm2_scale: ParamId,
    pub norm2_shift: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderIds {
    /// Fine to coarse.
    pub blocks: Vec<ConvBlockIds>,
}

/// Kaiming-uniform weights for a leaky ReLU: `U(-b, b)` with
/// `b = sqrt(6 / ((1 + slope^2) * fan_in))`.
fn kaiming_uniform<T: Real>(rng: &mut impl Rng, len: usize, fan_in: usize, slope: f64) -> Vec<T> {
    let bound = Float::sqrt(6.0 / ((1.0 + slope * slope) * fan_in as f64));
    (0..len).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
}

fn add_conv<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
    slope: f64,
) -> Result<(ParamId, ParamId)> {
    let w = kaiming_uniform(rng, cout * cin * TAPS, cin * TAPS, slope);
    let wid = store.add(format!("{prefix}.weight"), ParamRole::EncoderConv, &[cout, cin, 3, 3, 3], w)?;
    let bid = store.add(format!("{prefix}.bias"), ParamRole::EncoderConv, &[cout], vec![T::zero(); cout])?;
    Ok((wid, bid))
}

fn add_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<(ParamId, ParamId)> {
    let s = store.add(format!("{prefix}.scale"), ParamRole::NormAffine, &[c], vec![T::one(); c])?;
    let t = store.add(format!("{prefix}.shift"), ParamRole::NormAffine, &[c], vec![T::zero(); c])?;
    Ok((s, t))
}

/// Register freshly initialized encoder parameters in `store`.
pub fn init_encoder<T: Real>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<EncoderIds> {
    cfg.validate()?;
    let mut blocks = Vec::with_capacity(LEVELS);
    for level in 1..=LEVELS {
        let (cin, cout) = (cfg.in_channels(level), cfg.channels(level));
        let p = format!("encoder.level{level}");
        let (conv1_weight, conv1_bias) = add_conv(store, rng, &format!("{p}.conv1"), cin, cout, cfg.leaky_slope)?;
        let (norm1_scale, norm1_shift) = add_norm(store, &format!("{p}.norm1"), cout)?;
        let (conv2_weight, conv2_bias) = add_conv(store, rng, &format!("{p}.conv2"), cout, cout, cfg.leaky_slope)?;
        let (norm2_scale, norm2_shift) = add_norm(store, &format!("{p}.norm2"), cout)?;
        blocks.push(ConvBlockIds {
            conv1_weight,
            conv1_bias,
            norm1_scale,
            norm1_shift,
            conv2_weight,
            conv2_bias,
            norm2_scale,
            norm2_shift,
        });
    }
    Ok(EncoderIds { blocks })
}

/// Look up encoder parameters by name, e.g. in a loaded checkpoint.
pub fn find_encoder<T: Real>(store: &ParamStore<T>, cfg: &EncoderConfig) -> Result<EncoderIds> {
    let get = |name: String, shape: &[usize]| -> Result<ParamId> {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
        if store.get(id).shape != shape {
            return Err(Error::invalid(format!(
                "parameter {name} has shape {:?}, expected {shape:?}",
                store.get(id).shape
            )));
        }
        Ok(id)
    };
    let mut blocks = Vec::with_capacity(LEVELS);
    for level in 1..=LEVELS {
        let (cin, cout) = (cfg.in_channels(level), cfg.channels(level));
        let p = format!("encoder.level{level}");
        blocks.push(ConvBlockIds {
            conv1_weight: get(format!("{p}.conv1.weight"), &[cout, cin, 3, 3, 3])?,
            conv1_bias: get(format!("{p}.conv1.bias"), &[cout])?,
            norm1_scale: get(format!("{p}.norm1.scale"), &[cout])?,
            norm1_shift: get(format!("{p}.norm1.shift"), &[cout])?,
            conv2_weight: get(format!("{p}.conv2.weight"), &[cout, cout, 3, 3, 3])?,
            conv2_bias: get(format!("{p}.conv2.bias"), &[cout])?,
            norm2_scale: get(format!("{p}.norm2.scale"), &[cout])?,
            norm2_shift: get(format!("{p}.norm2.shift"), &[cout])?,
        });
    }
    Ok(EncoderIds { blocks })
}

/// Spatial dims of every level, fine to coarse.
pub fn level_dims(dims: Dims) -> [Dims; LEVELS] {
    let mut out = [dims; LEVELS];
    for l in 1..LEVELS {
        out[l] = out[l - 1].halved();
    }
    out
}

pub fn check_input_dims(dims: Dims) -> Result<()> {
    if dims.min_extent() < MIN_EXTENT {
        return Err(Error::invalid(format!(
            "volume {dims} is too small for {LEVELS} levels: every axis needs at least {MIN_EXTENT} voxels"
        )));
    }
    Ok(())
}

/// One pyramid level recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelNode {
    pub node: NodeId,
    pub channels: usize,
    pub dims: Dims,
}

fn conv_block<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    b: &ConvBlockIds,
    x: NodeId,
    cin: usize,
    cout: usize,
    dims: Dims,
    slope: T,
) -> Result<NodeId> {
    let mut h = x;
    let stages = [
        (b.conv1_weight, b.conv1_bias, b.norm1_scale, b.norm1_shift, cin),
        (b.conv2_weight, b.conv2_bias, b.norm2_scale, b.norm2_shift, cout),
    ];
    for (w, bias, s, t, c) in stages {
        let (w, bias) = (tape.param(store, w), tape.param(store, bias));
        h = tape.conv3(h, w, bias, c, cout, dims)?;
        let (s, t) = (tape.param(store, s), tape.param(store, t));
        h = tape.instance_norm(h, s, t, cout)?;
        h = tape.leaky_relu(h, slope);
    }
    Ok(h)
}

/// Record the pyramid for a single-channel image node; returns levels fine
/// to coarse.
pub fn encode_on_tape<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    ids: &EncoderIds,
    cfg: &EncoderConfig,
    image: NodeId,
    dims: Dims,
) -> Result<Vec<LevelNode>> {
    check_input_dims(dims)?;
    let slope = T::lit(cfg.leaky_slope);
    let mut out: Vec<LevelNode> = Vec::with_capacity(LEVELS);
    for (l, block) in ids.blocks.iter().enumerate() {
        let level = l + 1;
        let (input, in_dims) = match out.last() {
            None => (image, dims),
            Some(prev) => tape.avg_pool(prev.node, prev.channels, prev.dims)?,
        };
        let cout = cfg.channels(level);
        let node = conv_block(tape, store, block, input, cfg.in_channels(level), cout, in_dims, slope)?;
        out.push(LevelNode { node, channels: cout, dims: in_dims });
    }
    Ok(out)
}

/// Feature pyramid of `img`, fine to coarse.
pub fn encode<T: Real>(
    img: &Volume<T>,
    store: &ParamStore<T>,
    ids: &EncoderIds,
    cfg: &EncoderConfig,
) -> Result<Vec<FeatureMap<T>>> {
    let mut tape = Tape::new();
    let x = tape.constant(img.data().to_vec());
    let levels = encode_on_tape(&mut tape, store, ids, cfg, x, img.dims())?;
    levels
        .iter()
        .map(|l| FeatureMap::new(l.channels, l.dims, tape.value(l.node).to_vec()))
        .collect()
}
