//! Fusion of per-head subfields into one residual field, with optional
//! diffeomorphic integration by scaling and squaring.

use alloc::format;
use alloc::vec::Vec;

use crate::attention::SubfieldStack;
use crate::conv::{conv3_forward, TAPS};
use crate::field::compose_forward;
use crate::{DisplacementField, Error, Real, Result};

/// Standard deviation of the fusion convolution weights at initialization.
pub const REGHEAD_INIT_STD: f64 = 1e-5;
pub const DEFAULT_SS_STEPS: usize = 7;

/// Integration settings shared by every pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RegHeadConfig {
    /// Treat the fused output as a stationary velocity field.
    pub diffeomorphic: bool,
    pub ss_steps: usize,
}

impl Default for RegHeadConfig {
    fn default() -> Self {
        RegHeadConfig {
            diffeomorphic: false,
            ss_steps: DEFAULT_SS_STEPS,
        }
    }
}

/// One 3x3x3 convolution from `3 * heads` subfield channels to 3 components.
#[derive(Clone, Debug, PartialEq)]
pub struct RegHeadWeights<T> {
    pub heads: usize,
    /// `[3][3 * heads][27]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> RegHeadWeights<T> {
    pub fn zeros(heads: usize) -> Self {
        RegHeadWeights {
            heads,
            weight: alloc::vec![T::zero(); 3 * 3 * heads * TAPS],
            bias: alloc::vec![T::zero(); 3],
        }
    }

    /// Averages the heads' subfields through the center tap.
    pub fn mean_of_heads(heads: usize) -> Self {
        let mut w = Self::zeros(heads);
        let share = T::one() / T::from_usize(heads);
        for c in 0..3 {
            for s in 0..heads {
                w.weight[(c * 3 * heads + 3 * s + c) * TAPS + 13] = share;
            }
        }
        w
    }
}

/// Apply the fusion convolution. The result is the residual field, or the
/// velocity field when the model is diffeomorphic.
pub fn fuse<T: Real>(stack: &SubfieldStack<T>, p: &RegHeadWeights<T>) -> Result<DisplacementField<T>> {
    let cin = 3 * p.heads;
    if stack.heads() != p.heads || p.weight.len() != 3 * cin * TAPS || p.bias.len() != 3 {
        return Err(Error::invalid(format!(
            "reghead expects {} subfields, stack has {}",
            p.heads,
            stack.heads()
        )));
    }
    let out = conv3_forward(stack.data(), cin, stack.dims(), &p.weight, &p.bias, 3);
    DisplacementField::new(stack.dims(), out)
}

/// Integrate a stationary velocity field: scale by `2^-steps`, then compose
/// the field with itself `steps` times.
pub fn scaling_squaring<T: Real>(v: &DisplacementField<T>, steps: usize) -> Result<DisplacementField<T>> {
    if steps == 0 {
        return Err(Error::invalid("scaling and squaring needs at least one step"));
    }
    let dims = v.dims();
    let scale = T::one() / T::from_usize(1usize << steps);
    let mut phi: Vec<T> = v.data().iter().map(|&x| x * scale).collect();
    for _ in 0..steps {
        phi = compose_forward(&phi, &phi, dims);
    }
    DisplacementField::new(dims, phi)
}

/// Fusion followed by integration when `cfg.diffeomorphic` is set.
pub fn residual_field<T: Real>(
    stack: &SubfieldStack<T>,
    p: &RegHeadWeights<T>,
    cfg: &RegHeadConfig,
) -> Result<DisplacementField<T>> {
    let fused = fuse(stack, p)?;
    if cfg.diffeomorphic {
        scaling_squaring(&fused, cfg.ss_steps)
    } else {
        Ok(fused)
    }
}
