//! Optimization drivers: dataset training with a decaying learning rate and
//! pairwise optimization on a single image pair.

use alloc::format;
use alloc::vec::Vec;

use crate::metrics::{mean_dice, warp_labels, LabelVolume};
use crate::model::{check_pair, ForwardGraph, Model, RegistrationResult};
use crate::objective::LossConfig;
use crate::optim::{lr_schedule, OptimConfig};
use crate::tape::{NodeId, Tape};
use crate::{Error, Real, Result, Volume};

/// One recorded forward pass with its loss terms.
pub struct LossGraph<T> {
    pub tape: Tape<T>,
    pub graph: ForwardGraph,
    pub similarity: NodeId,
    pub regularizer: NodeId,
    pub loss: NodeId,
}

impl<T: Real> LossGraph<T> {
    pub fn loss_value(&self) -> f64 {
        self.tape.scalar(self.loss).as_f64()
    }
}

/// Record `ncc(I_f, I_m o phi) + lambda * reg(phi)` for the current
/// parameters.
pub fn record_loss<T: Real>(
    model: &Model<T>,
    fixed: &Volume<T>,
    moving: &Volume<T>,
    loss: &LossConfig,
) -> Result<LossGraph<T>> {
    loss.validate()?;
    check_pair(fixed, moving)?;
    let dims = fixed.dims();
    let mut tape = Tape::new();
    let f = tape.constant(fixed.data().to_vec());
    let m = tape.constant(moving.data().to_vec());
    let graph = model.build_forward(&mut tape, f, m, dims)?;
    let similarity = tape.ncc(f, graph.warped, dims, loss.ncc_window)?;
    let regularizer = tape.grad_reg(graph.phi, dims)?;
    let total = tape.combine(similarity, regularizer, T::one(), T::lit(loss.lambda))?;
    let lg = LossGraph { tape, graph, similarity, regularizer, loss: total };
    let v = lg.loss_value();
    if !v.is_finite() {
        return Err(Error::non_finite(
            "total_loss",
            format!(
                "loss {v} (similarity {}, regularizer {})",
                lg.tape.scalar(similarity).as_f64(),
                lg.tape.scalar(regularizer).as_f64()
            ),
        ));
    }
    Ok(lg)
}

/// Loss and parameter gradients for one pair; gradients land in the model's
/// parameter store.
pub fn loss_and_grad<T: Real>(
    model: &mut Model<T>,
    fixed: &Volume<T>,
    moving: &Volume<T>,
    loss: &LossConfig,
) -> Result<f64> {
    let lg = record_loss(model, fixed, moving, loss)?;
    lg.tape.backward_into(lg.loss, T::one(), model.params_mut())?;
    Ok(lg.loss_value())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Mean step loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub epoch_lrs: Vec<f64>,
}

/// Batch-size-1 training over `pairs` for `opt.epochs` epochs with the
/// polynomial learning-rate decay.
pub fn train<T: Real>(model: &mut Model<T>, pairs: &[(Volume<T>, Volume<T>)], opt: &OptimConfig) -> Result<TrainHistory> {
    opt.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("training needs at least one image pair"));
    }
    let loss = opt.loss();
    let mut optimizer = opt.build::<T>();
    let mut history = TrainHistory::default();
    for m in 1..=opt.epochs {
        let lr = lr_schedule(m, opt.epochs, opt.lr_init)?;
        let mut sum = 0.0;
        for (fixed, moving) in pairs {
            let l = loss_and_grad(model, fixed, moving, &loss)?;
            optimizer.step(model.params_mut(), lr);
            history.step_losses.push(l);
            sum += l;
        }
        history.epoch_losses.push(sum / pairs.len() as f64);
        history.epoch_lrs.push(lr);
    }
    Ok(history)
}

/// Label maps used to score every pairwise-optimization iterate.
#[derive(Clone, Copy, Debug)]
pub struct PairLabels<'a> {
    pub fixed: &'a LabelVolume,
    pub moving: &'a LabelVolume,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoOutcome<T> {
    /// Result at the final parameters; its `loss_trace` equals `loss_trace`.
    pub result: RegistrationResult<T>,
    /// `po_iters + 1` entries: the loss before every update and after the last.
    pub loss_trace: Vec<f64>,
    /// Mean Dice of the warped moving labels at the same iterates, when labels
    /// were supplied.
    pub dsc_trace: Vec<f64>,
}

/// Fine-tune every parameter on one pair with `opt.po_iters` steps at the
/// constant rate `opt.lr_init`.
pub fn pairwise_optimize<T: Real>(
    model: &mut Model<T>,
    fixed: &Volume<T>,
    moving: &Volume<T>,
    opt: &OptimConfig,
    labels: Option<PairLabels<'_>>,
) -> Result<PoOutcome<T>> {
    opt.validate()?;
    if let Some(l) = labels {
        if l.fixed.dims() != fixed.dims() || l.moving.dims() != moving.dims() {
            return Err(Error::invalid("label maps must match the image dims"));
        }
    }
    let loss = opt.loss();
    let mut optimizer = opt.build::<T>();
    let mut loss_trace = Vec::with_capacity(opt.po_iters + 1);
    let mut dsc_trace = Vec::new();
    let mut it = 0;
    loop {
        let lg = record_loss(model, fixed, moving, &loss)?;
        loss_trace.push(lg.loss_value());
        if let Some(l) = labels {
            let phi = crate::DisplacementField::new(fixed.dims(), lg.tape.value(lg.graph.phi).to_vec())?;
            dsc_trace.push(mean_dice(l.fixed, &warp_labels(l.moving, &phi)?)?);
        }
        if it == opt.po_iters {
            let mut result = lg.graph.extract(&lg.tape, moving.spacing())?;
            result.loss_trace = loss_trace.clone();
            return Ok(PoOutcome { result, loss_trace, dsc_trace });
        }
        lg.tape.backward_into(lg.loss, T::one(), model.params_mut())?;
        drop(lg);
        optimizer.step(model.params_mut(), opt.lr_init);
        it += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{synthetic_pair, SynthConfig};
    use crate::Dims;

    fn small_pair(seed: u64) -> crate::synth::SyntheticPair<f32> {
        let cfg = SynthConfig { dims: Dims::cube(16), ..SynthConfig::default() };
        synthetic_pair(&cfg, seed).unwrap()
    }

    #[test]
    fn identical_pair_stays_at_the_optimum() {
        let p = small_pair(1);
        let mut model = Model::<f32>::new(ModelConfig::small(), 0).unwrap();
        let opt = OptimConfig { epochs: 5, ..OptimConfig::default() };
        let pairs = [(p.fixed.clone(), p.fixed.clone())];
        let h = train(&mut model, &pairs, &opt).unwrap();
        assert!(h.step_losses[0] < -0.99, "{:?}", h.step_losses);
        assert!(h.step_losses.iter().all(|&l| l <= -0.95), "{:?}", h.step_losses);
    }

    #[test]
    fn po_trace_lengths_and_determinism() {
        let p = small_pair(2);
        let opt = OptimConfig { po_iters: 3, ..OptimConfig::default() };
        let run = || {
            let mut model = Model::<f32>::new(ModelConfig::small(), 7).unwrap();
            let labels = PairLabels { fixed: &p.fixed_labels, moving: &p.moving_labels };
            pairwise_optimize(&mut model, &p.fixed, &p.moving, &opt, Some(labels)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.loss_trace.len(), 4);
        assert_eq!(a.dsc_trace.len(), 4);
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.result.phi, b.result.phi);
        assert!(a.loss_trace[3] < a.loss_trace[0], "{:?}", a.loss_trace);
    }

    #[test]
    fn rejects_bad_config() {
        let p = small_pair(3);
        let mut model = Model::<f32>::new(ModelConfig::small(), 0).unwrap();
        let opt = OptimConfig { po_iters: 0, ..OptimConfig::default() };
        assert!(pairwise_optimize(&mut model, &p.fixed, &p.moving, &opt, None).is_err());
        assert!(train(&mut model, &[], &OptimConfig::default()).is_err());
    }
}
