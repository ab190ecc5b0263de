use alloc::vec;
use alloc::vec::Vec;

use super::{BatchSampler, Momentum, TraceRecord, TrainConfig};
use crate::error::{check_len, Error, Result};
use crate::gating::add_penalty_subgradient;
use crate::models::{Dataset, GroupedModel};
use crate::numerics::DenseVector;

/// Final ungated weights and recorded diagnostics.
#[derive(Clone, Debug)]
pub struct DirectOutcome {
    pub w: DenseVector,
    pub v: DenseVector,
    pub trace: Vec<TraceRecord>,
}

/// (Sub)gradient descent on `L0 + lambda * sum_j ||w_j||^{2/D}` directly in
/// `w`, using `lambda (2/D) ||w_j||^{2/D - 2} w_j` away from zero and 0 at
/// zero groups. Batching, schedule and momentum follow [`super::sgd_train`].
///
/// Iterates starting away from zero essentially never land on exact zeros.
pub fn subgrad_direct<M: GroupedModel + ?Sized>(
    model: &M,
    data: &Dataset,
    config: &TrainConfig,
    init_w: &[f64],
    init_v: &[f64],
    trace_every: usize,
) -> Result<DirectOutcome> {
    subgrad_direct_observed(model, data, config, init_w, init_v, trace_every, &mut |_, _, _| {})
}

/// [`subgrad_direct`] calling `observer(step, w, v)` at step 0 and after every
/// update.
pub fn subgrad_direct_observed<M: GroupedModel + ?Sized>(
    model: &M,
    data: &Dataset,
    config: &TrainConfig,
    init_w: &[f64],
    init_v: &[f64],
    trace_every: usize,
    observer: &mut dyn FnMut(usize, &[f64], &[f64]),
) -> Result<DirectOutcome> {
    config.validate()?;
    let partition = model.partition().clone();
    let p = partition.p();
    check_len("subgrad_direct (w)", p, init_w.len())?;
    check_len("subgrad_direct (v)", model.ungated_len(), init_v.len())?;
    let mut state = Vec::with_capacity(p + init_v.len());
    state.extend_from_slice(init_w);
    state.extend_from_slice(init_v);

    let mut sampler = BatchSampler::new(data.n(), config.batch_size, config.seed);
    let mut momentum = Momentum::new(state.len(), config.momentum, config.nesterov);
    let mut grad = vec![0.0; state.len()];
    let mut trace = Vec::new();
    let record = |t: usize, state: &[f64]| -> Result<TraceRecord> {
        let (w, v) = state.split_at(p);
        let loss = model.loss(data, w, v, None)?;
        TraceRecord::direct(t as f64, loss, w, &partition, config.depth, config.lambda, config.eps_tiny)
    };

    observer(0, &state[..p], &state[p..]);
    for step in 0..config.iters {
        if step == 0 || (trace_every > 0 && step % trace_every == 0) {
            let rec = record(step, &state)?;
            if !rec.loss_gated.is_finite() {
                return Err(Error::Diverged { step });
            }
            trace.push(rec);
        }
        let batch = sampler.next();
        let batch_len = batch.map_or(data.n(), <[usize]>::len);
        let (w, v) = state.split_at(p);
        let ev = model.loss_grad(data, w, v, batch)?;
        if !ev.loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        grad[..p].copy_from_slice(&ev.grad_w);
        add_penalty_subgradient(w, &partition, config.depth, config.lambda, &mut grad[..p]);
        grad[p..].copy_from_slice(&ev.grad_v);

        let lr = config.lr_schedule.at(step, config.iters) / batch_len as f64;
        momentum.step(&mut state, &grad, lr);
        if state.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged { step });
        }
        observer(step + 1, &state[..p], &state[p..]);
    }
    let rec = record(config.iters, &state)?;
    if !rec.loss_gated.is_finite() {
        return Err(Error::Diverged { step: config.iters });
    }
    trace.push(rec);
    let v = state.split_off(p);
    Ok(DirectOutcome {
        w: state.into(),
        v: v.into(),
        trace,
    })
}
