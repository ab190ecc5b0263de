use alloc::vec;
use alloc::vec::Vec;

use super::{gated_trace_record, BatchSampler, Momentum, TraceRecord, TrainConfig};
use crate::error::{check_len, invalid, Error, Result};
use crate::gating::GatedParams;
use crate::models::{Dataset, GroupedModel};
use crate::numerics::DenseVector;

/// Final gated state, ungated parameters and recorded diagnostics.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: GatedParams,
    pub v: DenseVector,
    pub trace: Vec<TraceRecord>,
}

impl TrainOutcome {
    /// Collapsed weight with groups below `eps_tiny` set to zero.
    pub fn effective(&self, eps_tiny: f64) -> DenseVector {
        self.params.collapse_pruned(eps_tiny)
    }
}

/// Mini-batch SGD on the gated objective.
///
/// Gates start at one and `omega` at `init_omega`. Each step samples a batch
/// (epoch-wise shuffle; full batch when `batch_size >= n`), evaluates
/// `L0 + (lambda / D)(||omega||^2 + ||Gamma||_F^2)` on it, and moves the
/// stacked `(omega, Gamma, v)` along the momentum direction with step
/// `lr_t / |B|`.
///
/// A record is traced every `trace_every` steps and always at the end;
/// `trace_every == 0` keeps only the first and last record.
pub fn sgd_train<M: GroupedModel + ?Sized>(
    model: &M,
    data: &Dataset,
    config: &TrainConfig,
    init_omega: &[f64],
    init_v: &[f64],
    trace_every: usize,
) -> Result<TrainOutcome> {
    sgd_train_observed(model, data, config, init_omega, init_v, trace_every, &mut |_, _, _| {})
}

/// [`sgd_train`] calling `observer(step, params, v)` at step 0 and after
/// every update.
pub fn sgd_train_observed<M: GroupedModel + ?Sized>(
    model: &M,
    data: &Dataset,
    config: &TrainConfig,
    init_omega: &[f64],
    init_v: &[f64],
    trace_every: usize,
    observer: &mut dyn FnMut(usize, &GatedParams, &[f64]),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_len("sgd_train (v)", model.ungated_len(), init_v.len())?;
    let mut params = GatedParams::with_unit_gates(
        init_omega.to_vec().into(),
        model.partition().clone(),
        config.depth,
    )?;
    let n_gated = params.n_params();
    let mut state = vec![0.0; n_gated + init_v.len()];
    params.write_flat(&mut state);
    state[n_gated..].copy_from_slice(init_v);

    let mut sampler = BatchSampler::new(data.n(), config.batch_size, config.seed);
    let mut momentum = Momentum::new(state.len(), config.momentum, config.nesterov);
    let mut grad = vec![0.0; state.len()];
    let mut trace = Vec::new();
    let lambda = config.lambda;

    observer(0, &params, &state[n_gated..]);
    for step in 0..config.iters {
        let v = &state[n_gated..];
        if step == 0 || (trace_every > 0 && step % trace_every == 0) {
            let rec = gated_trace_record(model, data, &params, v, lambda, step as f64, config.eps_tiny)?;
            if !rec.loss_gated.is_finite() {
                return Err(Error::Diverged { step });
            }
            trace.push(rec);
        }
        let batch = sampler.next();
        let batch_len = batch.map_or(data.n(), <[usize]>::len);
        let w = params.collapse();
        let ev = model.loss_grad(data, &w, v, batch)?;
        if !ev.loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let gg = params.grads_from_effective(&ev.grad_w, lambda)?;
        gg.write_flat(&mut grad[..n_gated]);
        grad[n_gated..].copy_from_slice(&ev.grad_v);

        let lr = config.lr_schedule.at(step, config.iters) / batch_len as f64;
        momentum.step(&mut state, &grad, lr);
        if state.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged { step });
        }
        params.read_flat(&state[..n_gated]);
        observer(step + 1, &params, &state[n_gated..]);
    }
    let v: DenseVector = state[n_gated..].to_vec().into();
    let rec = gated_trace_record(model, data, &params, &v, lambda, config.iters as f64, config.eps_tiny)?;
    if !rec.loss_gated.is_finite() {
        return Err(Error::Diverged {
            step: config.iters,
        });
    }
    trace.push(rec);
    Ok(TrainOutcome { params, v, trace })
}

/// One vanilla gradient step on the gated objective with step size `eta`:
/// `omega_j <- omega_j - eta (prod_d gamma_{j,d} g_j + (2 lambda / D) omega_j)`
/// and the matching update of every gate, all evaluated at the current state.
pub fn sgd_step_exact(params: &GatedParams, grad_w: &[f64], lambda: f64, eta: f64) -> Result<GatedParams> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(invalid("step size must be positive"));
    }
    let gg = params.grads_from_effective(grad_w, lambda)?;
    let mut next = params.clone();
    for (x, g) in next.omega_mut().iter_mut().zip(gg.omega.iter()) {
        *x -= eta * g;
    }
    for (x, g) in next
        .gamma_mut()
        .as_mut_slice()
        .iter_mut()
        .zip(gg.gamma.as_slice())
    {
        *x -= eta * g;
    }
    Ok(next)
}
