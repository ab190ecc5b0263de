use alloc::vec;
use alloc::vec::Vec;

use super::TraceRecord;
use crate::error::{check_len, invalid, Error, Result};
use crate::gating::GatedParams;
use crate::grouping::EPS_TINY_LINEAR;
use crate::models::{Dataset, GroupedModel};
use crate::numerics::DenseVector;

/// End state of an integrated trajectory and one record per step.
#[derive(Clone, Debug)]
pub struct FlowOutcome {
    pub params: GatedParams,
    pub v: DenseVector,
    pub trace: Vec<TraceRecord>,
}

/// Gradient flow of the full-batch gated objective, integrated with
/// classical RK4 at fixed step `dt` for `round(t_end / dt)` steps.
///
/// The trace holds a record at `t = 0` and after every step.
pub fn flow_integrate<M: GroupedModel + ?Sized>(
    model: &M,
    data: &Dataset,
    lambda: f64,
    init: &GatedParams,
    init_v: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<FlowOutcome> {
    flow_integrate_observed(model, data, lambda, init, init_v, t_end, dt, &mut |_, _, _| {})
}

/// [`flow_integrate`] calling `observer(t, params, v)` at every sampled time.
#[allow(clippy::too_many_arguments)]
pub fn flow_integrate_observed<M: GroupedModel + ?Sized>(
    model: &M,
    data: &Dataset,
    lambda: f64,
    init: &GatedParams,
    init_v: &[f64],
    t_end: f64,
    dt: f64,
    observer: &mut dyn FnMut(f64, &GatedParams, &[f64]),
) -> Result<FlowOutcome> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid("dt must be positive"));
    }
    if !(t_end >= dt && t_end.is_finite()) {
        return Err(invalid("t_end must be at least dt"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda must be finite and nonnegative"));
    }
    if **init.partition() != **model.partition() {
        return Err(invalid("initial state and model use different partitions"));
    }
    check_len("flow_integrate (v)", model.ungated_len(), init_v.len())?;
    let steps = libm::round(t_end / dt) as usize;

    let mut field = Field::new(model, data, lambda, init.clone());
    let n = field.len();
    let mut state = vec![0.0; n];
    init.write_flat(&mut state[..field.n_gated]);
    state[field.n_gated..].copy_from_slice(init_v);

    let mut k = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut tmp = vec![0.0; n];
    let mut trace = Vec::with_capacity(steps + 1);

    for step in 0..=steps {
        let t = step as f64 * dt;
        // k1 doubles as the evaluation of the current state for the trace
        let loss = field.eval(&state, &mut k[0])?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let rec = TraceRecord::gated(t, loss, &field.params, lambda, EPS_TINY_LINEAR)?;
        observer(t, &field.params, &state[field.n_gated..]);
        trace.push(rec);
        if step == steps {
            break;
        }
        for (c, (from, to)) in [(0.5, (0, 1)), (0.5, (1, 2)), (1.0, (2, 3))] {
            for ((x, s), kk) in tmp.iter_mut().zip(&state).zip(&k[from]) {
                *x = s + c * dt * kk;
            }
            field.eval(&tmp, &mut k[to])?;
        }
        for i in 0..n {
            state[i] += dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
        }
        if state.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged { step: step + 1 });
        }
    }
    field.params.read_flat(&state[..field.n_gated]);
    Ok(FlowOutcome {
        params: field.params,
        v: state[field.n_gated..].to_vec().into(),
        trace,
    })
}

/// Negative gradient field of the gated objective on the flat state.
struct Field<'a, M: ?Sized> {
    model: &'a M,
    data: &'a Dataset,
    lambda: f64,
    params: GatedParams,
    n_gated: usize,
    n_v: usize,
}

impl<'a, M: GroupedModel + ?Sized> Field<'a, M> {
    fn new(model: &'a M, data: &'a Dataset, lambda: f64, params: GatedParams) -> Self {
        let n_gated = params.n_params();
        Self {
            model,
            data,
            lambda,
            params,
            n_gated,
            n_v: model.ungated_len(),
        }
    }

    fn len(&self) -> usize {
        self.n_gated + self.n_v
    }

    /// Writes `-grad` at `state` into `out`, returns the data loss there.
    fn eval(&mut self, state: &[f64], out: &mut [f64]) -> Result<f64> {
        self.params.read_flat(&state[..self.n_gated]);
        let w = self.params.collapse();
        let ev = self.model.loss_grad(self.data, &w, &state[self.n_gated..], None)?;
        let gg = self.params.grads_from_effective(&ev.grad_w, self.lambda)?;
        gg.write_flat(&mut out[..self.n_gated]);
        out[self.n_gated..].copy_from_slice(&ev.grad_v);
        out.iter_mut().for_each(|x| *x = -*x);
        Ok(ev.loss)
    }
}
