use crate::error::{Error, Result};
use crate::tensor::{compare_gradients, GradCheckConfig, GradCheckReport, Tensor, Var};

use super::params::{ParamId, ParamStore, Session};

/// Finite-difference check of `d loss / d param` for the listed parameters
/// of a model built on `store`. `forward` must be deterministic.
pub fn grad_check_params<F>(store: &ParamStore, params: &[ParamId], train: bool, forward: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let groups: Vec<_> = params.iter().map(|&id| store.param(id).group).collect();
    let mut s = Session::new(store, train, &groups);
    let loss = forward(&mut s)?;
    let back = s.backward(loss)?;
    let analytic: Vec<Tensor> = params
        .iter()
        .map(|&id| {
            back.grads
                .get(id)
                .cloned()
                .ok_or_else(|| Error::Tape(format!("parameter {} received no gradient", store.param(id).name)))
        })
        .collect::<Result<_>>()?;
    let leaves: Vec<Tensor> = params.iter().map(|&id| store.get(id).clone()).collect();
    let value = |vals: &[Tensor]| -> Result<f64> {
        let mut probe = store.clone();
        for (&id, v) in params.iter().zip(vals) {
            probe.set(id, v.clone())?;
        }
        let mut s = Session::new(&probe, train, &[]);
        let loss = forward(&mut s)?;
        s.tape.value(loss).item()
    };
    compare_gradients(value, &analytic, &leaves, cfg)
}
