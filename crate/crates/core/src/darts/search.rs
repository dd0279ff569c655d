use crate::error::{Error, Result};
use crate::nn::{apply_stat_updates, Adam, ParamGroup, ParamStore, Session, Sgd};
use crate::tensor::Var;

/// Optimizers for the three parameter groups: SGD with momentum for the
/// convolutional weights, Adam for the remaining trainable weights and for α.
#[derive(Debug, Clone)]
pub struct SearchOptimizers {
    pub conv: Sgd,
    pub head: Adam,
    pub alpha: Adam,
}

impl SearchOptimizers {
    pub fn new(lr_conv: f64, lr_head: f64, lr_alpha: f64, weight_decay: f64) -> Self {
        SearchOptimizers {
            conv: Sgd::new(lr_conv, 0.9, weight_decay),
            head: Adam::new(lr_head, weight_decay),
            alpha: Adam::new(lr_alpha, 1e-3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub train: f64,
    pub val: f64,
}

fn checked(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("{what} loss is {loss}")))
    }
}

/// One update of the network weights with α frozen. Batch-norm running
/// statistics are refreshed from the same pass.
pub fn weight_step<F>(store: &mut ParamStore, opt: &mut SearchOptimizers, loss_fn: F) -> Result<f64>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let back = {
        let mut s = Session::new(store, true, &[ParamGroup::Conv, ParamGroup::Head]);
        let loss = loss_fn(&mut s)?;
        s.backward(loss)?
    };
    checked(back.loss, "training")?;
    if !back.grads.all_finite() {
        return Err(Error::NonFinite("training gradient".into()));
    }
    opt.conv.step(store, &back.grads, ParamGroup::Conv);
    opt.head.step(store, &back.grads, ParamGroup::Head);
    apply_stat_updates(store, &back.updates);
    Ok(back.loss)
}

/// One update of α on validation data with the weights frozen.
pub fn alpha_step<F>(store: &mut ParamStore, opt: &mut SearchOptimizers, loss_fn: F) -> Result<f64>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let back = {
        let mut s = Session::new(store, true, &[ParamGroup::Alpha]);
        let loss = loss_fn(&mut s)?;
        s.backward(loss)?
    };
    checked(back.loss, "validation")?;
    if !back.grads.all_finite() {
        return Err(Error::NonFinite("architecture gradient".into()));
    }
    opt.alpha.step(store, &back.grads, ParamGroup::Alpha);
    Ok(back.loss)
}

/// First-order bilevel step: weights on the training batch, then α on the
/// validation batch.
pub fn search_step<F, G>(store: &mut ParamStore, opt: &mut SearchOptimizers, train_loss: F, val_loss: G) -> Result<StepLosses>
where
    F: Fn(&mut Session) -> Result<Var>,
    G: Fn(&mut Session) -> Result<Var>,
{
    let train = weight_step(store, opt, train_loss)?;
    let val = alpha_step(store, opt, val_loss)?;
    Ok(StepLosses { train, val })
}
