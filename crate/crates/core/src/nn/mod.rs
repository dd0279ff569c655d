//! Parameters, layers and optimizers on top of the tape.

mod check;
mod layers;
mod optim;
mod params;

pub use check::grad_check_params;
pub use layers::{kaiming_uniform, xavier_uniform, BatchNorm, Conv2d, Linear};
pub use optim::{Adam, Sgd};
pub use params::{
    apply_stat_updates, Backward, Param, ParamGrads, ParamGroup, ParamId, ParamStore, Session, StatUpdate,
};
