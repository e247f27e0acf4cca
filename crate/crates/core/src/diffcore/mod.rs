//! Differentiable-computation core: tape autodiff, parameters, MLPs,
//! stable softmax, and Adam.

pub mod adam;
pub mod gradcheck;
pub mod nn;
pub mod tape;

pub use adam::AdamState;
pub use nn::{
    glorot_uniform, mlp_eval, softmax_stable, MlpSpec, ParamStore, SoftmaxOut, Tensor,
    DEFAULT_TEMP_FLOOR,
};
pub use tape::{Grads, Tape, Var};
