//! State-space sequence models.
//!
//! The static path works with dense `N×N` systems: HiPPO initialisation,
//! zero-order-hold discretisation, the recurrence, the equivalent causal
//! convolution kernel and the attention-style operator. The selective path
//! uses diagonal state matrices with input-dependent `Δ`, `B`, `C` and is
//! differentiable on the tape.

mod causal;
mod discrete;
mod hippo;
mod metassm;
mod selective;

pub use causal::{basis_kernel, causal_conv, kernel_basis};
pub use discrete::{
    attention_matrix, expm, kernel_apply, kernel_materialize, recurrent_scan, zoh_discretize, DiscreteSsm,
    SsmKernel, SsmParams,
};
pub use hippo::{hippo_b, hippo_diagonal, hippo_init};
pub use metassm::{DirectionWeights, MetaSsm};
pub use selective::{inv_softplus, scan_forward, selective_scan, ScanInputs, SelectiveProjection, SsmTrace};
