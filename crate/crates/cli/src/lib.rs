//! Command-line surface of the segmentation lab: dataset files, run
//! manifests and the diagnostic experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::unnecessary_cast)]

pub mod commands;
pub mod dataset;
pub mod experiments;
pub mod manifest;

use mmunet::Error;

/// Process exit code for an error: 2 for configuration and shape errors,
/// 3 for numerical failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape { .. } => 2,
        Error::Numerical(_) => 3,
        Error::Format(_) | Error::Io(_) => 1,
    }
}
