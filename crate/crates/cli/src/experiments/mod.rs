//! The diagnostic experiments behind the CLI commands.

pub mod ablate;
pub mod attn;
pub mod fit1d;
pub mod variance;
