//! FeTA: frequency-adaptive attention for graph transformers.
//!
//! Transformer attention aggregates node signals through a row-stochastic
//! map, which caps how sharp a spectral filter a layer can express. This
//! crate implements the counter-move: each head's attention map is fed to a
//! small GNN that emits Chebyshev filter coefficients, and those coefficients
//! filter the head output on the *input graph's* Laplacian, per graph and per
//! head. Alongside the model live a numerical verifier for the expressiveness
//! bounds that motivate the design, and a synthetic benchmark generator whose
//! node classes are carved out of single Laplacian eigenvectors — a setting
//! built so that per-graph filter selection is what the task rewards.
//!
//! Modules, roughly bottom-up:
//!
//! - [`tensor`]: dense float64 tensors + reverse-mode autodiff tape.
//! - [`error`]: the crate-wide error type.
//! - [`graph`]: graphs, Laplacians, Jacobi eigendecomposition, graph Fourier
//!   transform.
//! - [`cheb`]: Chebyshev filter bank and the ARMA rational-filter variant.
//! - [`attention`]: scaled-dot / GAT / kernel-modulated attention and
//!   Laplacian positional encodings.
//! - [`coeffs`]: the attention-map → filter-coefficients GNN.
//! - [`optim`]: Adam with plateau halving and early stopping.
//! - [`model`]: the full encoder, training loop, checkpoints.
//! - [`verifier`]: numerical certification of the spectral error bounds.
//! - [`synthetic`]: SBM benchmark datasets with eigenvector-derived labels.
//! - [`cli`]: subcommand implementations, run configuration, CSV/SVG exports.

pub mod attention;
pub mod cheb;
pub mod cli;
pub mod coeffs;
pub mod error;
pub mod graph;
pub mod model;
pub mod optim;
pub mod synthetic;
pub mod tensor;
pub mod verifier;

pub use error::{FetaError, Result};
