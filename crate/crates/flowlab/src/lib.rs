//! # flowlab
//!
//! A desk-scale laboratory for generative flows on low-dimensional
//! distributions: flow matching from couplings, minibatch optimal
//! transport, Lipman-style kernel paths, Bayesian conditional flow
//! matching, continuous normalizing flows with adjoint gradients, and
//! variance-preserving score-based diffusion.
//!
//! Everything learned here can be checked against closed forms: exact
//! small-scale optimal transport, analytic velocity fields of
//! coupling-induced curves, Gaussian transport maps, analytic Gaussian
//! mixture posteriors, and analytic scores of VP-diffused mixtures.
//!
//! ## Layout
//!
//! | module | contents |
//! |--------|----------|
//! | [`measures`] | Gaussian / GMM / discrete measures, plans, sampling, densities |
//! | [`transport`] | exact assignment + transportation simplex, Gaussian maps, `W_{2,η}`, `W_β` |
//! | [`fields`] | analytic velocity fields and curve densities |
//! | [`nn`] | small MLP with reverse-mode autodiff, exact divergence, Adam |
//! | [`training`] | flow-matching losses and training loops |
//! | [`odeint`] | fixed-step ODE solvers, log-density flows, adjoint gradients |
//! | [`bayes`] | linear-Gaussian inverse problem with analytic posterior oracle |
//! | [`diffusion`] | VP-SDE forward/reverse, denoising score matching |
//! | [`cli`] | command-line entry points |
//!
//! All randomness flows through [`rng::Stream`], a counter-based keyed
//! generator: identical seeds and call sequences produce bit-identical
//! results on every run.

pub mod cli;
pub mod config;
pub mod csvio;
pub mod diffusion;
pub mod fields;
pub mod linalg;
pub mod measures;
pub mod nn;
pub mod odeint;
pub mod bayes;
pub mod rng;
pub mod training;
pub mod transport;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Construction of a measure or plan with invalid data.
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    /// Covariance failed the symmetric positive-definite check.
    #[error("covariance not symmetric positive definite: {0}")]
    NotSpd(String),
    /// Affine push-forward of a density-carrying measure by a singular matrix.
    #[error("non-invertible affine push-forward")]
    SingularPushforward,
    /// Exact OT solver received more atoms than the exactness regime allows.
    #[error("support too large for exact solver ({0} atoms, limit {1})")]
    SupportTooLarge(usize, usize),
    /// Conditional Wasserstein input whose first marginal differs from the reference.
    #[error("measures not in P_eta: {0}")]
    NotInPEta(String),
    /// Velocity query off the support of the pushed-forward discrete curve.
    #[error("point not in support of mu_t")]
    NotOnSupport,
    /// Curve density requested at the degenerate endpoint.
    #[error("density degenerate at t=1")]
    DegenerateDensity,
    /// Monte-Carlo conditional velocity window contained no effective mass.
    #[error("empty window")]
    EmptyWindow,
    /// Map-induced field evaluated where the interpolated map is singular.
    #[error("trajectory crossing at t={0}")]
    TrajectoryCrossing(f64),
    /// ODE/SDE state left the finite range.
    #[error("blow-up at t={0}")]
    BlowUp(f64),
    /// Backward adjoint state left the finite range.
    #[error("adjoint blow-up")]
    AdjointBlowUp,
    /// Training loss or gradient became non-finite.
    #[error("diverged")]
    Diverged,
    /// Conditional score requested at t=0 where the kernel is a point mass.
    #[error("degenerate conditional")]
    DegenerateConditional,
    /// Input outside an operation's documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Malformed on-disk data (CSV, config, checkpoint).
    #[error("parse error: {0}")]
    Parse(String),
    /// Divergence of a velocity field without a closed form.
    #[error("divergence unavailable for this field")]
    DivergenceUnavailable,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
