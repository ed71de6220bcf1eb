//! Robustness certification for feedforward ReLU/tanh/sigmoid/arctan classifiers.
//!
//! The crate bounds a classification margin `g_t(x) = f_c(x) - f_t(x)` by a pair of
//! affine functions of the input that are valid on an `l_p` ball around a nominal
//! point, then answers two questions about the network under input perturbation:
//!
//! * **Worst case** — the largest radius for which the margin provably stays
//!   positive ([`worst_case`]).
//! * **Probabilistic** — for random perturbations (bounded-support or Gaussian),
//!   two-sided bounds `gamma_L <= P[g_t(X) > a] <= gamma_U`, and the largest radius
//!   at which the lower bound still clears a requested confidence ([`probabilistic`],
//!   [`driver`]).
//!
//! [`relaxation`] builds the affine sandwich by backward propagation through
//! per-neuron linear relaxations, [`oracle`] holds independent ground-truth
//! estimators used to validate certificates, and [`driver`] batches everything
//! into reproducible reports.

pub mod driver;
mod error;
pub mod model;
pub mod oracle;
pub mod probabilistic;
pub mod relaxation;
pub mod worst_case;

pub use error::{Error, Result};
pub use model::{ActivationKind, InputSpec, Layer, Network, Norm};
pub use relaxation::{MarginLinearBounds, NeuronRelaxation, PreactivationBounds, RelaxMode};
pub use worst_case::WorstCaseCertificate;
