//! Mirror descent with the potential `(1/p) ||w||_p^p` ("p-GD") for linear
//! classification, together with independent lp max-margin and
//! regularization-path oracles, synthetic fixtures, a small network trainer and
//! the experiment harness behind the `pgd` command-line tool.

pub mod error;
pub mod expcli;
pub mod fmt;
pub mod linmodel;
pub mod norm;
pub mod oracle;
pub mod pgd;
pub mod potential;
pub mod synthdata;
pub mod toynet;

pub use error::{Error, Result};
pub use linmodel::{Dataset, Loss};
pub use pgd::{PgdConfig, TrainTrace};
pub use potential::{Potential, WeightVector};
