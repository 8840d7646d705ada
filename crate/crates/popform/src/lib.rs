//! Population forms for structural health monitoring.
//!
//! A form is an overlapping mixture of Gaussian processes fitted to the
//! frequency response functions of a population of nominally identical
//! structures. Each component carries a single-mode accelerance mean, so the
//! fitted hyperparameters stay physically meaningful. New records are scored
//! by their negative log evidence under the real and imaginary forms.

pub mod error;
pub mod frf;
pub mod gp;
pub mod io;
pub mod novelty;
pub mod omgp;
pub mod optimizer;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use frf::{BladeSpec, Band, FrfDataset, FrfRecord, ModalMode, TrainingSet};
pub use gp::{GaussianPosterior, KernelParams, MeanParams, Part, Sign};
pub use novelty::{FormPair, NoveltyReport, SweepResult, Threshold};
pub use omgp::{Boxes, FitConfig, OmgpModel};
