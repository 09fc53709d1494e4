//! Fitting the penalized ESCA model by majorization-minimization.
//!
//! Every iteration replaces each block's loss by an isotropic quadratic
//! around the current natural parameters and each concave group penalty by
//! its tangent line, then solves the surrogate exactly by block-coordinate
//! descent: offsets, a Procrustes rotation for the scores, and group
//! soft-thresholding for the loadings.

mod fit;
mod model;
mod updates;
mod varexp;

pub use fit::{fit, initialize, objective, surrogate, FitConfig, FitResult};
pub use model::{EscaModel, ACTIVE_TOL, CONSTRAINT_TOL};
pub use updates::{update_loadings, update_offsets, update_scores, ScoresUpdate};
pub use varexp::{variation_explained, VariationExplained};
