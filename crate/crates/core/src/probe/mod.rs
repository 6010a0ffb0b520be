//! Linear probes over hidden states and the perturbation arithmetic around
//! them.

mod faithfulness;
mod linear;
mod positions;
mod sweep;

pub use faithfulness::{
    faithfulness_dataset, faithfulness_matrix, fit_faithfulness_probe, perturb_answer, FaithfulnessProbe,
    LogisticConfig, GAP_COLUMNS,
};
pub use linear::{
    cumulative_deviation, fit_ridge, fit_ridge_probe, pearson, perturb_prediction, probe_predict,
    projection_intensity, spearman, NumericalProbe, RidgeFit,
};
pub use positions::{collect_hidden, numeric_positions, PositionTag};
pub use sweep::{directional_sweep, sweep_csv, SweepConfig, SweepPoint, SweepResult};
