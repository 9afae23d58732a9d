//! Structure metrics, forecasting errors, the Linear Granger baseline, and the
//! metrics report.

mod forecast;
mod granger;
mod metrics;
mod report;

pub use forecast::{forecast_mse, forecast_mse_per_shop, persistence_mse, var_forecast_mse};
pub use granger::{fit_var, linear_granger, BaselineConfig, VarModel};
pub use metrics::{auroc, auroc_scores, mean_std, score_structure, structural_accuracy, StructureScore};
pub use report::{evaluate_structure, posterior_structure, MetricsReport, StructureSummary};
