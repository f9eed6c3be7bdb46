//! Training, evaluation, baselines and reporting.

pub mod baseline;
pub mod metrics;
pub mod report;
pub mod strata;
pub mod trainer;

pub use baseline::{ha_baseline, ha_predictions, HaTable};
pub use metrics::{Metrics, MetricsAccumulator, MetricsReport, Predictions, Strata, EPS_MAPE};
pub use report::{read_history, render_history, render_table, write_history};
pub use strata::{poi_density, poi_strata, stratified_report, with_strata, POI_RADIUS_M};
pub use trainer::{
    evaluate, normalized_mae, predict_partition, train, train_with, training_windows, EpochRecord, EvalOptions,
    TrainOutcome,
};

use crate::data::{DataBundle, Partition};
use crate::error::Result;
use crate::model::{Model, ModelConfig, ModelContext, Variant};

/// Outcome of training and testing one architecture variant.
#[derive(Clone, Debug)]
pub struct AblationResult {
    pub variant: Variant,
    pub outcome: TrainOutcome,
    pub report: MetricsReport,
}

/// Trains `variant` on a prepared bundle and scores it on the test partition.
pub fn ablate(config: &ModelConfig, bundle: &DataBundle, variant: Variant) -> Result<AblationResult> {
    let config = ModelConfig {
        variant,
        ..config.clone()
    };
    let ctx = ModelContext::build(&config, bundle)?;
    let outcome = train(Model::new(config, ctx)?, &bundle.data)?;
    let report = evaluate(&outcome.model, &bundle.data, Partition::Test, EvalOptions::default())?;
    Ok(AblationResult {
        variant,
        outcome,
        report,
    })
}
