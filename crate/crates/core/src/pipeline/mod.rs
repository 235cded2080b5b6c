//! Source training, translator pretraining, neutral-only adaptation,
//! evaluation against source-only and oracle bounds, and the ablations.

mod config;
mod report;
mod run;
mod train;

pub use config::{PlateauConfig, RunConfig, TrainConfig, FEAT_DIMS, SEEDS};
pub use report::{merge_reports, EvalReport, EvalRow, ReportMatrix, RunManifest, Setting};
pub use run::{
    ablate_dims, ablate_pairing, adapt_all, adaptation_cost, build_report, evaluate_subject,
    oracle_all, run_experiment, source_phase, DimResult, Experiment, PairingResult, PhaseTimings,
    DIM_REFERENCE, PAIRING_REFERENCE,
};
pub use train::{
    accuracy, adapt_target, argmax_rows, init_source_model, init_translator, make_pairs,
    optimizer_step, oracle_finetune, pairing_plan, predict, pretrain_batch, pretrain_translator,
    subject_batches, train_source_classifier, AdaptLog, FeatureBank, Prediction, PretrainEpoch,
    SourceData, SourceEpoch, SourceModel,
};
