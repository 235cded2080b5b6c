use std::time::Instant;

use log::info;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::{count_cost, set_frozen, Cost, Translator};
use crate::pairing::{PairingConfig, Strategy};
use crate::synthdata::{stack, Dataset, TargetSplit};

use super::config::RunConfig;
use super::report::{EvalReport, EvalRow, RunManifest, Setting};
use super::train::{
    accuracy, adapt_target, argmax_rows, oracle_finetune, predict, pretrain_translator,
    train_source_classifier, AdaptLog, PretrainEpoch, SourceData, SourceEpoch, SourceModel,
};

/// Wall-clock seconds per phase. Kept out of the CSV report so reports
/// stay byte-reproducible.
#[derive(Debug, Clone, Default, Serialize)]
pub struct PhaseTimings {
    pub source: f64,
    pub pretrain: f64,
    pub adapt: f64,
    pub oracle: f64,
    pub eval: f64,
}

pub struct Experiment {
    pub manifest: RunManifest,
    pub source: SourceModel,
    pub source_log: Vec<SourceEpoch>,
    pub source_val_accuracy: f64,
    pub translator: Translator,
    pub pretrain_log: Vec<PretrainEpoch>,
    pub personalized: Vec<(u32, Translator)>,
    pub adapt_logs: Vec<AdaptLog>,
    pub oracles: Vec<(u32, SourceModel)>,
    pub report: EvalReport,
    pub cost: Cost,
    pub timings: PhaseTimings,
}

impl Experiment {
    pub fn personalized_for(&self, subject_id: u32) -> Option<&Translator> {
        self.personalized
            .iter()
            .find(|(id, _)| *id == subject_id)
            .map(|(_, t)| t)
    }
}

/// Accuracy of one setting on one target subject's test split.
pub fn evaluate_subject(
    setting: Setting,
    split: &TargetSplit,
    model: &SourceModel,
    translator: Option<&Translator>,
) -> Result<EvalRow> {
    let (x, y) = stack(&split.test)?;
    let pred = match (setting, translator) {
        (Setting::Pft, Some(t)) => predict(&x, model, Some(t))?.labels,
        (Setting::Pft, None) => {
            return Err(Error::Contract(format!(
                "pft evaluation of subject {} needs a personalized translator",
                split.subject_id
            )))
        }
        _ => {
            let f = model.extractor.features(&x)?;
            argmax_rows(&model.classifier.logits(&f)?)
        }
    };
    Ok(EvalRow {
        subject_id: split.subject_id,
        setting,
        accuracy: accuracy(&pred, &y),
        n_test: y.len(),
    })
}

/// Inference cost during adaptation: extractor and classifier frozen, the
/// translator trainable.
pub fn adaptation_cost(model: &SourceModel, translator: &Translator) -> Cost {
    let mut t = translator.clone();
    set_frozen(&mut t, false);
    let mut m = model.clone();
    m.freeze(true);
    count_cost(&[&m.extractor, &m.classifier, &t])
}

fn check_dataset(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    cfg.validate()?;
    if data.spec != cfg.dataset {
        return Err(Error::Config(
            "dataset was generated with a different dataset config".into(),
        ));
    }
    Ok(())
}

/// Source training on an open source set.
pub fn source_phase(cfg: &RunConfig, data: &Dataset) -> Result<(SourceData, SourceModel, Vec<SourceEpoch>, f64)> {
    check_dataset(cfg, data)?;
    let source = SourceData::new(data.source_train.clone(), data.source_val.clone());
    let (model, log, acc) = train_source_classifier(
        &source,
        data.spec.input_dim,
        data.spec.classes,
        &cfg.train,
    )?;
    info!("source model trained: val accuracy {acc:.2}");
    Ok((source, model, log, acc))
}

/// Adapts one translator per target subject. Source data must be closed.
pub fn adapt_all(
    source: &SourceData,
    data: &Dataset,
    model: &SourceModel,
    pretrained: &Translator,
    cfg: &RunConfig,
) -> Result<(Vec<(u32, Translator)>, Vec<AdaptLog>)> {
    if !source.is_closed() {
        return Err(Error::Contract(
            "source data must be closed before target adaptation".into(),
        ));
    }
    let mut out = Vec::with_capacity(data.targets.len());
    let mut logs = Vec::with_capacity(data.targets.len());
    for t in &data.targets {
        let (ts, log) = adapt_target(&t.adapt, model, pretrained, &cfg.train)?;
        out.push((t.subject_id, ts));
        logs.push(log);
    }
    Ok((out, logs))
}

pub fn oracle_all(data: &Dataset, model: &SourceModel, cfg: &RunConfig) -> Result<Vec<(u32, SourceModel)>> {
    data.targets
        .iter()
        .map(|t| Ok((t.subject_id, oracle_finetune(&t.oracle_train, model, &cfg.train)?)))
        .collect()
}

pub fn build_report(
    manifest: &RunManifest,
    data: &Dataset,
    model: &SourceModel,
    personalized: &[(u32, Translator)],
    oracles: &[(u32, SourceModel)],
) -> Result<EvalReport> {
    let mut report = EvalReport::new(manifest.short_hash());
    for t in &data.targets {
        report.rows.push(evaluate_subject(Setting::SourceOnly, t, model, None)?);
        let ts = personalized.iter().find(|(id, _)| *id == t.subject_id).map(|(_, x)| x);
        report.rows.push(evaluate_subject(Setting::Pft, t, model, ts)?);
        if let Some((_, o)) = oracles.iter().find(|(id, _)| *id == t.subject_id) {
            report.rows.push(evaluate_subject(Setting::Oracle, t, o, None)?);
        }
    }
    Ok(report)
}

/// Full protocol: source training, translator pretraining, closing the
/// source set, per-subject adaptation, oracle bound and evaluation.
pub fn run_experiment(cfg: &RunConfig, data: &Dataset) -> Result<Experiment> {
    let manifest = RunManifest::new(cfg, data)?;
    let mut timings = PhaseTimings::default();

    let t0 = Instant::now();
    let (mut source, model, source_log, source_val_accuracy) = source_phase(cfg, data)?;
    timings.source = t0.elapsed().as_secs_f64();
    let frozen_snapshot = model.clone();

    let t0 = Instant::now();
    let (translator, pretrain_log) =
        pretrain_translator(&source, &data.profiles, &model, &cfg.pairing, &cfg.train)?;
    source.close();
    timings.pretrain = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let (personalized, adapt_logs) = adapt_all(&source, data, &model, &translator, cfg)?;
    timings.adapt = t0.elapsed().as_secs_f64();

    if !model.bit_eq(&frozen_snapshot) {
        return Err(Error::Contract(
            "extractor or classifier changed after source training".into(),
        ));
    }

    let t0 = Instant::now();
    let oracles = oracle_all(data, &model, cfg)?;
    timings.oracle = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let report = build_report(&manifest, data, &model, &personalized, &oracles)?;
    timings.eval = t0.elapsed().as_secs_f64();

    let cost = adaptation_cost(&model, &translator);
    Ok(Experiment {
        manifest,
        source: model,
        source_log,
        source_val_accuracy,
        translator,
        pretrain_log,
        personalized,
        adapt_logs,
        oracles,
        report,
        cost,
        timings,
    })
}

/// Published BioVid accuracies per feature width, shown next to our sweep.
pub const DIM_REFERENCE: [(usize, f64); 4] = [(64, 79.2), (128, 80.9), (256, 81.8), (512, 82.46)];

pub const PAIRING_REFERENCE: &str =
    "published reference: cosine and landmark pairing above random, landmark the most consistent";

#[derive(Debug, Clone, Serialize)]
pub struct DimResult {
    pub feat_dim: usize,
    pub source_only: f64,
    pub pft: f64,
    pub oracle: f64,
    pub cost: Cost,
    pub trainable_fraction: f64,
    pub reference_pft: Option<f64>,
}

/// Reruns the whole protocol once per feature width on the same data.
pub fn ablate_dims(cfg: &RunConfig, data: &Dataset, dims: &[usize]) -> Result<Vec<(DimResult, EvalReport)>> {
    dims.iter()
        .map(|&d| {
            let mut c = cfg.clone();
            c.train.feat_dim = d;
            info!("dimension sweep: feat_dim {d}");
            let e = run_experiment(&c, data)?;
            let avg = |s| e.report.average(s).unwrap_or(f64::NAN);
            let res = DimResult {
                feat_dim: d,
                source_only: avg(Setting::SourceOnly),
                pft: avg(Setting::Pft),
                oracle: avg(Setting::Oracle),
                cost: e.cost,
                trainable_fraction: e.cost.trainable_fraction(),
                reference_pft: DIM_REFERENCE.iter().find(|r| r.0 == d).map(|r| r.1),
            };
            Ok((res, e.report))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct PairingResult {
    pub strategy: Strategy,
    pub source_only: f64,
    pub pft: f64,
    pub oracle: f64,
}

/// One source model and one set of oracle fits; translator pretraining and
/// adaptation are rerun per strategy.
pub fn ablate_pairing(
    cfg: &RunConfig,
    data: &Dataset,
    strategies: &[Strategy],
) -> Result<Vec<(PairingResult, EvalReport)>> {
    let (mut source, model, _, _) = source_phase(cfg, data)?;
    let mut pretrained = Vec::with_capacity(strategies.len());
    for &s in strategies {
        let pairing = PairingConfig {
            strategy: s,
            ..cfg.pairing.clone()
        };
        info!("pairing sweep: pretraining with {s}");
        let (t, _) = pretrain_translator(&source, &data.profiles, &model, &pairing, &cfg.train)?;
        pretrained.push((s, pairing, t));
    }
    source.close();
    let oracles = oracle_all(data, &model, cfg)?;
    pretrained
        .into_iter()
        .map(|(s, pairing, t)| {
            let c = RunConfig {
                pairing,
                ..cfg.clone()
            };
            let manifest = RunManifest::new(&c, data)?;
            let (personalized, _) = adapt_all(&source, data, &model, &t, &c)?;
            let report = build_report(&manifest, data, &model, &personalized, &oracles)?;
            let avg = |x| report.average(x).unwrap_or(f64::NAN);
            let res = PairingResult {
                strategy: s,
                source_only: avg(Setting::SourceOnly),
                pft: avg(Setting::Pft),
                oracle: avg(Setting::Oracle),
            };
            Ok((res, report))
        })
        .collect()
}
