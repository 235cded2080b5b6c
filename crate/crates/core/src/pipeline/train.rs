use std::collections::BTreeMap;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{cross_entropy, kl_divergence, source_total, style_loss, target_loss};
use crate::models::{set_frozen, Classifier, FeatureExtractor, Network, Translator};
use crate::numerics::{Adam, Gradients, Tape, Tensor};
use crate::pairing::{pair_cosine, pair_landmark, pair_random, Pair, PairingConfig, Strategy};
use crate::synthdata::{derived_rng, stack, Sample, SubjectProfile};

use super::config::TrainConfig;

// Independent random streams per phase, mixed with the run seed.
const STREAM_INIT: u64 = 0x1000_0000_0000;
const STREAM_SOURCE_ORDER: u64 = STREAM_INIT + 1;
const STREAM_TRANSLATOR_INIT: u64 = STREAM_INIT + 2;
const STREAM_PAIRS: u64 = STREAM_INIT + 3;
const STREAM_PRETRAIN_ORDER: u64 = STREAM_INIT + 4;
const STREAM_ADAPT: u64 = STREAM_INIT + 0x100;
const STREAM_ORACLE: u64 = STREAM_INIT + 0x10_0000;

/// Frozen-after-training extractor and classifier.
#[derive(Debug, Clone)]
pub struct SourceModel {
    pub extractor: FeatureExtractor,
    pub classifier: Classifier,
}

impl SourceModel {
    pub fn freeze(&mut self, frozen: bool) {
        set_frozen(&mut self.extractor, frozen);
        set_frozen(&mut self.classifier, frozen);
    }

    pub fn bit_eq(&self, other: &SourceModel) -> bool {
        self.extractor.bit_eq(&other.extractor) && self.classifier.bit_eq(&other.classifier)
    }
}

/// Source samples behind an access guard that is closed before adaptation.
#[derive(Debug)]
pub struct SourceData {
    train: Vec<Sample>,
    val: Vec<Sample>,
    closed: bool,
}

impl SourceData {
    pub fn new(train: Vec<Sample>, val: Vec<Sample>) -> Self {
        SourceData {
            train,
            val,
            closed: false,
        }
    }

    pub fn train(&self) -> Result<&[Sample]> {
        if self.closed {
            return Err(Error::SourceClosed);
        }
        Ok(&self.train)
    }

    pub fn val(&self) -> Result<&[Sample]> {
        if self.closed {
            return Err(Error::SourceClosed);
        }
        Ok(&self.val)
    }

    /// Irreversibly drops the samples.
    pub fn close(&mut self) {
        self.closed = true;
        self.train = Vec::new();
        self.val = Vec::new();
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SourceEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub expr: f64,
    pub style: f64,
    pub lr: f64,
}

/// Adaptation loss over all frames before each epoch, then after the last.
#[derive(Debug, Clone, Serialize)]
pub struct AdaptLog {
    pub subject_id: u32,
    pub losses: Vec<f64>,
}

/// Adds gradients to the trainable tensors and applies one Adam update.
/// Returns how many tensors were updated; with nothing trainable the step
/// is skipped with a warning.
pub fn optimizer_step(grads: &Gradients, mut params: Vec<&mut Tensor>, opt: &mut Adam) -> Result<usize> {
    if params.is_empty() {
        warn!("optimizer step skipped: no trainable parameters");
        return Ok(0);
    }
    for p in params.iter_mut() {
        if !grads.contains(p.id()) {
            return Err(Error::Contract(
                "a trainable tensor was not bound on the tape".into(),
            ));
        }
    }
    grads.accumulate_into(params.iter_mut().map(|p| &mut **p))?;
    opt.step(&mut params)?;
    Ok(params.len())
}

fn shuffled_chunks<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let r = logits.row(i);
            let mut best = 0;
            for (c, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    100.0 * hits as f64 / labels.len() as f64
}

fn loss_and_accuracy(model: &SourceModel, x: &Tensor, y: &[usize]) -> Result<(f64, f64)> {
    let feats = model.extractor.features(x)?;
    let logits = model.classifier.logits(&feats)?;
    let mut tape = Tape::new();
    let v = tape.param(&logits);
    let l = cross_entropy(&mut tape, v, y)?;
    Ok((tape.scalar(l), accuracy(&argmax_rows(&logits), y)))
}

pub fn init_source_model(cfg: &TrainConfig, input_dim: usize, classes: usize) -> SourceModel {
    let mut rng = derived_rng(cfg.seed, STREAM_INIT);
    let extractor = FeatureExtractor::new(
        input_dim,
        cfg.hidden(),
        cfg.feat_dim,
        cfg.extractor_depth,
        &mut rng,
    );
    let classifier = Classifier::new(cfg.feat_dim, classes, &mut rng);
    SourceModel {
        extractor,
        classifier,
    }
}

/// Supervised minibatch training of extractor and classifier, starting
/// from `model`, with the plateau schedule driven by `monitor` loss.
fn supervised_fit(
    model: &mut SourceModel,
    train: &[Sample],
    monitor: Option<&[Sample]>,
    epochs: usize,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<SourceEpoch>> {
    model.freeze(false);
    let (x, y) = stack(train)?;
    let held = monitor.map(stack).transpose()?;
    let mut opt = {
        let mut params: Vec<&Tensor> = model.extractor.named_params().into_iter().map(|(_, t)| t).collect();
        params.extend(model.classifier.named_params().into_iter().map(|(_, t)| t));
        Adam::new(params, cfg.lr)
    };
    let mut sched = cfg.plateau.schedule(cfg.lr);
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut total = 0.0;
        let batches = shuffled_chunks(x.rows(), cfg.batch, rng);
        for idx in &batches {
            let xb = x.select_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let (loss, grads) = {
                let mut tape = Tape::new();
                let v = tape.constant(xb);
                let f = model.extractor.extract(&mut tape, v)?.output();
                let logits = model.classifier.classify(&mut tape, f)?;
                let l = cross_entropy(&mut tape, logits, &yb)?;
                (tape.scalar(l), tape.backward(l)?)
            };
            total += loss * idx.len() as f64;
            let mut params = model.extractor.trainable_params();
            params.extend(model.classifier.trainable_params());
            optimizer_step(&grads, params, &mut opt)?;
        }
        let train_loss = total / x.rows() as f64;
        let (val_loss, val_accuracy) = match &held {
            Some((xv, yv)) => loss_and_accuracy(model, xv, yv)?,
            None => (train_loss, f64::NAN),
        };
        opt.lr = sched.step(val_loss);
        debug!("epoch {epoch}: train {train_loss:.4} val {val_loss:.4} acc {val_accuracy:.2}");
        log.push(SourceEpoch {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            lr: opt.lr,
        });
    }
    model.freeze(true);
    Ok(log)
}

/// Trains the source extractor and classifier, then freezes them.
/// Returns the model, the per-epoch log and the final validation accuracy.
pub fn train_source_classifier(
    source: &SourceData,
    input_dim: usize,
    classes: usize,
    cfg: &TrainConfig,
) -> Result<(SourceModel, Vec<SourceEpoch>, f64)> {
    cfg.validate()?;
    let (train, val) = (source.train()?, source.val()?);
    let mut model = init_source_model(cfg, input_dim, classes);
    let mut rng = derived_rng(cfg.seed, STREAM_SOURCE_ORDER);
    let log = supervised_fit(&mut model, train, Some(val), cfg.classifier_epochs, cfg, &mut rng)?;
    let (xv, yv) = stack(val)?;
    let (_, acc) = loss_and_accuracy(&model, &xv, &yv)?;
    Ok((model, log, acc))
}

/// Builds a pairing plan. Random plans are redrawn every epoch by the
/// pretraining loop; this returns the first one.
pub fn make_pairs(
    train: &[Sample],
    profiles: &[SubjectProfile],
    model: &SourceModel,
    pairing: &PairingConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Pair>> {
    match pairing.strategy {
        Strategy::Random => pair_random(train, rng),
        Strategy::Cosine => pair_cosine(train, &model.extractor, &model.classifier, pairing, rng),
        Strategy::Landmark => pair_landmark(train, profiles, pairing, rng),
    }
}

/// Groups pairs by content subject so batch statistics describe one
/// subject, then splits into batches of at most `batch`. Fragments of a
/// single pair are merged into a neighbour so every batch has >= 2 rows.
pub fn subject_batches<R: Rng + ?Sized>(
    pairs: &[Pair],
    samples: &[Sample],
    batch: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Pair>>> {
    if pairs.len() < 2 {
        return Err(Error::Degenerate("pretraining needs at least two pairs".into()));
    }
    let mut groups: BTreeMap<u32, Vec<Pair>> = BTreeMap::new();
    for p in pairs {
        groups.entry(samples[p.content].subject_id).or_default().push(*p);
    }
    let mut groups: Vec<Vec<Pair>> = groups.into_values().collect();
    groups.shuffle(rng);
    let mut out: Vec<Vec<Pair>> = Vec::new();
    for mut g in groups {
        g.shuffle(rng);
        for chunk in g.chunks(batch.max(2)) {
            out.push(chunk.to_vec());
        }
    }
    let mut merged: Vec<Vec<Pair>> = Vec::with_capacity(out.len());
    let mut carry: Vec<Pair> = Vec::new();
    for mut b in out {
        if !carry.is_empty() {
            b.append(&mut carry);
        }
        if b.len() < 2 {
            match merged.last_mut() {
                Some(prev) => prev.extend(b),
                None => carry = b,
            }
        } else {
            merged.push(b);
        }
    }
    Ok(merged)
}

/// Cached source features with their labels, used by pretraining.
pub struct FeatureBank {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl FeatureBank {
    pub fn new(model: &SourceModel, samples: &[Sample]) -> Result<Self> {
        let (x, labels) = stack(samples)?;
        Ok(FeatureBank {
            features: model.extractor.features(&x)?,
            labels,
        })
    }
}

fn check_frozen_mask(grads: &Gradients, model: &SourceModel) -> Result<()> {
    let leaked = model
        .extractor
        .named_params()
        .into_iter()
        .chain(model.classifier.named_params())
        .find(|(_, t)| grads.contains(t.id()) || t.requires_grad());
    match leaked {
        Some((name, _)) => Err(Error::Contract(format!(
            "frozen-mask violation: `{name}` is trainable during translator training"
        ))),
        None => Ok(()),
    }
}

/// One step of the subject-swapping objective on a batch of pairs.
/// Returns `(total, ce, expr, style)` and the gradients.
pub fn pretrain_batch(
    translator: &Translator,
    model: &SourceModel,
    bank: &FeatureBank,
    batch: &[Pair],
    cfg: &TrainConfig,
) -> Result<([f64; 4], Gradients)> {
    let c_idx: Vec<usize> = batch.iter().map(|p| p.content).collect();
    let i_idx: Vec<usize> = batch.iter().map(|p| p.identity).collect();
    let y: Vec<usize> = c_idx.iter().map(|&i| bank.labels[i]).collect();
    let mut tape = Tape::new();
    let f1 = tape.constant(bank.features.select_rows(&c_idx));
    let f2 = tape.constant(bank.features.select_rows(&i_idx));
    let translated = translator.translate(&mut tape, f1)?;
    let reference = translator.reference_layers(&mut tape, f2)?;
    let logits_hat = model.classifier.classify(&mut tape, translated.output())?;
    let logits = model.classifier.classify(&mut tape, f1)?;
    let ce = cross_entropy(&mut tape, logits_hat, &y)?;
    let expr = kl_divergence(&mut tape, logits, logits_hat)?;
    let style = style_loss(&mut tape, &translated, &reference, &cfg.style_layers)?;
    let total = source_total(&mut tape, ce, expr, style, &cfg.weights)?;
    let values = [
        tape.scalar(total),
        tape.scalar(ce),
        tape.scalar(expr),
        tape.scalar(style),
    ];
    Ok((values, tape.backward(total)?))
}

pub fn init_translator(cfg: &TrainConfig) -> Translator {
    Translator::new(cfg.feat_dim, &mut derived_rng(cfg.seed, STREAM_TRANSLATOR_INIT))
}

/// The pairing plan pretraining uses in its first epoch (and every epoch
/// for the deterministic strategies).
pub fn pairing_plan(
    train: &[Sample],
    profiles: &[SubjectProfile],
    model: &SourceModel,
    pairing: &PairingConfig,
    cfg: &TrainConfig,
) -> Result<Vec<Pair>> {
    make_pairs(train, profiles, model, pairing, &mut derived_rng(cfg.seed, STREAM_PAIRS))
}

/// Subject-swapping pretraining of a fresh translator over frozen F and C.
pub fn pretrain_translator(
    source: &SourceData,
    profiles: &[SubjectProfile],
    model: &SourceModel,
    pairing: &PairingConfig,
    cfg: &TrainConfig,
) -> Result<(Translator, Vec<PretrainEpoch>)> {
    cfg.validate()?;
    let train = source.train()?;
    let mut translator = init_translator(cfg);
    if cfg.translator_epochs == 0 {
        return Ok((translator, Vec::new()));
    }
    set_frozen(&mut translator, false);
    let bank = FeatureBank::new(model, train)?;
    let mut pair_rng = derived_rng(cfg.seed, STREAM_PAIRS);
    let mut order_rng = derived_rng(cfg.seed, STREAM_PRETRAIN_ORDER);
    let fixed = make_pairs(train, profiles, model, pairing, &mut pair_rng)?;
    let mut opt = Adam::new(translator.named_params().into_iter().map(|(_, t)| t), cfg.lr);
    let mut sched = cfg.plateau.schedule(cfg.lr);
    let mut log = Vec::with_capacity(cfg.translator_epochs);
    for epoch in 0..cfg.translator_epochs {
        let pairs = match pairing.strategy {
            Strategy::Random if epoch > 0 => pair_random(train, &mut pair_rng)?,
            _ => fixed.clone(),
        };
        let batches = subject_batches(&pairs, train, cfg.batch, &mut order_rng)?;
        let mut sums = [0.0; 4];
        for b in &batches {
            let (values, grads) = pretrain_batch(&translator, model, &bank, b, cfg)?;
            check_frozen_mask(&grads, model)?;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v * b.len() as f64;
            }
            optimizer_step(&grads, translator.trainable_params(), &mut opt)?;
        }
        let n = pairs.len() as f64;
        let [total, ce, expr, style] = sums.map(|s| s / n);
        opt.lr = sched.step(total);
        debug!("pretrain epoch {epoch}: total {total:.4} ce {ce:.4} expr {expr:.4} style {style:.4}");
        log.push(PretrainEpoch {
            epoch,
            total,
            ce,
            expr,
            style,
            lr: opt.lr,
        });
    }
    set_frozen(&mut translator, true);
    Ok((translator, log))
}

fn adaptation_loss(translator: &Translator, model: &SourceModel, feats: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.param(feats);
    let p = model.classifier.classify(&mut tape, f)?;
    let f_hat = translator.translate(&mut tape, f)?.output();
    let q = model.classifier.classify(&mut tape, f_hat)?;
    let l = target_loss(&mut tape, p, q)?;
    Ok(tape.scalar(l))
}

/// Personalizes a copy of the pretrained translator to one target subject
/// from its neutral frames only. Extractor and classifier stay frozen.
pub fn adapt_target(
    frames: &[Sample],
    model: &SourceModel,
    pretrained: &Translator,
    cfg: &TrainConfig,
) -> Result<(Translator, AdaptLog)> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Contract("empty adaptation split".into()))?;
    if let Some(s) = frames.iter().find(|s| s.label != 0) {
        return Err(Error::Contract(format!(
            "adaptation frame {} of subject {} has label {}; only neutral frames are allowed",
            s.frame_id, s.subject_id, s.label
        )));
    }
    if frames.iter().any(|s| s.subject_id != first.subject_id) {
        return Err(Error::Contract("adaptation split mixes subjects".into()));
    }
    if !(model.extractor.is_frozen() && model.classifier.is_frozen()) {
        return Err(Error::Contract("extractor and classifier must be frozen".into()));
    }
    let subject_id = first.subject_id;
    let (x, _) = stack(frames)?;
    let feats = model.extractor.features(&x)?;

    let mut translator = pretrained.clone();
    set_frozen(&mut translator, false);
    let mut opt = Adam::new(translator.named_params().into_iter().map(|(_, t)| t), cfg.lr);
    let mut sched = cfg.plateau.schedule(cfg.lr);
    let mut rng = derived_rng(cfg.seed, STREAM_ADAPT + subject_id as u64);
    let mut losses = Vec::with_capacity(cfg.adapt_epochs + 1);
    for _ in 0..cfg.adapt_epochs {
        losses.push(adaptation_loss(&translator, model, &feats)?);
        let mut total = 0.0;
        for idx in shuffled_chunks(feats.rows(), cfg.batch, &mut rng) {
            let fb = feats.select_rows(&idx);
            let (loss, grads) = {
                let mut tape = Tape::new();
                let f = tape.constant(fb);
                let p = model.classifier.classify(&mut tape, f)?;
                let f_hat = translator.translate(&mut tape, f)?.output();
                let q = model.classifier.classify(&mut tape, f_hat)?;
                let l = target_loss(&mut tape, p, q)?;
                (tape.scalar(l), tape.backward(l)?)
            };
            check_frozen_mask(&grads, model)?;
            total += loss * idx.len() as f64;
            optimizer_step(&grads, translator.trainable_params(), &mut opt)?;
        }
        opt.lr = sched.step(total / feats.rows() as f64);
    }
    losses.push(adaptation_loss(&translator, model, &feats)?);
    set_frozen(&mut translator, true);
    Ok((translator, AdaptLog { subject_id, losses }))
}

/// Supervised fine-tuning of a copy of the full source model on labeled
/// target frames; an upper bound only.
pub fn oracle_finetune(labeled: &[Sample], model: &SourceModel, cfg: &TrainConfig) -> Result<SourceModel> {
    let subject = labeled
        .first()
        .ok_or_else(|| Error::Contract("empty oracle split".into()))?
        .subject_id;
    let mut tuned = model.clone();
    if cfg.oracle_epochs == 0 {
        return Ok(tuned);
    }
    let mut rng = derived_rng(cfg.seed, STREAM_ORACLE + subject as u64);
    supervised_fit(&mut tuned, labeled, None, cfg.oracle_epochs, cfg, &mut rng)?;
    Ok(tuned)
}

/// Class predictions with a flag telling whether the source-only path was
/// used because no personalized translator was supplied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub fallback: bool,
}

pub fn predict(x: &Tensor, model: &SourceModel, translator: Option<&Translator>) -> Result<Prediction> {
    let f = model.extractor.features(x)?;
    let (f, fallback) = match translator {
        Some(t) => (t.apply(&f)?, false),
        None => {
            warn!("no personalized translator; predicting with the source-only path");
            (f, true)
        }
    };
    Ok(Prediction {
        labels: argmax_rows(&model.classifier.logits(&f)?),
        fallback,
    })
}
