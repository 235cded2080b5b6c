//! Cross-subject (content, identity) pairing for translator pretraining.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::models::{Classifier, FeatureExtractor};
use crate::numerics::{Tape, Tensor};
use crate::synthdata::{stack, Sample, SubjectProfile, LANDMARKS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Cosine,
    Landmark,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::Cosine, Strategy::Landmark];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Cosine => "cosine",
            Strategy::Landmark => "landmark",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pairing strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairingConfig {
    pub strategy: Strategy,
    pub pose_weight: f64,
    pub landmark_weight: f64,
    pub max_age_gap: f64,
    pub same_gender_required: bool,
    /// Largest per-sample cross-entropy admitted to the cosine candidate pool.
    pub well_classified_threshold: f64,
}

impl Default for PairingConfig {
    fn default() -> Self {
        PairingConfig {
            strategy: Strategy::Random,
            pose_weight: 1.0,
            landmark_weight: 1.0,
            max_age_gap: 10.0,
            same_gender_required: true,
            well_classified_threshold: 0.1,
        }
    }
}

impl PairingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pose_weight", self.pose_weight),
            ("landmark_weight", self.landmark_weight),
            ("max_age_gap", self.max_age_gap),
            ("well_classified_threshold", self.well_classified_threshold),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Indices into the sample slice the pairing was built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub content: usize,
    pub identity: usize,
    pub score: f64,
}

fn distinct_subjects(samples: &[Sample]) -> Vec<u32> {
    let mut ids: Vec<u32> = samples.iter().map(|s| s.subject_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

fn require_two_subjects(samples: &[Sample]) -> Result<()> {
    if distinct_subjects(samples).len() < 2 {
        return Err(Error::Degenerate(
            "pairing needs samples from at least two subjects".into(),
        ));
    }
    Ok(())
}

fn random_partner<R: Rng + ?Sized>(samples: &[Sample], i: usize, rng: &mut R) -> usize {
    // Rejection sampling is uniform over other-subject samples.
    loop {
        let j = rng.random_range(0..samples.len());
        if samples[j].subject_id != samples[i].subject_id {
            return j;
        }
    }
}

/// Every sample is paired once, as content, with a uniformly drawn sample of
/// another subject.
pub fn pair_random<R: Rng + ?Sized>(samples: &[Sample], rng: &mut R) -> Result<Vec<Pair>> {
    require_two_subjects(samples)?;
    Ok((0..samples.len())
        .map(|i| Pair {
            content: i,
            identity: random_partner(samples, i, rng),
            score: 0.0,
        })
        .collect())
}

/// `1 - cos(a, b)`; a zero vector is treated as orthogonal to everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// Cosine pairing from precomputed features (one row per sample) and
/// per-sample losses. Ties go to the lowest sample index.
pub fn pair_cosine_features<R: Rng + ?Sized>(
    samples: &[Sample],
    features: &Tensor,
    losses: &[f64],
    threshold: f64,
    rng: &mut R,
) -> Result<Vec<Pair>> {
    require_two_subjects(samples)?;
    if features.shape().len() != 2 || features.rows() != samples.len() || losses.len() != samples.len() {
        return Err(Error::shape(
            "pair_cosine",
            format!(
                "{} samples, features {:?}, {} losses",
                samples.len(),
                features.shape(),
                losses.len()
            ),
        ));
    }
    let pool: Vec<usize> = (0..samples.len()).filter(|&j| losses[j] <= threshold).collect();
    if pool.is_empty() {
        warn!("cosine pairing: no sample has loss <= {threshold}; falling back to random pairs");
        return pair_random(samples, rng);
    }
    let norms: Vec<f64> = (0..samples.len())
        .map(|i| features.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let unit: Vec<Vec<f64>> = (0..samples.len())
        .map(|i| {
            let n = if norms[i] == 0.0 { 1.0 } else { norms[i] };
            features.row(i).iter().map(|x| x / n).collect()
        })
        .collect();
    let mut fallbacks = 0usize;
    let pairs = (0..samples.len())
        .map(|i| {
            let mut best: Option<(f64, usize)> = None;
            for &j in &pool {
                if samples[j].subject_id == samples[i].subject_id {
                    continue;
                }
                let dot: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
                let d = if norms[i] == 0.0 || norms[j] == 0.0 {
                    1.0
                } else {
                    (1.0 - dot).clamp(0.0, 2.0)
                };
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
            match best {
                Some((d, j)) => Pair { content: i, identity: j, score: d },
                None => {
                    fallbacks += 1;
                    Pair {
                        content: i,
                        identity: random_partner(samples, i, rng),
                        score: f64::NAN,
                    }
                }
            }
        })
        .collect();
    if fallbacks > 0 {
        warn!("cosine pairing: {fallbacks} samples had no cross-subject candidate; paired at random");
    }
    Ok(pairs)
}

/// Per-sample cross-entropy of the source model.
pub fn per_sample_loss(
    extractor: &FeatureExtractor,
    classifier: &Classifier,
    x: &Tensor,
    labels: &[usize],
) -> Result<(Tensor, Vec<f64>)> {
    let feats = extractor.features(x)?;
    let logits = classifier.logits(&feats)?;
    let c = logits.cols();
    let mut losses = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let row = Tensor::new(vec![1, c], logits.row(i).to_vec())?;
        let mut tape = Tape::new();
        let v = tape.param(&row);
        let l = cross_entropy(&mut tape, v, &[y])?;
        losses.push(tape.scalar(l));
    }
    Ok((feats, losses))
}

pub fn pair_cosine<R: Rng + ?Sized>(
    samples: &[Sample],
    extractor: &FeatureExtractor,
    classifier: &Classifier,
    cfg: &PairingConfig,
    rng: &mut R,
) -> Result<Vec<Pair>> {
    require_two_subjects(samples)?;
    let (x, labels) = stack(samples)?;
    let (feats, losses) = per_sample_loss(extractor, classifier, &x, &labels)?;
    pair_cosine_features(samples, &feats, &losses, cfg.well_classified_threshold, rng)
}

/// Ordinary Procrustes residual of `b` fitted onto `a` by translation,
/// uniform scale and rotation. Both shapes are centered and scaled to unit
/// Frobenius norm first, so the value lies in `[0, 1]` and is symmetric.
pub fn procrustes_residual(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape(
            "procrustes_residual",
            format!("{} vs {} points (need equal counts >= 2)", a.len(), b.len()),
        ));
    }
    let center = |p: &[[f64; 2]]| -> Result<Vec<[f64; 2]>> {
        let n = p.len() as f64;
        let mx = p.iter().map(|q| q[0]).sum::<f64>() / n;
        let my = p.iter().map(|q| q[1]).sum::<f64>() / n;
        let c: Vec<[f64; 2]> = p.iter().map(|q| [q[0] - mx, q[1] - my]).collect();
        let norm = c.iter().map(|q| q[0] * q[0] + q[1] * q[1]).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Degenerate("shape has zero spread".into()));
        }
        Ok(c.iter().map(|q| [q[0] / norm, q[1] / norm]).collect())
    };
    let (a, b) = (center(a)?, center(b)?);
    // For unit-norm centered shapes the best rotation gives correlation
    // sqrt(m^2 + n^2), the best scale equals it, and the residual is 1 - r^2.
    let m: f64 = a.iter().zip(&b).map(|(p, q)| p[0] * q[0] + p[1] * q[1]).sum();
    let n: f64 = a.iter().zip(&b).map(|(p, q)| p[1] * q[0] - p[0] * q[1]).sum();
    Ok((1.0 - (m * m + n * n)).max(0.0))
}

/// Which constraints had to be dropped to find a partner subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Relaxation {
    None,
    Age,
    AgeAndGender,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectMatch {
    pub subject: u32,
    pub partner: u32,
    pub score: f64,
    pub relaxation: Relaxation,
}

pub fn landmark_score(a: &SubjectProfile, b: &SubjectProfile, cfg: &PairingConfig) -> Result<f64> {
    let shape = procrustes_residual(&a.landmarks, &b.landmarks)?;
    let dot: f64 = a.pose.iter().zip(&b.pose).map(|(x, y)| x * y).sum();
    let pose = (1.0 - dot).clamp(0.0, 2.0);
    Ok(cfg.landmark_weight * shape + cfg.pose_weight * pose)
}

fn eligible(a: &SubjectProfile, b: &SubjectProfile, cfg: &PairingConfig, level: Relaxation) -> bool {
    if a.subject_id == b.subject_id {
        return false;
    }
    let age_ok = (a.age - b.age).abs() <= cfg.max_age_gap;
    let gender_ok = !cfg.same_gender_required || a.gender == b.gender;
    match level {
        Relaxation::None => age_ok && gender_ok,
        Relaxation::Age => gender_ok,
        Relaxation::AgeAndGender => true,
    }
}

/// Lowest-score eligible partner for every subject among `profiles`.
/// Ties go to the lower subject id.
pub fn match_subjects(profiles: &[&SubjectProfile], cfg: &PairingConfig) -> Result<Vec<SubjectMatch>> {
    if profiles.len() < 2 {
        return Err(Error::Degenerate(
            "landmark pairing needs at least two subjects".into(),
        ));
    }
    let mut out = Vec::with_capacity(profiles.len());
    for a in profiles {
        let mut found = None;
        for level in [Relaxation::None, Relaxation::Age, Relaxation::AgeAndGender] {
            let mut best: Option<(f64, u32)> = None;
            for b in profiles.iter().filter(|b| eligible(a, b, cfg, level)) {
                let s = landmark_score(a, b, cfg)?;
                let better = match best {
                    None => true,
                    Some((bs, bid)) => s < bs || (s == bs && b.subject_id < bid),
                };
                if better {
                    best = Some((s, b.subject_id));
                }
            }
            if let Some((score, partner)) = best {
                if level != Relaxation::None {
                    warn!(
                        "landmark pairing: subject {} has no eligible partner; relaxed {:?}",
                        a.subject_id, level
                    );
                }
                found = Some(SubjectMatch {
                    subject: a.subject_id,
                    partner,
                    score,
                    relaxation: level,
                });
                break;
            }
        }
        out.push(found.expect("the fully relaxed level admits every other subject"));
    }
    Ok(out)
}

/// Subject-level landmark/pose matching, then a uniform identity sample
/// from the matched subject for each content sample.
pub fn pair_landmark<R: Rng + ?Sized>(
    samples: &[Sample],
    profiles: &[SubjectProfile],
    cfg: &PairingConfig,
    rng: &mut R,
) -> Result<Vec<Pair>> {
    require_two_subjects(samples)?;
    let ids = distinct_subjects(samples);
    let present: Vec<&SubjectProfile> = ids
        .iter()
        .map(|id| {
            profiles
                .iter()
                .find(|p| p.subject_id == *id)
                .ok_or_else(|| Error::Contract(format!("no profile for subject {id}")))
        })
        .collect::<Result<_>>()?;
    for p in &present {
        if p.landmarks.len() != LANDMARKS {
            return Err(Error::Contract("landmark count mismatch".into()));
        }
    }
    let matches = match_subjects(&present, cfg)?;
    let by_subject: Vec<Vec<usize>> = ids
        .iter()
        .map(|id| (0..samples.len()).filter(|&j| samples[j].subject_id == *id).collect())
        .collect();
    let slot = |id: u32| ids.binary_search(&id).expect("present subject");
    Ok((0..samples.len())
        .map(|i| {
            let m = &matches[slot(samples[i].subject_id)];
            let pool = &by_subject[slot(m.partner)];
            Pair {
                content: i,
                identity: pool[rng.random_range(0..pool.len())],
                score: m.score,
            }
        })
        .collect())
}

/// Audit export: one row per pair.
pub fn write_pairs_csv<W: Write>(
    out: W,
    samples: &[Sample],
    pairs: &[Pair],
    manifest_hash: &str,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "content_subject",
        "content_frame_id",
        "identity_subject",
        "identity_frame_id",
        "score",
        "manifest_hash",
    ])?;
    for p in pairs {
        let (c, i) = (&samples[p.content], &samples[p.identity]);
        w.write_record([
            c.subject_id.to_string(),
            c.frame_id.to_string(),
            i.subject_id.to_string(),
            i.frame_id.to_string(),
            format!("{}", p.score),
            manifest_hash.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<pairs csv>", e))?;
    Ok(())
}
