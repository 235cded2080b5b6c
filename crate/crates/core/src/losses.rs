//! Training objectives. Every loss is a batch mean and returns a scalar var.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{LayerSet, LayeredFeatures};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_expr: f64,
    pub lambda_style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_expr: 1.0,
            lambda_style: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_expr", self.lambda_expr),
            ("lambda_style", self.lambda_style),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn batch_of(tape: &Tape<'_>, v: Var, op: &'static str) -> Result<(usize, usize)> {
    match *tape.shape(v) {
        [b, c] if b >= 1 && c >= 1 => Ok((b, c)),
        ref s => Err(Error::shape(op, format!("expected (batch >= 1, classes), got {s:?}"))),
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(tape: &mut Tape<'_>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (batch, classes) = batch_of(tape, logits, "cross_entropy")?;
    if labels.len() != batch {
        return Err(Error::shape(
            "cross_entropy",
            format!("{batch} rows but {} labels", labels.len()),
        ));
    }
    let mut onehot = vec![0.0; batch * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        onehot[i * classes + y] = 1.0;
    }
    let mask = tape.constant(Tensor::new(vec![batch, classes], onehot)?);
    let lsm = tape.log_softmax(logits)?;
    let picked = tape.mul(lsm, mask)?;
    let total = tape.sum(picked)?;
    tape.mul_scalar(total, -1.0 / batch as f64)
}

/// Mean over rows of `KL(softmax(p) || softmax(q))`. The `p` side is a
/// fixed teacher: it is detached, so only `q` receives gradient.
pub fn kl_divergence(tape: &mut Tape<'_>, p_logits: Var, q_logits: Var) -> Result<Var> {
    let (batch, _) = batch_of(tape, p_logits, "kl_divergence")?;
    if tape.shape(p_logits) != tape.shape(q_logits) {
        return Err(Error::shape(
            "kl_divergence",
            format!("{:?} vs {:?}", tape.shape(p_logits), tape.shape(q_logits)),
        ));
    }
    let p_logits = tape.detach(p_logits);
    let log_p = tape.log_softmax(p_logits)?;
    let log_q = tape.log_softmax(q_logits)?;
    let p = tape.exp(log_p)?;
    let diff = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum(terms)?;
    tape.mul_scalar(total, 1.0 / batch as f64)
}

/// Squared distance between per-coordinate batch mean and std of the
/// translated layers and the (detached) reference layers, summed over `layers`.
pub fn style_loss(
    tape: &mut Tape<'_>,
    translated: &LayeredFeatures,
    reference: &LayeredFeatures,
    layers: &LayerSet,
) -> Result<Var> {
    layers.validate(translated.depth().min(reference.depth()))?;
    let mut total: Option<Var> = None;
    for &l in &layers.0 {
        let (a, b) = (translated.layers[l], reference.layers[l]);
        let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("style_loss", format!("layer {l}: {sa:?} vs {sb:?}")));
        }
        if sa[0] < 2 || sb[0] < 2 {
            return Err(Error::Degenerate(format!(
                "style statistics need batch >= 2, got {} and {}",
                sa[0], sb[0]
            )));
        }
        let b = tape.detach(b);
        let mu_a = tape.mean_over_axis(a, 0)?;
        let mu_b = tape.mean_over_axis(b, 0)?;
        let sd_a = tape.std_over_axis(a, 0)?;
        let sd_b = tape.std_over_axis(b, 0)?;
        let dmu = tape.sub(mu_a, mu_b)?;
        let dsd = tape.sub(sd_a, sd_b)?;
        let dmu = tape.square(dmu)?;
        let dsd = tape.square(dsd)?;
        let dmu = tape.sum(dmu)?;
        let dsd = tape.sum(dsd)?;
        let term = tape.add(dmu, dsd)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("validated non-empty"))
}

/// `ce + lambda_expr * expr + lambda_style * style`.
pub fn source_total(
    tape: &mut Tape<'_>,
    ce: Var,
    expr: Var,
    style: Var,
    w: &LossWeights,
) -> Result<Var> {
    for v in [ce, expr, style] {
        if !tape.shape(v).is_empty() {
            return Err(Error::Contract("source_total takes scalar terms".into()));
        }
    }
    let e = tape.mul_scalar(expr, w.lambda_expr)?;
    let s = tape.mul_scalar(style, w.lambda_style)?;
    let t = tape.add(ce, e)?;
    tape.add(t, s)
}

/// Adaptation objective: agreement of translated predictions with the
/// frozen model's predictions on the same frames.
pub fn target_loss(tape: &mut Tape<'_>, frozen_logits: Var, translated_logits: Var) -> Result<Var> {
    kl_divergence(tape, frozen_logits, translated_logits)
}
