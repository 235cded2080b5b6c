//! Feature extractor, classifier head and residual feature translator.
//!
//! Networks are plain parameter containers; every forward pass records onto
//! a caller-owned [`Tape`]. Freezing clears `requires_grad` on a network's
//! tensors, which keeps them out of both gradient population and optimizer
//! parameter sets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Dense layer `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    /// Gaussian weights with the given std, zero bias.
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Affine {
            weight: Tensor::randn(vec![input, output], std, rng),
            bias: Tensor::zeros(vec![output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Affine {
            weight: Tensor::zeros(vec![input, output]),
            bias: Tensor::zeros(vec![output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// One multiply and one add per weight (the add absorbs the bias).
    pub fn flops(&self) -> usize {
        2 * self.weight.len()
    }
}

/// Per-layer activations of one forward pass; the last entry is the output.
#[derive(Debug, Clone)]
pub struct LayeredFeatures {
    pub layers: Vec<Var>,
}

impl LayeredFeatures {
    pub fn output(&self) -> Var {
        *self.layers.last().expect("at least one layer")
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Indices of translator layers whose statistics enter the style loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerSet(pub Vec<usize>);

impl LayerSet {
    /// Every layer of a `depth`-layer stack.
    pub fn all(depth: usize) -> Self {
        LayerSet((0..depth).collect())
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Config("style layer set is empty".into()));
        }
        match self.0.iter().find(|&&l| l >= depth) {
            Some(l) => Err(Error::Config(format!(
                "style layer {l} out of range for depth {depth}"
            ))),
            None => Ok(()),
        }
    }
}

/// Common parameter plumbing for the three networks.
pub trait Network {
    /// Stable names (used by checkpoints) paired with tensors, in a fixed order.
    fn named_params(&self) -> Vec<(String, &Tensor)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn flops_per_sample(&self) -> usize;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    fn trainable_param_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.len())
            .sum()
    }

    fn is_frozen(&self) -> bool {
        self.named_params().iter().all(|(_, t)| !t.requires_grad())
    }

    fn trainable_params(&mut self) -> Vec<&mut Tensor> {
        self.params_mut()
            .into_iter()
            .filter(|t| t.requires_grad())
            .collect()
    }

    /// True iff every tensor matches `other` bit for bit.
    fn bit_eq(&self, other: &Self) -> bool
    where
        Self: Sized,
    {
        let (a, b) = (self.named_params(), other.named_params());
        a.len() == b.len()
            && a
                .iter()
                .zip(&b)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }
}

/// Freezes or unfreezes every tensor of `net`.
pub fn set_frozen<N: Network + ?Sized>(net: &mut N, frozen: bool) {
    for p in net.params_mut() {
        p.set_requires_grad(!frozen);
    }
}

fn check_input(tape: &Tape<'_>, x: Var, width: usize, op: &'static str) -> Result<usize> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != width {
        return Err(Error::shape(op, format!("expected (batch, {width}), got {s:?}")));
    }
    Ok(s[0])
}

/// Stack of affine + ReLU blocks: `input -> hidden -> ... -> feat`.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub blocks: Vec<Affine>,
}

impl FeatureExtractor {
    /// He-initialized extractor with `depth` blocks (`depth >= 1`).
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        feat_dim: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let depth = depth.max(1);
        let mut widths = vec![input_dim];
        widths.extend(std::iter::repeat_n(hidden, depth - 1));
        widths.push(feat_dim);
        let blocks = widths
            .windows(2)
            .map(|w| Affine::random(w[0], w[1], (2.0 / w[0] as f64).sqrt(), rng))
            .collect();
        FeatureExtractor { blocks }
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].input_dim()
    }

    pub fn feat_dim(&self) -> usize {
        self.blocks.last().expect("non-empty").output_dim()
    }

    pub fn extract<'p>(&'p self, tape: &mut Tape<'p>, x: Var) -> Result<LayeredFeatures> {
        check_input(tape, x, self.input_dim(), "extract")?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for block in &self.blocks {
            let z = block.forward(tape, h)?;
            h = tape.relu(z)?;
            layers.push(h);
        }
        Ok(LayeredFeatures { layers })
    }

    /// Final features of a batch, off-tape.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.param(x);
        let out = self.extract(&mut tape, v)?.output();
        Ok(tape.to_tensor(out))
    }
}

impl Network for FeatureExtractor {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                [
                    (format!("extractor.block{i}.weight"), &b.weight),
                    (format!("extractor.block{i}.bias"), &b.bias),
                ]
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.weight, &mut b.bias])
            .collect()
    }

    fn flops_per_sample(&self) -> usize {
        self.blocks.iter().map(|b| b.flops() + b.output_dim()).sum()
    }
}

/// Linear head producing class logits.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub head: Affine,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(feat_dim: usize, classes: usize, rng: &mut R) -> Self {
        Classifier {
            head: Affine::random(feat_dim, classes, (1.0 / feat_dim as f64).sqrt(), rng),
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.head.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.head.output_dim()
    }

    pub fn classify<'p>(&'p self, tape: &mut Tape<'p>, f: Var) -> Result<Var> {
        check_input(tape, f, self.feat_dim(), "classify")?;
        self.head.forward(tape, f)
    }

    pub fn logits(&self, f: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.param(f);
        let out = self.classify(&mut tape, v)?;
        Ok(tape.to_tensor(out))
    }
}

impl Network for Classifier {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("classifier.weight".into(), &self.head.weight),
            ("classifier.bias".into(), &self.head.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.head.weight, &mut self.head.bias]
    }

    fn flops_per_sample(&self) -> usize {
        self.head.flops()
    }
}

/// Residual feature translator: `out = f + W2 relu(W1 f + b1) + b2`.
///
/// The output layer starts at zero, so a fresh translator is the identity.
#[derive(Debug, Clone)]
pub struct Translator {
    pub hidden: Affine,
    pub out: Affine,
}

impl Translator {
    pub fn new<R: Rng + ?Sized>(feat_dim: usize, rng: &mut R) -> Self {
        Translator {
            hidden: Affine::random(feat_dim, feat_dim, (2.0 / feat_dim as f64).sqrt(), rng),
            out: Affine::zeros(feat_dim, feat_dim),
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    /// Number of layers exposed for style statistics.
    pub fn depth(&self) -> usize {
        2
    }

    /// Layers: `[relu(W1 f + b1), f + delta]`.
    pub fn translate<'p>(&'p self, tape: &mut Tape<'p>, f: Var) -> Result<LayeredFeatures> {
        check_input(tape, f, self.feat_dim(), "translate")?;
        let z = self.hidden.forward(tape, f)?;
        let h = tape.relu(z)?;
        let delta = self.out.forward(tape, h)?;
        let y = tape.add(f, delta)?;
        Ok(LayeredFeatures { layers: vec![h, y] })
    }

    /// Style reference for an identity feature: the hidden activation the
    /// translator produces for it, and the untranslated feature itself.
    /// Both are detached.
    pub fn reference_layers<'p>(&'p self, tape: &mut Tape<'p>, f: Var) -> Result<LayeredFeatures> {
        check_input(tape, f, self.feat_dim(), "reference_layers")?;
        let z = self.hidden.forward(tape, f)?;
        let h = tape.relu(z)?;
        let h = tape.detach(h);
        let f = tape.detach(f);
        Ok(LayeredFeatures { layers: vec![h, f] })
    }

    pub fn apply(&self, f: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.param(f);
        let out = self.translate(&mut tape, v)?.output();
        Ok(tape.to_tensor(out))
    }
}

impl Network for Translator {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("translator.hidden.weight".into(), &self.hidden.weight),
            ("translator.hidden.bias".into(), &self.hidden.bias),
            ("translator.out.weight".into(), &self.out.weight),
            ("translator.out.bias".into(), &self.out.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.out.weight,
            &mut self.out.bias,
        ]
    }

    /// Two affine layers, the hidden ReLU and the residual add.
    fn flops_per_sample(&self) -> usize {
        let d = self.feat_dim();
        self.hidden.flops() + d + self.out.flops() + d
    }
}

/// Parameter and inference-cost totals for a set of networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub trainable_params: usize,
    pub total_params: usize,
    pub flops_per_sample: usize,
}

impl Cost {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_params as f64 / self.total_params as f64
    }
}

pub fn count_cost(nets: &[&dyn Network]) -> Cost {
    Cost {
        trainable_params: nets.iter().map(|n| n.trainable_param_count()).sum(),
        total_params: nets.iter().map(|n| n.param_count()).sum(),
        flops_per_sample: nets.iter().map(|n| n.flops_per_sample()).sum(),
    }
}

/// Published cost figures kept next to our own counts for context. They
/// come from a ResNet-18 backbone and are not comparable to this model.
#[derive(Debug, Clone, Serialize)]
pub struct ReferenceCost {
    pub method: &'static str,
    pub params_millions: f64,
    pub gflops: f64,
    pub note: &'static str,
}

pub const REFERENCE_COSTS: [ReferenceCost; 2] = [
    ReferenceCost {
        method: "SFDA-IT",
        params_millions: 57.2,
        gflops: 60.0,
        note: "published reference, different backbone",
    },
    ReferenceCost {
        method: "PFT",
        params_millions: 0.5,
        gflops: 3.6,
        note: "published reference, different backbone",
    },
];
