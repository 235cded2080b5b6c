//! Synthetic subject-shift benchmark.
//!
//! A subject is a per-coordinate gain, an offset and a small rotation
//! applied to class prototypes. Each subject carries a low-dimensional
//! latent identity that drives its offset, its landmark geometry, its head
//! pose and (partly) its age and gender, so subjects with similar faces also
//! have similar styles.
//! Target subjects draw their latent from the same family shifted by
//! `shift_severity`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const LANDMARKS: usize = 10;

/// Generator knobs below the headline dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleFamily {
    /// Distance between every pair of class prototypes.
    pub class_separation: f64,
    /// Std of log-gain per coordinate.
    pub gain_spread: f64,
    /// Std of the subject-specific offset not explained by the latent.
    pub offset_noise: f64,
    pub latent_dim: usize,
    /// Scale of the latent-driven offset.
    pub latent_scale: f64,
    /// Extra loading of the first latent factor on the class axis.
    pub class_axis_loading: f64,
    /// Rotation angle scale of the mixing matrix (radians).
    pub rotation: f64,
    pub landmark_deform: f64,
    pub landmark_jitter: f64,
    pub pose_spread: f64,
    /// Weight of the latent identity in age and gender, relative to
    /// unit-variance independent noise. Zero makes them unrelated to style.
    pub demographic_coupling: f64,
}

impl Default for StyleFamily {
    fn default() -> Self {
        StyleFamily {
            class_separation: 2.0,
            gain_spread: 0.2,
            offset_noise: 0.15,
            latent_dim: 3,
            latent_scale: 1.0,
            class_axis_loading: 3.0,
            rotation: 0.1,
            landmark_deform: 0.04,
            landmark_jitter: 0.004,
            pose_spread: 0.3,
            demographic_coupling: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_source_subjects: usize,
    pub n_target_subjects: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub noise_scale: f64,
    pub shift_severity: f64,
    pub seed: u64,
    /// Neutral frames per target subject available to adaptation.
    pub adapt_frames: usize,
    /// Labeled frames per class per target subject for the oracle bound.
    pub oracle_train_per_class: usize,
    pub style: StyleFamily,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_source_subjects: 20,
            n_target_subjects: 5,
            classes: 2,
            samples_per_class: 100,
            input_dim: 32,
            noise_scale: 0.3,
            shift_severity: 2.0,
            seed: 0,
            adapt_frames: 50,
            oracle_train_per_class: 50,
            style: StyleFamily::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_source_subjects", self.n_source_subjects),
            ("n_target_subjects", self.n_target_subjects),
            ("samples_per_class", self.samples_per_class),
            ("input_dim", self.input_dim),
            ("adapt_frames", self.adapt_frames),
            ("oracle_train_per_class", self.oracle_train_per_class),
            ("latent_dim", self.style.latent_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.samples_per_class < 2 {
            return Err(Error::Config("samples_per_class must be >= 2 for the validation split".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be >= 2".into()));
        }
        if self.classes > self.input_dim {
            return Err(Error::Config("classes must not exceed input_dim".into()));
        }
        let reals = [
            ("noise_scale", self.noise_scale),
            ("shift_severity", self.shift_severity),
            ("class_separation", self.style.class_separation),
            ("gain_spread", self.style.gain_spread),
            ("offset_noise", self.style.offset_noise),
            ("latent_scale", self.style.latent_scale),
            ("rotation", self.style.rotation),
            ("landmark_deform", self.style.landmark_deform),
            ("landmark_jitter", self.style.landmark_jitter),
            ("pose_spread", self.style.pose_spread),
            ("demographic_coupling", self.style.demographic_coupling),
        ];
        if let Some((name, v)) = reals.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
        }
        if !self.style.class_axis_loading.is_finite() {
            return Err(Error::Config("class_axis_loading must be finite".into()));
        }
        if self.style.class_separation < 4.0 * self.noise_scale {
            return Err(Error::Config(format!(
                "class_separation {} is below 4 * noise_scale",
                self.style.class_separation
            )));
        }
        Ok(())
    }

    pub fn n_subjects(&self) -> usize {
        self.n_source_subjects + self.n_target_subjects
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub subject_id: u32,
    pub population: Population,
    pub latent: Vec<f64>,
    pub style_gain: Vec<f64>,
    pub style_offset: Vec<f64>,
    /// Row-major `input_dim x input_dim` orthonormal matrix.
    pub mixing: Vec<f64>,
    pub landmarks: [[f64; 2]; LANDMARKS],
    pub pose: [f64; 3],
    pub age: f64,
    pub gender: u8,
}

impl SubjectProfile {
    pub fn input_dim(&self) -> usize {
        self.style_gain.len()
    }

    /// A subject that leaves prototypes untouched.
    pub fn identity(subject_id: u32, input_dim: usize) -> Self {
        let mut mixing = vec![0.0; input_dim * input_dim];
        for i in 0..input_dim {
            mixing[i * input_dim + i] = 1.0;
        }
        SubjectProfile {
            subject_id,
            population: Population::Source,
            latent: Vec::new(),
            style_gain: vec![1.0; input_dim],
            style_offset: vec![0.0; input_dim],
            mixing,
            landmarks: template(),
            pose: [0.0, 0.0, 1.0],
            age: 30.0,
            gender: 0,
        }
    }

    /// Euclidean distance between two subjects' style parameters.
    pub fn style_distance(&self, other: &SubjectProfile) -> f64 {
        let sq = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum() };
        (sq(&self.style_gain, &other.style_gain)
            + sq(&self.style_offset, &other.style_offset)
            + sq(&self.mixing, &other.mixing))
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
    pub subject_id: u32,
    pub frame_id: u32,
}

/// Dataset-wide quantities shared by every subject.
#[derive(Debug, Clone)]
pub struct World {
    pub prototypes: Vec<Vec<f64>>,
    /// `input_dim x latent_dim`, row-major.
    offset_loading: Vec<f64>,
    /// `2*LANDMARKS x latent_dim`, row-major.
    landmark_loading: Vec<f64>,
    /// `3 x latent_dim`, row-major.
    pose_loading: Vec<f64>,
    /// `2 x latent_dim` unit rows for age and gender.
    demographic_loading: Vec<f64>,
}

/// splitmix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, stream)`.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

const WORLD_STREAM: u64 = u64::MAX;

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn gauss_vec<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| std * gauss(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Neutral-face layout in normalized coordinates: brows, eyes, nose,
/// mouth corners and chin.
fn template() -> [[f64; 2]; LANDMARKS] {
    [
        [-0.35, 0.40],
        [0.35, 0.40],
        [-0.30, 0.25],
        [0.30, 0.25],
        [0.00, 0.05],
        [0.00, -0.10],
        [-0.22, -0.35],
        [0.22, -0.35],
        [0.00, -0.42],
        [0.00, -0.70],
    ]
}

fn matvec(m: &[f64], cols: usize, v: &[f64]) -> Vec<f64> {
    m.chunks(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

impl World {
    pub fn new(spec: &DatasetSpec) -> Self {
        let mut rng = derived_rng(spec.seed, WORLD_STREAM);
        let (d, k) = (spec.input_dim, spec.style.latent_dim);

        // Orthonormal class directions by Gram-Schmidt; scaled so every
        // pair of prototypes sits exactly `class_separation` apart.
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
        while dirs.len() < spec.classes {
            let mut v = gauss_vec(d, 1.0, &mut rng);
            for u in &dirs {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
                normalize(&mut v);
                dirs.push(v);
            }
        }
        let r = spec.style.class_separation / std::f64::consts::SQRT_2;
        let prototypes: Vec<Vec<f64>> = dirs
            .iter()
            .map(|u| u.iter().map(|x| r * x).collect())
            .collect();

        let mut axis: Vec<f64> = prototypes[1]
            .iter()
            .zip(&prototypes[0])
            .map(|(a, b)| a - b)
            .collect();
        normalize(&mut axis);
        let mut offset_loading = vec![0.0; d * k];
        for j in 0..k {
            let mut col = gauss_vec(d, 1.0, &mut rng);
            normalize(&mut col);
            for i in 0..d {
                let extra = if j == 0 { spec.style.class_axis_loading * axis[i] } else { 0.0 };
                offset_loading[i * k + j] = col[i] + extra;
            }
        }
        let landmark_loading = gauss_vec(2 * LANDMARKS * k, 1.0, &mut rng);
        let pose_loading = gauss_vec(3 * k, 1.0, &mut rng);
        let mut demographic_loading = gauss_vec(2 * k, 1.0, &mut rng);
        demographic_loading.chunks_mut(k).for_each(normalize);
        World {
            prototypes,
            offset_loading,
            landmark_loading,
            pose_loading,
            demographic_loading,
        }
    }
}

/// Random orthonormal matrix near the identity via the Cayley transform
/// of a scaled skew-symmetric matrix.
fn small_rotation<R: Rng + ?Sized>(d: usize, angle: f64, rng: &mut R) -> Vec<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| gauss(rng));
    let mut s = (&a - a.transpose()) * 0.5;
    let norm = s.norm();
    if norm > 0.0 {
        s *= 0.5 * angle / norm;
    }
    let eye = DMatrix::<f64>::identity(d, d);
    let q = (&eye - &s)
        .lu()
        .solve(&(&eye + &s))
        .expect("I - S is invertible for skew-symmetric S");
    // nalgebra is column-major; store row-major.
    q.transpose().as_slice().to_vec()
}

pub fn make_subject(
    spec: &DatasetSpec,
    world: &World,
    subject_id: u32,
    population: Population,
) -> SubjectProfile {
    let mut rng = derived_rng(spec.seed, subject_id as u64);
    let (d, k) = (spec.input_dim, spec.style.latent_dim);
    let st = &spec.style;

    let mut latent = gauss_vec(k, 1.0, &mut rng);
    if population == Population::Target {
        let mut dir = gauss_vec(k, 1.0, &mut rng);
        normalize(&mut dir);
        latent
            .iter_mut()
            .zip(&dir)
            .for_each(|(z, u)| *z += spec.shift_severity * u);
    }

    let style_gain: Vec<f64> = (0..d).map(|_| (st.gain_spread * gauss(&mut rng)).exp()).collect();
    let driven = matvec(&world.offset_loading, k, &latent);
    let style_offset: Vec<f64> = driven
        .iter()
        .map(|v| st.latent_scale * v + st.offset_noise * gauss(&mut rng))
        .collect();
    let mixing = small_rotation(d, st.rotation, &mut rng);

    let deform = matvec(&world.landmark_loading, k, &latent);
    let theta = 0.1 * gauss(&mut rng);
    let scale = rng.random_range(0.9..1.1);
    let shift = [0.05 * gauss(&mut rng), 0.05 * gauss(&mut rng)];
    let (c, s) = (theta.cos(), theta.sin());
    let mut landmarks = template();
    for (i, p) in landmarks.iter_mut().enumerate() {
        let x = p[0] + st.landmark_deform * deform[2 * i] + st.landmark_jitter * gauss(&mut rng);
        let y = p[1] + st.landmark_deform * deform[2 * i + 1] + st.landmark_jitter * gauss(&mut rng);
        *p = [
            scale * (c * x - s * y) + shift[0],
            scale * (s * x + c * y) + shift[1],
        ];
    }

    let tilt = matvec(&world.pose_loading, k, &latent);
    let mut pose = [0.0, 0.0, 1.0];
    for i in 0..3 {
        pose[i] += st.pose_spread * tilt[i] + 0.05 * gauss(&mut rng);
    }
    normalize(&mut pose);

    let demo = matvec(&world.demographic_loading, k, &latent);
    let c = st.demographic_coupling;
    let norm = (1.0 + c * c).sqrt();
    let age = (41.5 + 10.0 * (c * demo[0] + gauss(&mut rng)) / norm).clamp(18.0, 65.0);
    let gender = u8::from(c * demo[1] + gauss(&mut rng) > 0.0);

    SubjectProfile {
        subject_id,
        population,
        latent,
        style_gain,
        style_offset,
        mixing,
        landmarks,
        pose,
        age,
        gender,
    }
}

/// `x = Q (gain * (c_y + eps) + offset)` with `eps ~ N(0, noise^2 I)`.
pub fn render_sample<R: Rng + ?Sized>(
    subject: &SubjectProfile,
    prototypes: &[Vec<f64>],
    y: usize,
    noise: f64,
    frame_id: u32,
    rng: &mut R,
) -> Result<Sample> {
    let c = prototypes.get(y).ok_or(Error::LabelOutOfRange {
        label: y,
        classes: prototypes.len(),
    })?;
    let d = subject.input_dim();
    if c.len() != d {
        return Err(Error::shape("render_sample", format!("prototype {} vs subject {d}", c.len())));
    }
    let styled: Vec<f64> = (0..d)
        .map(|i| {
            let e = if noise > 0.0 { noise * gauss(rng) } else { 0.0 };
            subject.style_gain[i] * (c[i] + e) + subject.style_offset[i]
        })
        .collect();
    Ok(Sample {
        x: matvec(&subject.mixing, d, &styled),
        label: y,
        subject_id: subject.subject_id,
        frame_id,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSplit {
    pub subject_id: u32,
    /// Neutral-only frames for adaptation.
    pub adapt: Vec<Sample>,
    /// Labeled frames reserved for the oracle bound.
    pub oracle_train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub prototypes: Vec<Vec<f64>>,
    pub profiles: Vec<SubjectProfile>,
    pub source_train: Vec<Sample>,
    pub source_val: Vec<Sample>,
    pub targets: Vec<TargetSplit>,
}

impl Dataset {
    pub fn profile(&self, subject_id: u32) -> Option<&SubjectProfile> {
        self.profiles.iter().find(|p| p.subject_id == subject_id)
    }

    pub fn source_profiles(&self) -> impl Iterator<Item = &SubjectProfile> {
        self.profiles
            .iter()
            .filter(|p| p.population == Population::Source)
    }
}

fn render_many(
    p: &SubjectProfile,
    protos: &[Vec<f64>],
    y: usize,
    n: usize,
    noise: f64,
    next_frame: &mut u32,
    rng: &mut ChaCha8Rng,
) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let f = *next_frame;
            *next_frame += 1;
            render_sample(p, protos, y, noise, f, rng).expect("validated label and width")
        })
        .collect()
}

/// Samples stream index for a subject, distinct from its profile stream.
fn sample_stream(subject_id: u32) -> u64 {
    (1u64 << 32) | subject_id as u64
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let world = World::new(spec);
    let ns = spec.n_source_subjects as u32;
    let nt = spec.n_target_subjects as u32;
    let profiles: Vec<SubjectProfile> = (0..ns)
        .map(|id| make_subject(spec, &world, id, Population::Source))
        .chain((ns..ns + nt).map(|id| make_subject(spec, &world, id, Population::Target)))
        .collect();
    let protos = &world.prototypes;
    let noise = spec.noise_scale;
    let n = spec.samples_per_class;

    let mut source_train = Vec::new();
    let mut source_val = Vec::new();
    let n_val = (n / 10).max(1);
    for p in &profiles[..ns as usize] {
        let mut rng = derived_rng(spec.seed, sample_stream(p.subject_id));
        let mut frame = 0;
        for y in 0..spec.classes {
            let mut s = render_many(p, protos, y, n, noise, &mut frame, &mut rng);
            s.shuffle(&mut rng);
            let val = s.split_off(n - n_val);
            source_train.extend(s);
            source_val.extend(val);
        }
    }

    let mut targets = Vec::new();
    for p in &profiles[ns as usize..] {
        let mut rng = derived_rng(spec.seed, sample_stream(p.subject_id));
        let mut frame = 0;
        let adapt = render_many(p, protos, 0, spec.adapt_frames, noise, &mut frame, &mut rng);
        let mut oracle_train = Vec::new();
        let mut test = Vec::new();
        for y in 0..spec.classes {
            oracle_train.extend(render_many(
                p,
                protos,
                y,
                spec.oracle_train_per_class,
                noise,
                &mut frame,
                &mut rng,
            ));
        }
        for y in 0..spec.classes {
            test.extend(render_many(p, protos, y, n, noise, &mut frame, &mut rng));
        }
        targets.push(TargetSplit {
            subject_id: p.subject_id,
            adapt,
            oracle_train,
            test,
        });
    }

    Ok(Dataset {
        spec: spec.clone(),
        prototypes: world.prototypes,
        profiles,
        source_train,
        source_val,
        targets,
    })
}

/// Stacks samples into an `(n, input_dim)` tensor and a label vector.
pub fn stack(samples: &[Sample]) -> Result<(Tensor, Vec<usize>)> {
    let d = samples
        .first()
        .map(|s| s.x.len())
        .ok_or_else(|| Error::Degenerate("no samples to stack".into()))?;
    let mut values = Vec::with_capacity(samples.len() * d);
    for s in samples {
        if s.x.len() != d {
            return Err(Error::shape("stack", format!("ragged samples {} vs {d}", s.x.len())));
        }
        values.extend_from_slice(&s.x);
    }
    let labels = samples.iter().map(|s| s.label).collect();
    Ok((Tensor::new(vec![samples.len(), d], values)?, labels))
}
