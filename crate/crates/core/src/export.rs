//! 2-D embedding export and cluster-separation measurement.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::Translator;
use crate::numerics::Tensor;
use crate::pipeline::{Setting, SourceModel};
use crate::synthdata::{stack, Sample};

/// Top-two principal axes of a pooled feature matrix.
#[derive(Debug, Clone)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Unit axes, largest variance first. Each axis is signed so its
    /// largest-magnitude coordinate is positive.
    pub axes: [Vec<f64>; 2],
    pub variances: [f64; 2],
}

impl Pca2 {
    pub fn fit(features: &Tensor) -> Result<Self> {
        let (n, d) = (features.rows(), features.cols());
        if n < 2 {
            return Err(Error::Degenerate(format!("projection needs >= 2 samples, got {n}")));
        }
        if d < 2 {
            return Err(Error::Degenerate(format!("projection needs >= 2 dims, got {d}")));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(features.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| features.row(i)[j] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);

        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let axis = |k: usize| {
            let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
            let pivot = v
                .iter()
                .copied()
                .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        };
        Ok(Pca2 {
            mean,
            axes: [axis(0), axis(1)],
            variances: [
                eig.eigenvalues[order[0]].max(0.0),
                eig.eigenvalues[order[1]].max(0.0),
            ],
        })
    }

    pub fn project(&self, row: &[f64]) -> [f64; 2] {
        let dot = |a: &[f64]| {
            row.iter()
                .zip(&self.mean)
                .zip(a)
                .map(|((x, m), w)| (x - m) * w)
                .sum()
        };
        [dot(&self.axes[0]), dot(&self.axes[1])]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingRow {
    pub subject_id: u32,
    pub frame_id: u32,
    pub label: usize,
    pub setting: Setting,
    pub pc1: f64,
    pub pc2: f64,
}

/// One target subject's samples and its personalized translator.
pub struct SubjectView<'a> {
    pub samples: &'a [Sample],
    pub translator: &'a Translator,
}

/// Projects source-only features and translated features of every
/// subject onto one PCA basis fitted on both pooled together.
pub fn project_embeddings(model: &SourceModel, subjects: &[SubjectView]) -> Result<(Pca2, Vec<EmbeddingRow>)> {
    let mut pooled = Vec::new();
    let mut meta = Vec::new();
    for s in subjects {
        let (x, _) = stack(s.samples)?;
        let f = model.extractor.features(&x)?;
        let t = s.translator.apply(&f)?;
        for (setting, feats) in [(Setting::SourceOnly, &f), (Setting::Pft, &t)] {
            for (i, sample) in s.samples.iter().enumerate() {
                pooled.push(feats.row(i).to_vec());
                meta.push((sample, setting));
            }
        }
    }
    let pooled = Tensor::from_rows(&pooled)?;
    let pca = Pca2::fit(&pooled)?;
    let mut rows: Vec<EmbeddingRow> = meta
        .iter()
        .enumerate()
        .map(|(i, (s, setting))| {
            let [pc1, pc2] = pca.project(pooled.row(i));
            EmbeddingRow {
                subject_id: s.subject_id,
                frame_id: s.frame_id,
                label: s.label,
                setting: *setting,
                pc1,
                pc2,
            }
        })
        .collect();
    rows.sort_by_key(|r| (r.setting, r.subject_id, r.frame_id));
    Ok((pca, rows))
}

pub fn write_embeddings_csv<W: Write>(rows: &[EmbeddingRow], manifest_hash: &str, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subject_id", "frame_id", "label", "setting", "pc1", "pc2", "manifest_hash"])?;
    for r in rows {
        w.write_record([
            r.subject_id.to_string(),
            r.frame_id.to_string(),
            r.label.to_string(),
            r.setting.name().to_string(),
            r.pc1.to_string(),
            r.pc2.to_string(),
            manifest_hash.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Mean pairwise distance between class centroids over the RMS distance
/// of points to their own centroid. `None` with fewer than two classes or
/// zero spread.
pub fn separation_ratio(points: &[([f64; 2], usize)]) -> Option<f64> {
    let classes = points.iter().map(|p| p.1).max()? + 1;
    let mut sum = vec![[0.0; 2]; classes];
    let mut count = vec![0usize; classes];
    for (p, y) in points {
        sum[*y][0] += p[0];
        sum[*y][1] += p[1];
        count[*y] += 1;
    }
    let centroids: Vec<(usize, [f64; 2])> = (0..classes)
        .filter(|&c| count[c] > 0)
        .map(|c| (c, [sum[c][0] / count[c] as f64, sum[c][1] / count[c] as f64]))
        .collect();
    if centroids.len() < 2 {
        return None;
    }
    let centroid = |y: usize| centroids.iter().find(|c| c.0 == y).unwrap().1;
    let within = points
        .iter()
        .map(|(p, y)| {
            let c = centroid(*y);
            (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)
        })
        .sum::<f64>()
        / points.len() as f64;
    let mut between = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            let (a, b) = (centroids[i].1, centroids[j].1);
            between += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            pairs += 1;
        }
    }
    let within = within.sqrt();
    (within > 0.0).then(|| between / pairs as f64 / within)
}

/// Per-subject separation ratio in the shared projection, averaged over
/// subjects that have at least two classes present.
pub fn mean_separation(rows: &[EmbeddingRow], setting: Setting) -> Option<f64> {
    let mut subjects: Vec<u32> = rows.iter().map(|r| r.subject_id).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let ratios: Vec<f64> = subjects
        .iter()
        .filter_map(|&s| {
            let pts: Vec<([f64; 2], usize)> = rows
                .iter()
                .filter(|r| r.subject_id == s && r.setting == setting)
                .map(|r| ([r.pc1, r.pc2], r.label))
                .collect();
            separation_ratio(&pts)
        })
        .collect();
    (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
}
