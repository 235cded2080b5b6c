//! Exhaustive-search oracles for pairing and hand-counted costs, shared by
//! the oracle tests and the acceptance suite. Checks return `Err` with a
//! description instead of panicking.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pft_core::models::{count_cost, set_frozen, Classifier, FeatureExtractor, Network, Translator};
use pft_core::numerics::Tensor;
use pft_core::pairing::{
    landmark_score, match_subjects, pair_cosine_features, procrustes_residual, PairingConfig, Relaxation,
};
use pft_core::synthdata::{make_subject, DatasetSpec, Population, Sample, SubjectProfile, World, LANDMARKS};

pub type Check<T> = std::result::Result<T, String>;

/// Residual of the best similarity fit of `b` onto `a`, relative to the
/// spread of `a`, for a fixed rotation angle.
fn fit_at(a: &[[f64; 2]], b: &[[f64; 2]], theta: f64) -> f64 {
    let n = a.len() as f64;
    let (c, s) = (theta.cos(), theta.sin());
    let rb: Vec<[f64; 2]> = b.iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect();
    let mean = |p: &[[f64; 2]]| {
        let (x, y) = p.iter().fold((0.0, 0.0), |acc, q| (acc.0 + q[0], acc.1 + q[1]));
        [x / n, y / n]
    };
    let (ma, mb) = (mean(a), mean(&rb));
    let ac: Vec<[f64; 2]> = a.iter().map(|p| [p[0] - ma[0], p[1] - ma[1]]).collect();
    let bc: Vec<[f64; 2]> = rb.iter().map(|p| [p[0] - mb[0], p[1] - mb[1]]).collect();
    let dot: f64 = ac.iter().zip(&bc).map(|(p, q)| p[0] * q[0] + p[1] * q[1]).sum();
    let bb: f64 = bc.iter().map(|q| q[0] * q[0] + q[1] * q[1]).sum();
    let aa: f64 = ac.iter().map(|q| q[0] * q[0] + q[1] * q[1]).sum();
    let scale = (dot / bb).max(0.0);
    let sse: f64 = ac
        .iter()
        .zip(&bc)
        .map(|(p, q)| (p[0] - scale * q[0]).powi(2) + (p[1] - scale * q[1]).powi(2))
        .sum();
    sse / aa
}

/// Procrustes residual by a 0.1 degree rotation grid refined with golden
/// section search.
pub fn procrustes_by_search(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    const STEPS: usize = 3600;
    let step = std::f64::consts::TAU / STEPS as f64;
    let best = (0..STEPS)
        .map(|k| k as f64 * step)
        .min_by(|x, y| fit_at(a, b, *x).total_cmp(&fit_at(a, b, *y)))
        .unwrap();
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (best - step, best + step);
    while hi - lo > 1e-12 {
        let m1 = hi - g * (hi - lo);
        let m2 = lo + g * (hi - lo);
        if fit_at(a, b, m1) < fit_at(a, b, m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    fit_at(a, b, 0.5 * (lo + hi))
}

/// Largest deviation of the closed form from the search over `n` random
/// shape pairs.
pub fn procrustes_agreement(n: usize, tol: f64) -> Check<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shape = |rng: &mut ChaCha8Rng| -> Vec<[f64; 2]> {
        (0..LANDMARKS)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect()
    };
    let mut worst = 0.0f64;
    for case in 0..n {
        let (a, b) = (shape(&mut rng), shape(&mut rng));
        let got = procrustes_residual(&a, &b).map_err(|e| e.to_string())?;
        let want = procrustes_by_search(&a, &b);
        worst = worst.max((got - want).abs());
        if (got - want).abs() >= tol {
            return Err(format!("shape pair {case}: closed form {got} vs search {want}"));
        }
    }
    Ok(worst)
}

fn oracle_score(a: &SubjectProfile, b: &SubjectProfile, cfg: &PairingConfig) -> f64 {
    let dot: f64 = (0..3).map(|i| a.pose[i] * b.pose[i]).sum();
    cfg.landmark_weight * procrustes_by_search(&a.landmarks, &b.landmarks)
        + cfg.pose_weight * (1.0 - dot).clamp(0.0, 2.0)
}

/// Constraint level a pair needs: 0 strict, 1 without age, 2 without either.
fn level_needed(a: &SubjectProfile, b: &SubjectProfile, cfg: &PairingConfig) -> usize {
    let gender_ok = !cfg.same_gender_required || a.gender == b.gender;
    let age_ok = (a.age - b.age).abs() <= cfg.max_age_gap;
    match (age_ok && gender_ok, gender_ok) {
        (true, _) => 0,
        (false, true) => 1,
        _ => 2,
    }
}

fn profiles_for(seed: u64, n: usize) -> Vec<SubjectProfile> {
    let spec = DatasetSpec {
        seed,
        ..DatasetSpec::default()
    };
    let world = World::new(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    (0..n as u32)
        .map(|id| {
            let mut p = make_subject(&spec, &world, id, Population::Source);
            // Sparse demographics force the relaxation levels to be used.
            p.age = rng.random_range(18.0..70.0);
            p.gender = rng.random_range(0..=1);
            p
        })
        .collect()
}

/// Subject matching against enumeration of every partner on instances of
/// 2 to 10 subjects. Returns how many matches needed relaxation.
pub fn landmark_equivalence(instances: u64) -> Check<usize> {
    let mut relaxed = 0;
    for seed in 0..instances {
        let n = 2 + (seed as usize % 9);
        let profiles = profiles_for(seed, n);
        let cfg = PairingConfig {
            max_age_gap: 5.0,
            pose_weight: 0.5 + (seed % 3) as f64,
            ..PairingConfig::default()
        };
        let refs: Vec<&SubjectProfile> = profiles.iter().collect();
        let got = match_subjects(&refs, &cfg).map_err(|e| e.to_string())?;
        if got.len() != n {
            return Err(format!("instance {seed}: {} matches for {n} subjects", got.len()));
        }
        for (a, m) in profiles.iter().zip(&got) {
            let candidates: Vec<(usize, f64, u32)> = profiles
                .iter()
                .filter(|b| b.subject_id != a.subject_id)
                .map(|b| (level_needed(a, b, &cfg), oracle_score(a, b, &cfg), b.subject_id))
                .collect();
            let level = candidates.iter().map(|c| c.0).min().unwrap();
            let best = candidates
                .iter()
                .filter(|c| c.0 == level)
                .min_by(|x, y| x.1.total_cmp(&y.1).then(x.2.cmp(&y.2)))
                .unwrap();
            let want_relax = [Relaxation::None, Relaxation::Age, Relaxation::AgeAndGender][level];
            relaxed += (level > 0) as usize;
            let fail = |what: String| Err(format!("instance {seed}, subject {}: {what}", a.subject_id));
            if m.subject != a.subject_id || m.relaxation != want_relax {
                return fail(format!("relaxation {:?} vs {want_relax:?}", m.relaxation));
            }
            if (m.score - best.1).abs() >= 1e-6 {
                return fail(format!("score {} vs {}", m.score, best.1));
            }
            if m.partner != best.2 {
                // Only a numerical near-tie may flip the choice.
                let chosen = candidates.iter().find(|c| c.2 == m.partner).unwrap();
                if chosen.0 != level || (chosen.1 - best.1).abs() >= 1e-6 {
                    return fail(format!("partner {} vs {}", m.partner, best.2));
                }
            }
            let partner = profiles.iter().find(|p| p.subject_id == m.partner).unwrap();
            if landmark_score(a, partner, &cfg).map_err(|e| e.to_string())? != m.score {
                return fail("reported score differs from landmark_score".into());
            }
        }
    }
    Ok(relaxed)
}

fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
    }
}

/// Cosine pairing against a scan of every admissible partner, on random
/// instances of 2 to 10 subjects with integer features (frequent ties).
pub fn cosine_equivalence(instances: usize) -> Check<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..instances {
        let subjects = rng.random_range(2..=10u32);
        let n = rng.random_range(subjects as usize..=40);
        let dim = rng.random_range(2..6);
        let samples: Vec<Sample> = (0..n)
            .map(|i| Sample {
                x: vec![0.0],
                label: 0,
                subject_id: if (i as u32) < subjects { i as u32 } else { rng.random_range(0..subjects) },
                frame_id: i as u32,
            })
            .collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-2..=2) as f64).collect())
            .collect();
        let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.3)).collect();
        let threshold = 0.15;
        let feats = Tensor::from_rows(&rows).map_err(|e| e.to_string())?;
        let got = pair_cosine_features(&samples, &feats, &losses, threshold, &mut rng).map_err(|e| e.to_string())?;
        if got.len() != n {
            return Err(format!("case {case}: {} pairs for {n} samples", got.len()));
        }
        for (i, p) in got.iter().enumerate() {
            let fail = |what: &str| Err(format!("case {case}, sample {i}: {what}"));
            if p.content != i || samples[p.identity].subject_id == samples[i].subject_id {
                return fail("not a cross-subject pair for this sample");
            }
            let pool: Vec<usize> = (0..n)
                .filter(|&j| losses[j] <= threshold && samples[j].subject_id != samples[i].subject_id)
                .collect();
            if pool.is_empty() {
                if !p.score.is_nan() {
                    return fail("fallback pair carries a score");
                }
                continue;
            }
            let mut want = pool[0];
            for &j in &pool {
                if naive_cosine(&rows[i], &rows[j]) < naive_cosine(&rows[i], &rows[want]) {
                    want = j;
                }
            }
            let best = naive_cosine(&rows[i], &rows[want]);
            if !pool.contains(&p.identity) {
                return fail("identity outside the candidate pool");
            }
            if (p.score - best).abs() >= 1e-12 {
                return fail(&format!("score {} vs {best}", p.score));
            }
            if p.identity != want && (naive_cosine(&rows[i], &rows[p.identity]) - best).abs() >= 1e-12 {
                return fail(&format!("identity {} vs {want}", p.identity));
            }
        }
    }
    Ok(())
}

/// Architectures `(input, hidden, feat, depth, classes)` with hand counts.
pub const ARCHS: [(usize, usize, usize, usize, usize); 3] = [(32, 256, 64, 3, 2), (32, 512, 512, 3, 2), (8, 16, 4, 2, 3)];

/// `count_cost` against hand formulas with F and C frozen and T trainable.
pub fn cost_formulas() -> Check<()> {
    for (i, h, d, depth, c) in ARCHS {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ext = FeatureExtractor::new(i, h, d, depth, &mut rng);
        let mut clf = Classifier::new(d, c, &mut rng);
        let mut tr = Translator::new(d, &mut rng);
        set_frozen(&mut tr, false);
        set_frozen(&mut ext, true);
        set_frozen(&mut clf, true);

        let mut widths = vec![i];
        widths.extend(std::iter::repeat_n(h, depth - 1));
        widths.push(d);
        let ext_params: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        // Affine: one multiply and one add per weight; ReLU: one per unit.
        let ext_flops: usize = widths.windows(2).map(|w| 2 * w[0] * w[1] + w[1]).sum();
        let th = tr.hidden.output_dim();
        let tr_params = d * th + th + th * d + d;
        let tr_flops = 2 * d * th + th + 2 * th * d + d;
        let clf_params = d * c + c;

        let cost = count_cost(&[&ext as &dyn Network, &clf, &tr]);
        let want = (ext_params + clf_params + tr_params, tr_params, ext_flops + 2 * d * c + tr_flops);
        let got = (cost.total_params, cost.trainable_params, cost.flops_per_sample);
        if got != want {
            return Err(format!("arch {:?}: (total, trainable, flops) {got:?} vs {want:?}", (i, h, d, depth, c)));
        }
    }
    Ok(())
}
