//! Acceptance benchmark. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 5 to 8, 10 and 11 run on the default synthetic benchmark
//! (20 source / 5 target subjects, severity 2.0) for seeds 0..5.

#[path = "../../core/tests/common/mod.rs"]
mod common;

#[path = "../../core/tests/brute/mod.rs"]
mod brute;

use std::time::Instant;

use pft_core::export::{mean_separation, project_embeddings, SubjectView};
use pft_core::losses::{cross_entropy, kl_divergence, style_loss};
use pft_core::models::{LayerSet, LayeredFeatures, Network};
use pft_core::numerics::{Tape, Tensor};
use pft_core::pairing::Strategy;
use pft_core::persist::Checkpoint;
use pft_core::pipeline::{
    ablate_dims, ablate_pairing, adapt_all, adaptation_cost, evaluate_subject, init_translator, predict,
    pretrain_translator, run_experiment, source_phase, Experiment, RunConfig, Setting, SourceModel, DIM_REFERENCE,
    SEEDS,
};
use pft_core::synthdata::{generate_dataset, stack, Dataset};
use pft_validation::{guarded, Suite, Verdict};

type Shared<T> = Result<T, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cached<T>(shared: &Shared<T>) -> Result<&T, String> {
    shared.as_ref().map_err(|e| format!("benchmark run failed: {e}"))
}

// ---------------------------------------------------------------------------

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    for (kind, names, f) in [
        ("op", &common::OPS[..], common::op_case as fn(&str, u64) -> common::Mismatch),
        ("loss", &common::LOSSES[..], common::loss_case),
    ] {
        for name in names {
            if let Some((seed, m)) = common::sweep(name, f) {
                return Err(format!(
                    "{kind} {name}, case {seed}: analytic {} vs numeric {}",
                    m.analytic, m.numeric
                ));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        secs < 30.0,
        format!(
            "{} ops and {} losses x {} cases within rel {:e} / abs {:e} at h={:e} in {secs:.2}s (limit 30s)",
            common::OPS.len(),
            common::LOSSES.len(),
            common::CASES,
            common::REL_TOL,
            common::ABS_TOL,
            common::H
        ),
    )
}

fn analytic_losses() -> Verdict {
    let t = |rows: &[Vec<f64>]| Tensor::from_rows(rows).unwrap();
    let kl_of = |p: &Tensor, q: &Tensor| {
        let mut tape = Tape::new();
        let (vp, vq) = (tape.param(p), tape.param(q));
        let l = kl_divergence(&mut tape, vp, vq).unwrap();
        tape.scalar(l)
    };

    let zeros = t(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]);
    let ce = {
        let mut tape = Tape::new();
        let v = tape.param(&zeros);
        let l = cross_entropy(&mut tape, v, &[0, 1, 0]).unwrap();
        tape.scalar(l)
    };
    let logits = t(&[vec![0.3, -1.2, 2.0], vec![-0.7, 0.1, 0.4]]);
    let kl_same = kl_of(&logits, &logits);
    let kl = kl_of(&t(&[vec![0.5f64.ln(), 0.5f64.ln()]]), &t(&[vec![0.25f64.ln(), 0.75f64.ln()]]));
    // Direct summation of p ln(p/q).
    let kl_direct: f64 = [(0.5, 0.25), (0.5, 0.75)].iter().map(|(p, q): &(f64, f64)| p * (p / q).ln()).sum();

    let a = t(&[vec![0.2, -1.0, 3.0], vec![1.5, 0.4, -0.6], vec![-0.3, 2.2, 0.9]]);
    let shifted = t(&a.values().chunks(3).map(|r| r.iter().map(|x| x + 1.0).collect()).collect::<Vec<_>>());
    let style = |x: &Tensor, y: &Tensor| {
        let mut tape = Tape::new();
        let (vx, vy) = (tape.param(x), tape.param(y));
        let l = style_loss(
            &mut tape,
            &LayeredFeatures { layers: vec![vx] },
            &LayeredFeatures { layers: vec![vy] },
            &LayerSet(vec![0]),
        )
        .unwrap();
        tape.scalar(l)
    };
    let (style_zero, style_unit) = (style(&a, &a), style(&a, &shifted));

    let checks = [
        ("CE uniform", ce, 2f64.ln(), 1e-9),
        ("KL identity", kl_same, 0.0, 1e-12),
        ("KL direct", kl, kl_direct, 1e-6),
        ("KL reference", kl, 0.143841, 1e-6),
        ("style zero", style_zero, 0.0, 1e-9),
        ("style unit mean offset", style_unit, 3.0, 1e-9),
    ];
    let detail = checks
        .iter()
        .map(|(n, got, want, _)| format!("{n} {got:.9} (want {want})"))
        .collect::<Vec<_>>()
        .join("; ");
    check(checks.iter().all(|(_, got, want, tol)| (got - want).abs() <= *tol), detail)
}

// ---------------------------------------------------------------------------

/// Source model trained on seed 0 with checkpoint bytes taken before and
/// after translator pretraining and adaptation.
struct FrozenRun {
    data: Dataset,
    cfg: RunConfig,
    model: SourceModel,
    before: Vec<u8>,
    after: Vec<u8>,
    subjects: usize,
}

fn source_bytes(m: &SourceModel) -> Vec<u8> {
    Checkpoint::from_networks(&[&m.extractor as &dyn Network, &m.classifier]).to_bytes()
}

fn frozen_run() -> Shared<FrozenRun> {
    let cfg = RunConfig::default().with_seed(0);
    let data = generate_dataset(&cfg.dataset).map_err(err)?;
    let (mut source, model, _, _) = source_phase(&cfg, &data).map_err(err)?;
    let before = source_bytes(&model);
    let (t, _) = pretrain_translator(&source, &data.profiles, &model, &cfg.pairing, &cfg.train).map_err(err)?;
    source.close();
    let (personal, _) = adapt_all(&source, &data, &model, &t, &cfg).map_err(err)?;
    Ok(FrozenRun {
        after: source_bytes(&model),
        before,
        subjects: personal.len(),
        model,
        cfg,
        data,
    })
}

fn frozen_invariant(run: &Shared<FrozenRun>) -> Verdict {
    let r = cached(run)?;
    check(
        r.before == r.after && r.subjects == 5,
        format!(
            "F+C checkpoint {} bytes, identical after pretraining and adapting {} subjects: {}",
            r.before.len(),
            r.subjects,
            r.before == r.after
        ),
    )
}

fn identity_start(run: &Shared<FrozenRun>) -> Verdict {
    let r = cached(run)?;
    let mut cfg = r.cfg.clone();
    cfg.train.adapt_epochs = 0;
    let mut source = pft_core::pipeline::SourceData::new(Vec::new(), Vec::new());
    source.close();
    // No pretraining epochs: the translator stays at its identity init.
    let identity = init_translator(&cfg.train);
    let (personal, _) = adapt_all(&source, &r.data, &r.model, &identity, &cfg).map_err(err)?;
    let mut frames = 0;
    for (t, (_, ts)) in r.data.targets.iter().zip(&personal) {
        let (x, _) = stack(&t.test).map_err(err)?;
        let a = predict(&x, &r.model, Some(ts)).map_err(err)?.labels;
        let b = predict(&x, &r.model, None).map_err(err)?.labels;
        if a != b {
            return Err(format!("subject {}: predictions differ", t.subject_id));
        }
        let pft = evaluate_subject(Setting::Pft, t, &r.model, Some(ts)).map_err(err)?;
        let src = evaluate_subject(Setting::SourceOnly, t, &r.model, None).map_err(err)?;
        if pft.accuracy.to_bits() != src.accuracy.to_bits() {
            return Err(format!("subject {}: {} vs {}", t.subject_id, pft.accuracy, src.accuracy));
        }
        frames += a.len();
    }
    Ok(format!(
        "{} subjects, {frames} test frames: identical predictions and accuracies",
        personal.len()
    ))
}

// ---------------------------------------------------------------------------

struct SeedRun {
    seed: u64,
    data: Dataset,
    exp: Experiment,
    seconds: f64,
}

fn benchmark_runs() -> Shared<Vec<SeedRun>> {
    SEEDS
        .iter()
        .map(|&seed| {
            let cfg = RunConfig::default().with_seed(seed);
            let data = generate_dataset(&cfg.dataset).map_err(err)?;
            let start = Instant::now();
            let exp = run_experiment(&cfg, &data).map_err(err)?;
            let seconds = start.elapsed().as_secs_f64();
            println!(
                "  seed {seed}: source {:.2} pft {:.2} oracle {:.2} ({seconds:.1}s)",
                exp.report.average(Setting::SourceOnly).unwrap_or(f64::NAN),
                exp.report.average(Setting::Pft).unwrap_or(f64::NAN),
                exp.report.average(Setting::Oracle).unwrap_or(f64::NAN),
            );
            Ok(SeedRun { seed, data, exp, seconds })
        })
        .collect()
}

fn averages(runs: &[SeedRun], s: Setting) -> f64 {
    mean(&runs.iter().map(|r| r.exp.report.average(s).unwrap_or(f64::NAN)).collect::<Vec<_>>())
}

fn gap_recovery(runs: &Shared<Vec<SeedRun>>) -> Verdict {
    let runs = cached(runs)?;
    let (src, pft, ora) = (
        averages(runs, Setting::SourceOnly),
        averages(runs, Setting::Pft),
        averages(runs, Setting::Oracle),
    );
    let gap = ora - src;
    let slowest = runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let a = gap >= 15.0;
    let b = pft >= src + 0.5 * gap;
    let c = pft <= ora + 1.0;
    let time = slowest < 300.0;
    let recovered = if gap > 0.0 { 100.0 * (pft - src) / gap } else { f64::NAN };
    check(
        a && b && c && time,
        format!(
            "source {src:.2}, pft {pft:.2}, oracle {ora:.2}; (a) gap {gap:.2} >= 15: {a}; \
             (b) pft recovers {recovered:.1}% of gap (need 50%): {b}; (c) pft <= oracle + 1: {c}; \
             slowest seed {slowest:.1}s < 300s: {time}"
        ),
    )
}

// ---------------------------------------------------------------------------

fn pairing_runs() -> Shared<Vec<Vec<(Strategy, f64)>>> {
    SEEDS
        .iter()
        .map(|&seed| {
            let cfg = RunConfig::default().with_seed(seed);
            let data = generate_dataset(&cfg.dataset).map_err(err)?;
            let res = ablate_pairing(&cfg, &data, &Strategy::ALL).map_err(err)?;
            let row: Vec<(Strategy, f64)> = res.iter().map(|(r, _)| (r.strategy, r.pft)).collect();
            println!(
                "  seed {seed}: {}",
                row.iter().map(|(s, a)| format!("{s} {a:.2}")).collect::<Vec<_>>().join(", ")
            );
            Ok(row)
        })
        .collect()
}

fn pairing_trend(runs: &Shared<Vec<Vec<(Strategy, f64)>>>) -> Verdict {
    let runs = cached(runs)?;
    let avg = |s: Strategy| {
        mean(&runs.iter().map(|r| r.iter().find(|x| x.0 == s).unwrap().1).collect::<Vec<_>>())
    };
    let (random, cosine, landmark) = (avg(Strategy::Random), avg(Strategy::Cosine), avg(Strategy::Landmark));
    let ok_l = landmark >= random - 0.5;
    let ok_c = cosine >= random - 0.5;
    check(
        ok_l && ok_c,
        format!(
            "random {random:.2}, cosine {cosine:.2}, landmark {landmark:.2}; landmark >= random - 0.5: {ok_l}; \
             cosine >= random - 0.5: {ok_c}; landmark >= cosine (reported only): {}",
            landmark >= cosine
        ),
    )
}

// ---------------------------------------------------------------------------

struct DimRow {
    feat_dim: usize,
    pft: Vec<f64>,
    fractions: Vec<f64>,
}

fn dim_runs(base: &Shared<Vec<SeedRun>>) -> Shared<Vec<DimRow>> {
    let base = cached(base)?;
    let default_dim = RunConfig::default().train.feat_dim;
    let sweep = [64, 256, 512];
    let mut rows: Vec<DimRow> = sweep
        .iter()
        .chain(std::iter::once(&default_dim))
        .map(|&d| DimRow {
            feat_dim: d,
            pft: Vec::new(),
            fractions: Vec::new(),
        })
        .collect();
    for run in base {
        let cfg = RunConfig::default().with_seed(run.seed);
        let res = ablate_dims(&cfg, &run.data, &sweep).map_err(err)?;
        for (r, _) in &res {
            let row = rows.iter_mut().find(|x| x.feat_dim == r.feat_dim).unwrap();
            row.pft.push(r.pft);
            row.fractions.push(r.trainable_fraction);
        }
        // The default width comes from the benchmark runs.
        let row = rows.iter_mut().find(|x| x.feat_dim == default_dim).unwrap();
        row.pft.push(run.exp.report.average(Setting::Pft).unwrap_or(f64::NAN));
        row.fractions.push(run.exp.cost.trainable_fraction());
        println!(
            "  seed {}: {}",
            run.seed,
            res.iter()
                .map(|(r, _)| format!("d={} pft {:.2}", r.feat_dim, r.pft))
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    rows.sort_by_key(|r| r.feat_dim);
    Ok(rows)
}

fn dim_trend(rows: &Shared<Vec<DimRow>>) -> Verdict {
    let rows = cached(rows)?;
    let acc = |d: usize| mean(&rows.iter().find(|r| r.feat_dim == d).unwrap().pft);
    let small = acc(64);
    let a = acc(512) >= small - 1.0;
    let b = acc(256).max(acc(512)) >= small;
    let curve = rows
        .iter()
        .map(|r| {
            let reference = DIM_REFERENCE.iter().find(|x| x.0 == r.feat_dim).map(|x| x.1);
            format!("{}: {:.2} (published {})", r.feat_dim, mean(&r.pft), reference.unwrap_or(f64::NAN))
        })
        .collect::<Vec<_>>()
        .join(", ");
    check(
        a && b,
        format!("{curve}; acc(512) >= acc(64) - 1: {a}; max(256, 512) >= acc(64): {b}"),
    )
}

// ---------------------------------------------------------------------------

fn lightweight(runs: &Shared<Vec<SeedRun>>, dims: &Shared<Vec<DimRow>>) -> Verdict {
    let runs = cached(runs)?;
    let dims = cached(dims)?;
    brute::cost_formulas()?;
    let mut worst = (0usize, 0.0f64);
    for r in dims {
        for &f in &r.fractions {
            if f > worst.1 {
                worst = (r.feat_dim, f);
            }
        }
    }
    // Pairing variants share the default architecture.
    for r in runs {
        let f = adaptation_cost(&r.exp.source, &r.exp.translator).trainable_fraction();
        if f > worst.1 {
            worst = (r.exp.translator.feat_dim(), f);
        }
    }
    check(
        worst.1 <= 0.10,
        format!(
            "count_cost matches hand formulas on {} architectures; largest trainable share {:.2}% at feat_dim {}",
            brute::ARCHS.len(),
            100.0 * worst.1,
            worst.0
        ),
    )
}

fn pairing_equivalence() -> Verdict {
    let worst = brute::procrustes_agreement(50, 1e-6)?;
    let relaxed = brute::landmark_equivalence(40)?;
    brute::cosine_equivalence(60)?;
    Ok(format!(
        "cosine 60 instances and landmark 40 instances (2..10 subjects, {relaxed} relaxed matches) equal exhaustive search; \
         Procrustes within {worst:.1e} of grid search on 50 shape pairs"
    ))
}

fn determinism(runs: &Shared<Vec<SeedRun>>) -> Verdict {
    let runs = cached(runs)?;
    let first = &runs[0];
    let cfg = RunConfig::default().with_seed(first.seed);
    let again = run_experiment(&cfg, &generate_dataset(&cfg.dataset).map_err(err)?).map_err(err)?;
    let (a, b) = (
        first.exp.report.to_csv_string().map_err(err)?,
        again.report.to_csv_string().map_err(err)?,
    );
    if a != b {
        return Err("repeated run wrote a different evaluation CSV".into());
    }

    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("model.ckpt");
    let ck = Checkpoint::from_networks(&[
        &first.exp.source.extractor as &dyn Network,
        &first.exp.source.classifier,
        &first.exp.translator,
    ]);
    ck.save(&path).map_err(err)?;
    let back = Checkpoint::load(&path).map_err(err)?;
    if !ck.bit_eq(&back) || back.to_bytes() != ck.to_bytes() {
        return Err("checkpoint roundtrip is not bit-exact".into());
    }
    let mut bytes = std::fs::read(&path).map_err(err)?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&path, &bytes).map_err(err)?;
    let corrupted = match Checkpoint::load(&path) {
        Ok(_) => return Err("corrupted checkpoint was accepted".into()),
        Err(e) => e.code(),
    };
    let truncated = match Checkpoint::from_bytes(&ck.to_bytes()[..mid]) {
        Ok(_) => return Err("truncated checkpoint was accepted".into()),
        Err(e) => e.code(),
    };
    Ok(format!(
        "repeated seed-{} run wrote an identical {}-byte evaluation CSV; {}-byte checkpoint roundtrip bit-exact; \
         flipped bit rejected ({corrupted}); truncation rejected ({truncated})",
        first.seed,
        a.len(),
        bytes.len()
    ))
}

fn separation(runs: &Shared<Vec<SeedRun>>) -> Verdict {
    let runs = cached(runs)?;
    let mut src = Vec::new();
    let mut pft = Vec::new();
    for r in runs {
        let views: Vec<SubjectView> = r
            .data
            .targets
            .iter()
            .map(|t| SubjectView {
                samples: &t.test,
                translator: r.exp.personalized_for(t.subject_id).expect("adapted subject"),
            })
            .collect();
        let (_, rows) = project_embeddings(&r.exp.source, &views).map_err(err)?;
        src.push(mean_separation(&rows, Setting::SourceOnly).ok_or("no separable subject")?);
        pft.push(mean_separation(&rows, Setting::Pft).ok_or("no separable subject")?);
    }
    let per_seed = src
        .iter()
        .zip(&pft)
        .map(|(a, b)| format!("{a:.3}->{b:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    let (a, b) = (mean(&src), mean(&pft));
    check(
        b > a,
        format!("between/within ratio source_only {a:.4}, pft {b:.4} (per seed {per_seed}); strictly increases: {}", b > a),
    )
}

fn main() {
    let mut suite = Suite::default();
    suite.run("1", "gradient oracle", gradient_oracle);
    suite.run("2", "analytic loss values", analytic_losses);

    let frozen = guarded(frozen_run);
    suite.run("3", "frozen-parameter invariant", || frozen_invariant(&frozen));
    suite.run("4", "identity-start equivalence", || identity_start(&frozen));
    drop(frozen);

    let runs = guarded(benchmark_runs);
    suite.run("5", "gap recovery", || gap_recovery(&runs));
    let pairing = guarded(pairing_runs);
    suite.run("6", "pairing trend", || pairing_trend(&pairing));
    let dims = guarded(|| dim_runs(&runs));
    suite.run("7", "dimensionality trend", || dim_trend(&dims));
    suite.run("8", "lightweight contract", || lightweight(&runs, &dims));
    suite.run("9", "brute-force pairing equivalence", pairing_equivalence);
    suite.run("10", "determinism and persistence", || determinism(&runs));
    suite.run("11", "embedding separation", || separation(&runs));

    println!("{}", suite.summary());
    if !suite.all_passed() {
        std::process::exit(1);
    }
}
