use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use pft_core::export::{mean_separation, project_embeddings, write_embeddings_csv, SubjectView};
use pft_core::models::Translator;
use pft_core::pairing::{write_pairs_csv, Strategy};
use pft_core::persist::{self, load_dataset, require_file, save_dataset, save_json, Checkpoint};
use pft_core::pipeline::{
    ablate_dims, ablate_pairing, adapt_target, build_report, init_source_model, init_translator,
    oracle_all, pairing_plan, pretrain_translator, train_source_classifier, EvalReport, RunConfig,
    RunManifest, Setting, SourceData, SourceModel, DIM_REFERENCE, FEAT_DIMS, PAIRING_REFERENCE,
};
use pft_core::synthdata::{generate_dataset, Dataset};
use pft_core::{Error, Result};

#[derive(Parser)]
#[command(name = "pft", version, about = "Personalized feature translation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Overrides both the data and the training seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into <out>/data.
    GenData,
    /// Train extractor and classifier on source subjects.
    TrainSource,
    /// Pretrain the translator by subject swapping.
    PretrainTranslator,
    /// Adapt one translator per target subject from neutral frames.
    Adapt,
    /// Evaluate source-only, personalized and oracle accuracy.
    Eval,
    /// Rerun the protocol for each feature width.
    AblateDim {
        #[arg(long, value_delimiter = ',', default_values_t = FEAT_DIMS)]
        dims: Vec<usize>,
    },
    /// Compare pairing strategies for translator pretraining.
    AblatePairing {
        #[arg(long, value_delimiter = ',', default_values_t = Strategy::ALL)]
        strategies: Vec<Strategy>,
    },
    /// Write 2-D projections of target test features.
    ExportEmbeddings,
    /// Merge evaluation CSVs into a subject-by-setting table.
    Report {
        /// Evaluation CSVs; defaults to <out>/eval.csv.
        #[arg(long, value_delimiter = ',')]
        inputs: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainSource => "train-source",
            Command::PretrainTranslator => "pretrain-translator",
            Command::Adapt => "adapt",
            Command::Eval => "eval",
            Command::AblateDim { .. } => "ablate-dim",
            Command::AblatePairing { .. } => "ablate-pairing",
            Command::ExportEmbeddings => "export-embeddings",
            Command::Report { .. } => "report",
        }
    }
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => persist::load_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg = cfg.with_seed(seed);
        }
        cfg.validate()?;
        Ok(Run {
            cfg,
            out: common.out.clone(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn data_dir(&self) -> PathBuf {
        self.path("data")
    }

    fn adapted(&self, subject_id: u32) -> PathBuf {
        self.path("adapted").join(format!("translator-{subject_id}.ckpt"))
    }

    fn data(&self) -> Result<Dataset> {
        require_file(&self.data_dir().join(persist::DATASET_MANIFEST), "gen-data")?;
        let data = load_dataset(&self.data_dir())?;
        if data.spec != self.cfg.dataset {
            return Err(Error::Config(format!(
                "{} was generated with a different dataset config or seed",
                self.data_dir().display()
            )));
        }
        Ok(data)
    }

    fn source_model(&self, data: &Dataset) -> Result<SourceModel> {
        let path = require_file(&self.path("source.ckpt"), "train-source")?;
        let ck = Checkpoint::load(&path)?;
        let mut model = init_source_model(&self.cfg.train, data.spec.input_dim, data.spec.classes);
        ck.restore_into(&mut model.extractor)?;
        ck.restore_into(&mut model.classifier)?;
        Ok(model)
    }

    fn translator(&self, path: &Path, produced_by: &str) -> Result<Translator> {
        let ck = Checkpoint::load(&require_file(path, produced_by)?)?;
        let mut t = init_translator(&self.cfg.train);
        ck.restore_into(&mut t)?;
        Ok(t)
    }

    fn personalized(&self, data: &Dataset) -> Result<Vec<(u32, Translator)>> {
        data.targets
            .iter()
            .map(|t| Ok((t.subject_id, self.translator(&self.adapted(t.subject_id), "adapt")?)))
            .collect()
    }

    fn manifest(&self, data: &Dataset) -> Result<RunManifest> {
        RunManifest::new(&self.cfg, data)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a CSV with a trailing `manifest_hash` column on every row.
fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>], hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut head: Vec<&str> = header.to_vec();
    head.push("manifest_hash");
    w.write_record(&head)?;
    for r in rows {
        let mut r = r.clone();
        r.push(hash.to_string());
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn gen_data(run: &Run) -> Result<()> {
    let data = generate_dataset(&run.cfg.dataset)?;
    save_dataset(&data, &run.data_dir())?;
    save_json(&run.cfg, &run.path("config.json"))?;
    save_json(&run.manifest(&data)?, &run.path("run_manifest.json"))?;
    info!("wrote {} subjects to {}", data.profiles.len(), run.data_dir().display());
    Ok(())
}

fn train_source(run: &Run) -> Result<()> {
    let data = run.data()?;
    let hash = run.manifest(&data)?.short_hash().to_string();
    let source = SourceData::new(data.source_train.clone(), data.source_val.clone());
    let (model, log, acc) =
        train_source_classifier(&source, data.spec.input_dim, data.spec.classes, &run.cfg.train)?;
    Checkpoint::from_networks(&[&model.extractor, &model.classifier]).save(&run.path("source.ckpt"))?;
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_loss.to_string(),
                e.val_accuracy.to_string(),
                e.lr.to_string(),
            ]
        })
        .collect();
    write_table(
        &run.path("source_log.csv"),
        &["epoch", "train_loss", "val_loss", "val_accuracy", "lr"],
        &rows,
        &hash,
    )?;
    println!("source validation accuracy {acc:.2}");
    Ok(())
}

fn pretrain(run: &Run) -> Result<()> {
    let data = run.data()?;
    let hash = run.manifest(&data)?.short_hash().to_string();
    let model = run.source_model(&data)?;
    let mut source = SourceData::new(data.source_train.clone(), data.source_val.clone());
    let (translator, log) =
        pretrain_translator(&source, &data.profiles, &model, &run.cfg.pairing, &run.cfg.train)?;

    let pairs = pairing_plan(source.train()?, &data.profiles, &model, &run.cfg.pairing, &run.cfg.train)?;
    write_pairs_csv(create(&run.path("pairs.csv"))?, source.train()?, &pairs, &hash)?;
    source.close();

    Checkpoint::from_networks(&[&translator]).save(&run.path("translator.ckpt"))?;
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                e.total.to_string(),
                e.ce.to_string(),
                e.expr.to_string(),
                e.style.to_string(),
                e.lr.to_string(),
            ]
        })
        .collect();
    write_table(
        &run.path("pretrain_log.csv"),
        &["epoch", "total", "ce", "expr", "style", "lr"],
        &rows,
        &hash,
    )
}

fn adapt(run: &Run) -> Result<()> {
    let data = run.data()?;
    let hash = run.manifest(&data)?.short_hash().to_string();
    let model = run.source_model(&data)?;
    let pretrained = run.translator(&run.path("translator.ckpt"), "pretrain-translator")?;
    let mut rows = Vec::new();
    for t in &data.targets {
        let (ts, log) = adapt_target(&t.adapt, &model, &pretrained, &run.cfg.train)?;
        Checkpoint::from_networks(&[&ts]).save(&run.adapted(t.subject_id))?;
        for (epoch, loss) in log.losses.iter().enumerate() {
            rows.push(vec![t.subject_id.to_string(), epoch.to_string(), loss.to_string()]);
        }
    }
    write_table(&run.path("adapt_log.csv"), &["subject_id", "epoch", "loss"], &rows, &hash)
}

fn eval(run: &Run) -> Result<()> {
    let data = run.data()?;
    let manifest = run.manifest(&data)?;
    let model = run.source_model(&data)?;
    let personalized = run.personalized(&data)?;
    let oracles = oracle_all(&data, &model, &run.cfg)?;
    let report = build_report(&manifest, &data, &model, &personalized, &oracles)?;
    report.write_csv(create(&run.path("eval.csv"))?)?;
    save_json(&manifest, &run.path("run_manifest.json"))?;
    for s in Setting::ALL {
        if let Some(avg) = report.average(s) {
            println!("{:<12} {avg:.2}", s.name());
        }
    }
    Ok(())
}

fn ablate_dim(run: &Run, dims: &[usize]) -> Result<()> {
    let data = generate_dataset(&run.cfg.dataset)?;
    let results = ablate_dims(&run.cfg, &data, dims)?;
    let mut w = csv::Writer::from_writer(create(&run.path("ablate_dim.csv"))?);
    w.write_record([
        "feat_dim",
        "source_only",
        "pft",
        "oracle",
        "trainable_params",
        "total_params",
        "flops_per_sample",
        "trainable_fraction",
        "published_reference_pft",
        "manifest_hash",
    ])?;
    for (r, report) in &results {
        w.write_record([
            r.feat_dim.to_string(),
            format!("{:.2}", r.source_only),
            format!("{:.2}", r.pft),
            format!("{:.2}", r.oracle),
            r.cost.trainable_params.to_string(),
            r.cost.total_params.to_string(),
            r.cost.flops_per_sample.to_string(),
            format!("{:.4}", r.trainable_fraction),
            r.reference_pft.map(|v| v.to_string()).unwrap_or_default(),
            report.manifest_hash.clone(),
        ])?;
        println!(
            "feat_dim {:>3}: source {:.2} pft {:.2} oracle {:.2} (published reference pft {})",
            r.feat_dim,
            r.source_only,
            r.pft,
            r.oracle,
            DIM_REFERENCE
                .iter()
                .find(|x| x.0 == r.feat_dim)
                .map(|x| x.1.to_string())
                .unwrap_or_else(|| "-".into())
        );
    }
    w.flush().map_err(|e| io_err(&run.path("ablate_dim.csv"), e))
}

fn ablate_pair(run: &Run, strategies: &[Strategy]) -> Result<()> {
    let data = generate_dataset(&run.cfg.dataset)?;
    let results = ablate_pairing(&run.cfg, &data, strategies)?;
    let path = run.path("ablate_pairing.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["strategy", "source_only", "pft", "oracle", "manifest_hash"])?;
    for (r, report) in &results {
        w.write_record([
            r.strategy.name().to_string(),
            format!("{:.2}", r.source_only),
            format!("{:.2}", r.pft),
            format!("{:.2}", r.oracle),
            report.manifest_hash.clone(),
        ])?;
        println!("{:<9} pft {:.2} (source {:.2})", r.strategy.name(), r.pft, r.source_only);
    }
    println!("{PAIRING_REFERENCE}");
    w.flush().map_err(|e| io_err(&path, e))
}

fn export_embeddings(run: &Run) -> Result<()> {
    let data = run.data()?;
    let hash = run.manifest(&data)?.short_hash().to_string();
    let model = run.source_model(&data)?;
    let personalized = run.personalized(&data)?;
    let views: Vec<SubjectView> = data
        .targets
        .iter()
        .zip(&personalized)
        .map(|(t, (_, ts))| SubjectView {
            samples: &t.test,
            translator: ts,
        })
        .collect();
    let (_, rows) = project_embeddings(&model, &views)?;
    write_embeddings_csv(&rows, &hash, create(&run.path("embeddings.csv"))?)?;
    for s in [Setting::SourceOnly, Setting::Pft] {
        if let Some(r) = mean_separation(&rows, s) {
            println!("{:<12} separation {r:.4}", s.name());
        }
    }
    Ok(())
}

fn report(run: &Run, inputs: &[PathBuf]) -> Result<()> {
    let default = [run.path("eval.csv")];
    let inputs = if inputs.is_empty() { &default[..] } else { inputs };
    let reports = inputs
        .iter()
        .map(|p| {
            let p = require_file(p, "eval")?;
            EvalReport::read_csv(BufReader::new(File::open(&p).map_err(|e| io_err(&p, e))?))
        })
        .collect::<Result<Vec<_>>>()?;
    let matrix = pft_core::pipeline::merge_reports(&reports)?;
    matrix.write_csv(create(&run.path("report.csv"))?)?;
    let mut text = Vec::new();
    matrix.write_csv(&mut text)?;
    print!("{}", String::from_utf8_lossy(&text));
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let run = Run::new(&cli.common)?;
    match &cli.command {
        Command::GenData => gen_data(&run),
        Command::TrainSource => train_source(&run),
        Command::PretrainTranslator => pretrain(&run),
        Command::Adapt => adapt(&run),
        Command::Eval => eval(&run),
        Command::AblateDim { dims } => ablate_dim(&run, dims),
        Command::AblatePairing { strategies } => ablate_pair(&run, strategies),
        Command::ExportEmbeddings => export_embeddings(&run),
        Command::Report { inputs } => report(&run, inputs),
    }
}

fn error_json(code: &str, message: String, context: serde_json::Value) -> String {
    serde_json::json!({ "code": code, "message": message, "context": context }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", error_json("usage", first.to_string(), serde_json::json!({})));
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut context = serde_json::json!({ "command": cli.command.name() });
            match &e {
                Error::Io { path, .. } => context["path"] = path.display().to_string().into(),
                Error::Dependency { path, produced_by } => {
                    context["path"] = path.display().to_string().into();
                    context["produced_by"] = produced_by.clone().into();
                }
                _ => {}
            }
            eprintln!("{}", error_json(e.code(), e.to_string(), context));
            ExitCode::FAILURE
        }
    }
}
