//! `hypersyn`: featurize drugs, train and cross-validate synergy models, run
//! grid searches, and evaluate checkpoints.
//!
//! Exit codes: 0 success, 1 data error, 2 usage error.

mod manifest;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hypersyn::datasets::{load_smiles, make_split, synth_dataset, DataPaths, Dataset, SplitMode, SplitPlan, SynthSpec};
use hypersyn::metrics::{evaluate, read_metric_csv, two_sample_t, write_metric_csv, MetricRow};
use hypersyn::molgraph::parse_smiles;
use hypersyn::synergy::{
    cross_validate, grid_search, training_propagation, Ablation, Checkpoint, Grid, ModelInputs, TrainConfig,
};
use hypersyn::{Error, Result};
use log::{error, info};
use sha2::{Digest, Sha256};

use manifest::{io_error, RunManifest};

#[derive(Parser)]
#[command(name = "hypersyn", version, about = "Hypergraph drug-synergy prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a drug_id<TAB>smiles file and write per-drug graph summaries.
    Featurize {
        #[arg(long)]
        smiles: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Five-fold cross-validation plus held-out test evaluation.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        ablate: Option<Ablation>,
    },
    /// Cross-validate every point of a grid and echo the best config.
    Gridsearch {
        #[command(flatten)]
        run: RunArgs,
        /// JSON object mapping config field to a list of values.
        #[arg(long)]
        grid: PathBuf,
    },
    /// Re-evaluate a checkpoint, or compare two metric CSVs.
    Eval {
        #[arg(long, required_unless_present = "compare", requires_all = ["data", "split"])]
        checkpoint: Option<PathBuf>,
        /// Data directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split plan exported by `train`.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Two metric CSVs; runs a Welch t-test per mode and metric.
        #[arg(long, num_args = 2, value_names = ["A", "B"], conflicts_with = "checkpoint")]
        compare: Option<Vec<PathBuf>>,
    },
    /// Write a synthetic dataset with a planted synergy rule.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SynthSpec::default().seed)]
        seed: u64,
        #[arg(long, default_value_t = SynthSpec::default().drugs)]
        drugs: usize,
        #[arg(long, default_value_t = SynthSpec::default().cells)]
        cells: usize,
        #[arg(long, default_value_t = SynthSpec::default().diseases)]
        diseases: usize,
        #[arg(long, default_value_t = SynthSpec::default().samples)]
        samples: usize,
        #[arg(long, default_value_t = SynthSpec::default().noise)]
        noise: f64,
    },
    /// Recompute the digests recorded in a run's manifest.
    Verify {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON file with TrainConfig fields; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding synergy.csv, smiles.tsv, expression.csv and
    /// optionally disease_embeddings.csv with drug_disease.tsv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "split")]
    mode: Option<SplitMode>,
    /// Reuse an exported split plan instead of drawing a new one.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Overrides the config seed; also seeds the split.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn read_json(path: &Path, what: &str) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{what} {}: {e}", path.display())))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut value = match path {
        Some(p) => read_json(p, "config")?,
        None => serde_json::json!({}),
    };
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
    if let Some(s) = seed {
        obj.insert("seed".into(), s.into());
    }
    if !obj.contains_key("seed") {
        return Err(Error::Config("no seed: pass --seed or set `seed` in the config".into()));
    }
    let config: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}

fn load_data(dir: &Path) -> Result<(DataPaths, Dataset)> {
    let paths = DataPaths::in_dir(dir);
    let data = Dataset::load(&paths)?;
    Ok((paths, data))
}

/// The plan given by `--split`, checked against the data, or a fresh one
/// stamped with the data digest.
fn split_for(run: &RunArgs, data: &Dataset, seed: u64) -> Result<SplitPlan> {
    let plan = match &run.split {
        Some(path) => {
            let plan = SplitPlan::load(path)?;
            check_split_digest(&plan, data, path)?;
            if run.mode.is_some_and(|m| m != plan.mode) {
                return Err(Error::Config(format!("{} is a {} split", path.display(), plan.mode)));
            }
            plan
        }
        None => {
            let mode = run.mode.expect("clap requires --mode without --split");
            let mut plan = make_split(&data.samples, mode, seed)?;
            plan.data_digest = data.digest.clone();
            plan
        }
    };
    Ok(plan)
}

fn check_split_digest(plan: &SplitPlan, data: &Dataset, path: &Path) -> Result<()> {
    if plan.data_digest != data.digest {
        return Err(Error::Integrity(format!(
            "split {} was made for data digest {}, data has {}",
            path.display(),
            plan.data_digest,
            data.digest
        )));
    }
    Ok(())
}

/// First 16 hex digits of SHA-256 over the little-endian feature values.
fn feature_checksum(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

fn featurize(smiles: &Path, out: &Path) -> Result<()> {
    let drugs = load_smiles(smiles)?;
    if drugs.is_empty() {
        return Err(Error::Data(format!("no drugs in {}", smiles.display())));
    }
    let mut table = String::from("drug\tatoms\tbonds\tfeature_checksum\n");
    let mut failures = Vec::new();
    for (id, s) in &drugs {
        match parse_smiles(s) {
            Ok(g) => {
                let features = g.featurize();
                let values: Vec<f64> = features.value().iter().copied().collect();
                table.push_str(&format!(
                    "{id}\t{}\t{}\t{}\n",
                    g.atoms.len(),
                    g.bonds.len(),
                    feature_checksum(&values)
                ));
            }
            Err(e) => failures.push(format!("{id}: {e}")),
        }
    }
    write_file(out, table.as_bytes())?;
    let parsed = drugs.len() - failures.len();
    eprintln!("parsed {parsed}/{} drugs", drugs.len());
    for f in &failures {
        eprintln!("  {f}");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "{} of {} drugs failed to parse",
            failures.len(),
            drugs.len()
        )))
    }
}

fn train(run: &RunArgs, ablate: Option<Ablation>) -> Result<()> {
    let mut config = load_config(run.config.as_deref(), run.seed)?;
    if let Some(a) = ablate {
        config = config.with_ablation(a);
    }
    let mut manifest = RunManifest::start("train", config.seed);
    let (paths, data) = load_data(&run.data)?;
    manifest.record_data(&paths)?;
    manifest.data_digest = Some(data.digest.clone());
    let mut config_value = serde_json::to_value(&config)?;
    config_value["ablation"] = serde_json::to_value(ablate)?;
    let plan = split_for(run, &data, config.seed)?;
    config_value["split_mode"] = plan.mode.name().into();
    config_value["split_seed"] = plan.seed.into();
    config_value["effective_interaction_weight"] = config.effective_interaction_weight().into();
    manifest.config = Some(config_value);

    let cv = cross_validate(&data, &plan, &config, run.jobs)?;

    create_dir(&run.out)?;
    let mut outputs = vec!["config.json".to_string(), "split.json".into(), "metrics.csv".into()];
    write_json(&run.out.join("config.json"), &config)?;
    plan.save(&run.out.join("split.json"))?;
    let rows = cv.metric_rows(plan.mode.name());
    let mut csv = Vec::new();
    write_metric_csv(&mut csv, &rows)?;
    write_file(&run.out.join("metrics.csv"), &csv)?;
    for f in &cv.folds {
        let name = format!("reports/fold_{}.json", f.fold);
        write_json(&run.out.join(&name), &f.trained.report)?;
        outputs.push(name);
    }
    Checkpoint::new(&data, &cv.best().trained.model, cv.best_fold).save(&run.out.join("checkpoint.bin"))?;
    outputs.push("checkpoint.bin".into());
    manifest.finish(&run.out, &outputs)?;

    std::io::stdout()
        .write_all(&csv)
        .map_err(|e| io_error(Path::new("<stdout>"), e))?;
    info!(
        "mean validation auroc {:.4}; best fold {}; outputs in {}",
        cv.mean_validation_auroc(),
        cv.best_fold,
        run.out.display()
    );
    Ok(())
}

fn gridsearch(run: &RunArgs, grid_path: &Path) -> Result<()> {
    let base = load_config(run.config.as_deref(), run.seed)?;
    let grid: Grid =
        serde_json::from_value(read_json(grid_path, "grid")?).map_err(|e| Error::Config(format!("grid: {e}")))?;
    let mut manifest = RunManifest::start("gridsearch", base.seed);
    let (paths, data) = load_data(&run.data)?;
    manifest.record_data(&paths)?;
    manifest.data_digest = Some(data.digest.clone());
    let plan = split_for(run, &data, base.seed)?;
    manifest.config = Some(serde_json::json!({
        "base": base,
        "grid": grid,
        "split_mode": plan.mode.name(),
        "split_seed": plan.seed,
    }));

    let result = grid_search(&data, &plan, &base, &grid, run.jobs)?;

    create_dir(&run.out)?;
    let fields: Vec<&String> = grid.keys().collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = vec!["index".into(), "seed".into()];
    header.extend(fields.iter().map(|f| f.to_string()));
    header.extend((0..plan.folds.len()).map(|k| format!("fold_{k}")));
    header.extend(["mean_auroc".into(), "best".into()]);
    let csv_error = |e: csv::Error| Error::Data(format!("grid table: {e}"));
    w.write_record(&header).map_err(csv_error)?;
    for (i, row) in result.rows.iter().enumerate() {
        let cfg = serde_json::to_value(&row.config)?;
        let mut rec = vec![i.to_string(), row.config.seed.to_string()];
        rec.extend(fields.iter().map(|f| cfg[f.as_str()].to_string()));
        rec.extend(row.fold_aurocs.iter().map(|a| a.to_string()));
        rec.push(row.mean_auroc.to_string());
        rec.push(((i == result.best) as u8).to_string());
        w.write_record(&rec).map_err(csv_error)?;
    }
    let table = w.into_inner().map_err(|e| Error::Data(format!("grid table: {e}")))?;
    write_file(&run.out.join("grid.csv"), &table)?;
    write_json(&run.out.join("grid.json"), &result)?;
    write_json(&run.out.join("best_config.json"), result.best_config())?;
    plan.save(&run.out.join("split.json"))?;
    manifest.finish(
        &run.out,
        &["grid.csv", "grid.json", "best_config.json", "split.json"].map(String::from),
    )?;
    std::io::stdout()
        .write_all(&table)
        .map_err(|e| io_error(Path::new("<stdout>"), e))?;
    info!(
        "best grid point {} with mean validation auroc {:.4}",
        result.best, result.rows[result.best].mean_auroc
    );
    Ok(())
}

fn eval_checkpoint(checkpoint: &Path, data_dir: &Path, split: &Path) -> Result<()> {
    let (_, data) = load_data(data_dir)?;
    let plan = SplitPlan::load(split)?;
    check_split_digest(&plan, &data, split)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let h = &ckpt.header;
    if h.data_digest != data.digest {
        return Err(Error::Integrity(format!(
            "checkpoint {} was trained on data digest {}, data has {}",
            checkpoint.display(),
            h.data_digest,
            data.digest
        )));
    }
    if h.fold >= plan.folds.len() {
        return Err(Error::Integrity(format!("checkpoint fold {} not in split", h.fold)));
    }
    let inputs = ModelInputs::from_dataset(&data)?;
    let (train_set, val_set, test_set) = plan.tagged(&data.samples, h.fold);
    let propagation = training_propagation(&data, &train_set, &h.config)?;
    let (set, samples) = if test_set.is_empty() {
        ("validation", val_set)
    } else {
        ("test", test_set)
    };
    let scores = ckpt.model.predict(&inputs, &propagation, &samples)?;
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let result = evaluate(&scores, &labels)?;
    let mut csv = Vec::new();
    let fold = if set == "test" {
        "test".to_string()
    } else {
        h.fold.to_string()
    };
    write_metric_csv(&mut csv, &[MetricRow::new(plan.mode.name(), fold, &result)])?;
    std::io::stdout()
        .write_all(&csv)
        .map_err(|e| io_error(Path::new("<stdout>"), e))?;
    info!("{set} set of fold {}: {} samples", h.fold, samples.len());
    Ok(())
}

type MetricField = (&'static str, fn(&MetricRow) -> f64);

const METRICS: [MetricField; 3] = [("auroc", |r| r.auroc), ("auprc", |r| r.auprc), ("f1", |r| r.f1)];

fn compare(a: &Path, b: &Path) -> Result<()> {
    let group = |rows: Vec<MetricRow>| {
        let mut by_mode: BTreeMap<String, Vec<MetricRow>> = BTreeMap::new();
        for r in rows.into_iter().filter(|r| r.fold != "test") {
            by_mode.entry(r.mode.clone()).or_default().push(r);
        }
        by_mode
    };
    let (ra, rb) = (group(read_metric_csv(a)?), group(read_metric_csv(b)?));
    let mut out = String::from("mode,metric,mean_a,mean_b,t,df,p\n");
    let mut compared = 0;
    for (mode, xs) in &ra {
        let Some(ys) = rb.get(mode) else { continue };
        for (name, get) in METRICS {
            let x: Vec<f64> = xs.iter().map(get).collect();
            let y: Vec<f64> = ys.iter().map(get).collect();
            let t = two_sample_t(&x, &y)?;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            out.push_str(&format!(
                "{mode},{name},{},{},{},{},{}\n",
                mean(&x),
                mean(&y),
                t.t,
                t.df,
                t.p
            ));
            compared += 1;
        }
    }
    if compared == 0 {
        return Err(Error::Data("the two metric files share no split mode".into()));
    }
    print!("{out}");
    Ok(())
}

fn synth(out: &Path, spec: SynthSpec) -> Result<()> {
    let mut manifest = RunManifest::start("synth", spec.seed);
    manifest.config = Some(serde_json::to_value(&spec)?);
    let data = synth_dataset(&spec)?;
    create_dir(out)?;
    let paths = data.write(out)?;
    let outputs: Vec<String> = paths
        .files()
        .iter()
        .map(|(_, p)| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    manifest.finish(out, &outputs)?;
    info!(
        "wrote {} samples ({} label flips) to {}",
        data.synergy.len(),
        data.flips,
        out.display()
    );
    Ok(())
}

fn verify(run: &Path) -> Result<()> {
    let manifest = RunManifest::load(run)?;
    let n = manifest.verify(run)?;
    println!("{n} files match {}", run.join(manifest::MANIFEST_FILE).display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Featurize { smiles, out } => featurize(&smiles, &out),
        Command::Train { run, ablate } => train(&run, ablate),
        Command::Gridsearch { run, grid } => gridsearch(&run, &grid),
        Command::Eval {
            checkpoint,
            data,
            split,
            compare: pair,
        } => match (pair, checkpoint, data, split) {
            (Some(p), ..) => compare(&p[0], &p[1]),
            (None, Some(c), Some(d), Some(s)) => eval_checkpoint(&c, &d, &s),
            _ => Err(Error::Config(
                "eval needs --checkpoint, --data and --split, or --compare".into(),
            )),
        },
        Command::Synth {
            out,
            seed,
            drugs,
            cells,
            diseases,
            samples,
            noise,
        } => synth(
            &out,
            SynthSpec {
                seed,
                drugs,
                cells,
                diseases,
                samples,
                noise,
                ..SynthSpec::default()
            },
        ),
        Command::Verify { run } => verify(&run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(if e.is_data_error() { 1 } else { 2 })
        }
    }
}
