use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use lvqa_core::data::{class_stats, generate_dataset, load_split, read_manifest, stats_csv, Sample, Split};
use lvqa_core::evaluation::{
    aggregate_seeds, comparison_csv, comparison_markdown, evaluate, export_attention, per_object_markdown,
    report_markdown, EvalReport, SeedAggregate,
};
use lvqa_core::model::{Variant, VqaModel, CONFIG_FILE};
use lvqa_core::training::{train, training_vocabulary};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Env(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Env(format!("{}: {e}", path.display())))
}

fn json<T: Serialize>(value: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(value).map_err(lvqa_core::Error::from)? + "\n")
}

pub fn seed_dir(runs: &Path, name: &str, seed: u64) -> PathBuf {
    runs.join(name).join(format!("seed{seed}"))
}

/// Number of records written per split.
#[derive(Debug, Serialize)]
pub struct GenSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub fn gen_data(config: &RunConfig, out: &Path, seed: u64) -> CliResult<GenSummary> {
    let ds = generate_dataset(&config.data, seed)?;
    fs::create_dir_all(out).map_err(|e| CliError::Env(format!("{}: {e}", out.display())))?;
    ds.write(out)?;
    let count = |s| ds.split(s).len();
    Ok(GenSummary {
        train: count(Split::Train),
        val: count(Split::Val),
        test: count(Split::Test),
    })
}

pub struct TrainRequest<'a> {
    pub config: &'a RunConfig,
    pub data: &'a Path,
    pub runs: &'a Path,
    /// Run name; seed directories go to `runs/<name>/seed<k>`.
    pub name: &'a str,
    pub seeds: &'a [u64],
    pub force: bool,
    pub jobs: usize,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    seed: u64,
    data: String,
    best_epoch: Option<usize>,
    config: &'a RunConfig,
}

/// Trains one model per seed. Seeds are independent, so `jobs > 1` runs
/// them on separate threads without changing any output.
pub fn train_runs(req: &TrainRequest) -> CliResult<Vec<PathBuf>> {
    if req.seeds.is_empty() {
        return Err(CliError::Usage("no seeds given".into()));
    }
    let dirs: Vec<PathBuf> = req.seeds.iter().map(|&s| seed_dir(req.runs, req.name, s)).collect();
    for dir in &dirs {
        if dir.exists() && !req.force {
            return Err(CliError::Env(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    let train_set = load_split(req.data, Split::Train)?;
    let val_set = load_split(req.data, Split::Val)?;
    let mut config = req.config.clone();
    let size = train_set.first().map_or(0, |s| s.image.shape()[1]);
    if size != config.model.image_size {
        return Err(CliError::Usage(format!(
            "model.image_size {} does not match the {size} px dataset",
            config.model.image_size
        )));
    }
    let vocab = training_vocabulary(&train_set, config.model.grid_n)?;
    config.model.vocab_size = vocab.len();
    config.train.validate()?;

    let run_one = |k: usize| -> CliResult<()> {
        let seed = req.seeds[k];
        let dir = &dirs[k];
        let model = VqaModel::init(&config.model, seed)?;
        let out = train(model, &vocab, &train_set, &val_set, &config.train, seed, |_| {})?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| CliError::Env(format!("{}: {e}", dir.display())))?;
        }
        fs::create_dir_all(dir).map_err(|e| CliError::Env(format!("{}: {e}", dir.display())))?;
        out.model.save(dir, &vocab)?;
        write(&dir.join(HISTORY_FILE), out.history.to_jsonl()?)?;
        let record = RunRecord {
            seed,
            data: req.data.display().to_string(),
            best_epoch: out.history.best_epoch,
            config: &config,
        };
        write(&dir.join(RUN_FILE), json(&record)?)?;
        let best = out.history.best_epoch.map(|e| out.history.epochs[e].val_metric);
        log::info!(
            "{} seed {seed}: {} epochs, best {:?} (val metric {:.4})",
            req.name,
            out.history.epochs.len(),
            out.history.best_epoch,
            best.unwrap_or(f64::NAN)
        );
        Ok(())
    };

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<()>>>> = Mutex::new((0..dirs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..req.jobs.clamp(1, dirs.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= dirs.len() {
                    break;
                }
                let r = run_one(k);
                results.lock().expect("poisoned")[k] = Some(r);
            });
        }
    });
    for r in results.into_inner().expect("poisoned") {
        r.expect("every seed ran")?;
    }
    Ok(dirs)
}

fn load_run(run: &Path) -> CliResult<(VqaModel, lvqa_core::encoders::Vocabulary)> {
    if !run.join(CONFIG_FILE).exists() {
        return Err(CliError::Env(format!("{}: no checkpoint", run.display())));
    }
    Ok(VqaModel::load(run)?)
}

fn evaluate_into(run: &Path, samples: &[Sample], out: &Path) -> CliResult<EvalReport> {
    let (model, vocab) = load_run(run)?;
    let (report, scored) = evaluate(&model, &vocab, samples)?;
    let mut lines = String::new();
    for s in &scored {
        lines.push_str(&serde_json::to_string(s).map_err(lvqa_core::Error::from)?);
        lines.push('\n');
    }
    write(&out.join(PREDICTIONS_FILE), lines)?;
    write(&out.join(REPORT_JSON), json(&report)?)?;
    write(&out.join(REPORT_MD), report_markdown(&report))?;
    Ok(report)
}

/// Evaluates one run on a split; writes the report next to the checkpoint
/// unless `out` is given.
pub fn eval_run(run: &Path, data: &Path, split: Split, out: Option<&Path>) -> CliResult<EvalReport> {
    let samples = load_split(data, split)?;
    evaluate_into(run, &samples, out.unwrap_or(run))
}

#[derive(Serialize)]
struct ComparisonRow<'a> {
    variant: Variant,
    aggregate: &'a SeedAggregate,
    runs: &'a [EvalReport],
}

#[derive(Serialize)]
struct Comparison<'a> {
    split: Split,
    seeds: &'a [u64],
    rows: Vec<ComparisonRow<'a>>,
}

/// Evaluates every `(variant, seed)` run under `runs/<variant>/seed<k>` and
/// aggregates over seeds. Fails listing every missing checkpoint.
pub fn compare(
    data: &Path,
    runs: &Path,
    variants: &[Variant],
    seeds: &[u64],
    out: &Path,
) -> CliResult<BTreeMap<Variant, SeedAggregate>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(CliError::Usage("compare needs at least one variant and one seed".into()));
    }
    let missing: Vec<String> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| seed_dir(runs, v.as_str(), s)))
        .filter(|d| !d.join(CONFIG_FILE).exists())
        .map(|d| d.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Env(format!("missing checkpoints: {}", missing.join(", "))));
    }
    let samples = load_split(data, Split::Test)?;
    let mut reports: BTreeMap<Variant, Vec<EvalReport>> = BTreeMap::new();
    for &v in variants {
        for &s in seeds {
            let dir = seed_dir(runs, v.as_str(), s);
            let report = evaluate_into(&dir, &samples, &dir)?;
            reports.entry(v).or_default().push(report);
        }
    }
    let mut rows = BTreeMap::new();
    for (v, rs) in &reports {
        rows.insert(*v, aggregate_seeds(rs)?);
    }
    let doc = Comparison {
        split: Split::Test,
        seeds,
        rows: rows
            .iter()
            .map(|(v, a)| ComparisonRow {
                variant: *v,
                aggregate: a,
                runs: &reports[v],
            })
            .collect(),
    };
    write(&out.join(REPORT_JSON), json(&doc)?)?;
    let md = format!(
        "## Test metrics, mean ± std over {} seed(s)\n\n{}\n## AUC per object class\n\n{}",
        seeds.len(),
        comparison_markdown(&rows),
        per_object_markdown(&rows)
    );
    write(&out.join(REPORT_MD), md)?;
    write(&out.join(REPORT_CSV), comparison_csv(&rows))?;
    Ok(rows)
}

/// Attention heatmaps of one split sample, named `<split>_<index>_g<k>`.
pub fn attn_export(run: &Path, data: &Path, split: Split, index: usize, out: &Path) -> CliResult<Vec<PathBuf>> {
    let (model, vocab) = load_run(run)?;
    let samples = load_split(data, split)?;
    let s = samples.get(index).ok_or_else(|| {
        CliError::Usage(format!("index {index} out of range ({} {split} samples)", samples.len()))
    })?;
    let pred = model.predict(&vocab, &s.image, &s.record.question, &s.mask)?;
    fs::create_dir_all(out).map_err(|e| CliError::Env(format!("{}: {e}", out.display())))?;
    Ok(export_attention(
        &pred.attention,
        &s.image,
        &s.mask,
        out,
        &format!("{split}_{index}"),
    )?)
}

/// Per-class yes/no counts of every manifest in `data`, as CSV.
pub fn stats(data: &Path) -> CliResult<String> {
    let mut records = Vec::new();
    for split in Split::ALL {
        records.extend(read_manifest(&data.join(split.manifest_file()))?);
    }
    Ok(stats_csv(&class_stats(&records)))
}
