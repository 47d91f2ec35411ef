use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use openmatch_core::data::{load_csv, save_csv};
use openmatch_core::eval::{evaluate, export_histogram, format_metrics, score_samples, EvalReport};
use openmatch_core::model::{load_checkpoint, save_checkpoint};
use openmatch_core::{gen_synthetic, train as run_training, Dataset, Error, Result, TrainHistory};

use crate::spec::{DataSource, ExperimentSpec};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.txt";
pub const RESOLVED_FILE: &str = "resolved.toml";
pub const DATASET_FILE: &str = "dataset.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

pub fn load_dataset(spec: &ExperimentSpec) -> Result<Dataset> {
    match &spec.source {
        DataSource::Csv(path) => load_csv(path),
        DataSource::Generate { config, seed } => gen_synthetic(config, *seed),
    }
}

/// Output directory from the command line, else from the spec.
pub fn resolve_out_dir(flag: Option<&Path>, spec: &ExperimentSpec) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| spec.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))
}

pub fn gen_data(spec: &ExperimentSpec, out: &Path) -> Result<Dataset> {
    let DataSource::Generate { config, seed } = &spec.source else {
        return Err(Error::Config("gen-data needs generator settings, not data_path".into()));
    };
    let dataset = gen_synthetic(config, *seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_csv(&dataset, out)?;
    Ok(dataset)
}

pub fn split_sizes(d: &Dataset) -> String {
    format!(
        "labeled={} unlabeled={} test={} classes={} dim={}",
        d.labeled().len(),
        d.unlabeled_len(),
        d.test().len(),
        d.num_classes(),
        d.dim()
    )
}

fn test_scores(history_params: &openmatch_core::ModelParams, d: &Dataset) -> Result<Vec<(f64, bool)>> {
    Ok(score_samples(history_params, d.test())?
        .into_iter()
        .map(|s| (s.anomaly_score, s.is_outlier_truth))
        .collect())
}

/// Trains and writes the checkpoint, metrics, resolved spec, dataset and
/// test-score histogram into `out`.
pub fn train(spec: &ExperimentSpec, out: &Path) -> Result<TrainHistory> {
    let dataset = load_dataset(spec)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_FILE), spec.to_toml()?)?;
    save_csv(&dataset, &out.join(DATASET_FILE))?;

    let config = spec.effective_train_config();
    let history = run_training(&dataset, &config)?;

    fs::write(out.join(METRICS_FILE), format_metrics(&history.records))?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &history.params, &config)?;
    if !dataset.test().is_empty() {
        let scores = test_scores(&history.params, &dataset)?;
        export_histogram(&scores, spec.histogram_bins, &out.join(HISTOGRAM_FILE))?;
    }
    Ok(history)
}

/// Scores the test split of `data` with a saved model.
pub fn eval(checkpoint: &Path, data: &Path, out: &Path, bins: usize) -> Result<EvalReport> {
    let (params, _) = load_checkpoint(checkpoint)?;
    let dataset = load_csv(data)?;
    if params.input_dim() != dataset.dim() || params.num_classes() != dataset.num_classes() {
        return Err(Error::Validation(format!(
            "checkpoint expects {}-d inputs and {} classes, dataset has {}-d inputs and {} classes",
            params.input_dim(),
            params.num_classes(),
            dataset.dim(),
            dataset.num_classes()
        )));
    }
    let report = evaluate(&params, dataset.test())?;
    fs::create_dir_all(out)?;
    fs::write(out.join(METRICS_FILE), report.to_line() + "\n")?;
    export_histogram(&test_scores(&params, &dataset)?, bins, &out.join(HISTOGRAM_FILE))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub seed: u64,
    pub lambda_oc: f64,
    pub report: EvalReport,
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seed,lambda_oc,auroc_seen,auroc_unseen,err_inlier\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |a| a.to_string());
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.variant,
            r.seed,
            r.lambda_oc,
            opt(r.report.auroc_seen),
            opt(r.report.auroc_unseen),
            r.report.err_inlier
        );
    }
    s
}

/// Trains with and without the consistency term, FixMatch off in both, and
/// writes a two-row comparison. `disable_socr` and `disable_fixmatch` in the
/// spec are ignored; the other toggles apply to both variants.
pub fn ablate(spec: &ExperimentSpec, out: &Path) -> Result<Vec<AblationRow>> {
    let dataset = load_dataset(spec)?;
    let mut base = spec.effective_train_config();
    base.lambda_fm = 0.0;
    base.lambda_oc = spec.train.lambda_oc;
    if base.lambda_oc <= 0.0 {
        return Err(Error::Config("ablation needs lambda_oc > 0".into()));
    }
    let mut without = base.clone();
    without.lambda_oc = 0.0;

    let run = |config: &openmatch_core::TrainConfig, variant: &'static str| -> Result<AblationRow> {
        let history = run_training(&dataset, config)?;
        Ok(AblationRow {
            variant,
            seed: config.seed,
            lambda_oc: config.lambda_oc,
            report: evaluate(&history.params, dataset.test())?,
        })
    };
    let (with_row, without_row) = thread::scope(|s| {
        let h = s.spawn(|| run(&without, "without_socr"));
        let with_row = run(&base, "with_socr");
        let without_row = h.join().expect("ablation worker panicked");
        (with_row, without_row)
    });
    let rows = vec![with_row?, without_row?];
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_FILE), spec.to_toml()?)?;
    fs::write(out.join(ABLATION_FILE), format_ablation(&rows))?;
    Ok(rows)
}
