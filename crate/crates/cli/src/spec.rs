//! Flat `key = value` experiment files.
//!
//! Every key is optional. Training keys mirror `TrainConfig` field names,
//! with the augmentation settings lifted to the top level. The dataset comes
//! either from `data_path` (a CSV file) or from the generator keys, never both.

use std::path::{Path, PathBuf};

use openmatch_core::config::{ConsistencyHead, LrSchedule};
use openmatch_core::{AugmentConfig, Error, GenConfig, Result, TrainConfig};
use serde::{Deserialize, Serialize};

pub const DEFAULT_HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecFile {
    // training
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_em: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_oc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_fm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_fix: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_schedule: Option<LrSchedule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistency_head: Option<ConsistencyHead>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weak_noise_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strong_noise_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strong_mask_prob: Option<f64>,

    // ablation toggles
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disable_socr: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disable_em: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disable_fixmatch: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub socr_on_closed_head: Option<bool>,

    // dataset
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_path: Option<PathBuf>,
    /// Generator seed; defaults to `seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seen_outlier_clusters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unseen_outlier_clusters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels_per_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unlabeled_per_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unlabeled_per_outlier_cluster: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_per_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_per_outlier_cluster: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_range: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_center_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outlier_candidates: Option<usize>,

    // output
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub histogram_bins: Option<usize>,
}

impl SpecFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn has_generator_keys(&self) -> bool {
        self.data_seed.is_some()
            || self.num_classes.is_some()
            || self.seen_outlier_clusters.is_some()
            || self.unseen_outlier_clusters.is_some()
            || self.dim.is_some()
            || self.labels_per_class.is_some()
            || self.unlabeled_per_class.is_some()
            || self.unlabeled_per_outlier_cluster.is_some()
            || self.test_per_class.is_some()
            || self.test_per_outlier_cluster.is_some()
            || self.cluster_sigma.is_some()
            || self.center_range.is_some()
            || self.min_center_distance.is_some()
            || self.outlier_candidates.is_some()
    }

    /// Fills every default and checks the result.
    pub fn resolve(&self) -> Result<ExperimentSpec> {
        let d = TrainConfig::default();
        let da = AugmentConfig::default();
        let train = TrainConfig {
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            mu: self.mu.unwrap_or(d.mu),
            lambda_em: self.lambda_em.unwrap_or(d.lambda_em),
            lambda_oc: self.lambda_oc.unwrap_or(d.lambda_oc),
            lambda_fm: self.lambda_fm.unwrap_or(d.lambda_fm),
            tau: self.tau.unwrap_or(d.tau),
            e_fix: self.e_fix.unwrap_or(d.e_fix),
            e_max: self.e_max.unwrap_or(d.e_max),
            i_max: self.i_max.unwrap_or(d.i_max),
            lr: self.lr.unwrap_or(d.lr),
            momentum: self.momentum.unwrap_or(d.momentum),
            lr_schedule: self.lr_schedule.unwrap_or(d.lr_schedule),
            seed: self.seed.unwrap_or(d.seed),
            hidden: self.hidden.clone().unwrap_or(d.hidden),
            consistency_head: self.consistency_head.unwrap_or(d.consistency_head),
            eval_every: self.eval_every.unwrap_or(d.eval_every),
            augment: AugmentConfig {
                weak_noise_sigma: self.weak_noise_sigma.unwrap_or(da.weak_noise_sigma),
                strong_noise_sigma: self.strong_noise_sigma.unwrap_or(da.strong_noise_sigma),
                strong_mask_prob: self.strong_mask_prob.unwrap_or(da.strong_mask_prob),
            },
        };
        let source = match &self.data_path {
            Some(path) => {
                if self.has_generator_keys() {
                    return Err(Error::Config(
                        "data_path cannot be combined with generator keys".into(),
                    ));
                }
                DataSource::Csv(path.clone())
            }
            None => {
                let g = GenConfig::default();
                DataSource::Generate {
                    config: GenConfig {
                        num_classes: self.num_classes.unwrap_or(g.num_classes),
                        seen_outlier_clusters: self.seen_outlier_clusters.unwrap_or(g.seen_outlier_clusters),
                        unseen_outlier_clusters: self.unseen_outlier_clusters.unwrap_or(g.unseen_outlier_clusters),
                        dim: self.dim.unwrap_or(g.dim),
                        labels_per_class: self.labels_per_class.unwrap_or(g.labels_per_class),
                        unlabeled_per_class: self.unlabeled_per_class.unwrap_or(g.unlabeled_per_class),
                        unlabeled_per_outlier_cluster: self
                            .unlabeled_per_outlier_cluster
                            .unwrap_or(g.unlabeled_per_outlier_cluster),
                        test_per_class: self.test_per_class.unwrap_or(g.test_per_class),
                        test_per_outlier_cluster: self.test_per_outlier_cluster.unwrap_or(g.test_per_outlier_cluster),
                        cluster_sigma: self.cluster_sigma.unwrap_or(g.cluster_sigma),
                        center_range: self.center_range.unwrap_or(g.center_range),
                        min_center_distance: self.min_center_distance.unwrap_or(g.min_center_distance),
                        outlier_candidates: self.outlier_candidates.unwrap_or(g.outlier_candidates),
                    },
                    seed: self.data_seed.unwrap_or(train.seed),
                }
            }
        };
        let spec = ExperimentSpec {
            train,
            source,
            toggles: Toggles {
                disable_socr: self.disable_socr.unwrap_or(false),
                disable_em: self.disable_em.unwrap_or(false),
                disable_fixmatch: self.disable_fixmatch.unwrap_or(false),
                socr_on_closed_head: self.socr_on_closed_head.unwrap_or(false),
            },
            out_dir: self.out_dir.clone(),
            histogram_bins: self.histogram_bins.unwrap_or(DEFAULT_HISTOGRAM_BINS),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Toggles {
    /// Forces `lambda_oc` to 0.
    pub disable_socr: bool,
    /// Forces `lambda_em` to 0.
    pub disable_em: bool,
    /// Forces `lambda_fm` to 0.
    pub disable_fixmatch: bool,
    /// Consistency term on the closed-set head instead of the one-vs-all head.
    pub socr_on_closed_head: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Generate { config: GenConfig, seed: u64 },
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    /// As written, before toggles are applied.
    pub train: TrainConfig,
    pub source: DataSource,
    pub toggles: Toggles,
    pub out_dir: Option<PathBuf>,
    pub histogram_bins: usize,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let DataSource::Generate { config, .. } = &self.source {
            config.validate()?;
        }
        if self.histogram_bins < 2 {
            return Err(Error::Config("histogram_bins must be >= 2".into()));
        }
        Ok(())
    }

    /// Overrides the training seed. A generator seed that was only
    /// defaulted from the old training seed follows it.
    pub fn with_seed(mut self, seed: u64, data_seed_explicit: bool) -> Self {
        self.train.seed = seed;
        if let DataSource::Generate { seed: s, .. } = &mut self.source {
            if !data_seed_explicit {
                *s = seed;
            }
        }
        self
    }

    /// The configuration actually handed to the trainer.
    pub fn effective_train_config(&self) -> TrainConfig {
        let mut c = self.train.clone();
        if self.toggles.disable_socr {
            c.lambda_oc = 0.0;
        }
        if self.toggles.disable_em {
            c.lambda_em = 0.0;
        }
        if self.toggles.disable_fixmatch {
            c.lambda_fm = 0.0;
        }
        if self.toggles.socr_on_closed_head {
            c.consistency_head = ConsistencyHead::Closed;
        }
        c
    }

    /// Every key written out explicitly; parsing it resolves to `self`.
    pub fn to_file(&self) -> SpecFile {
        let t = &self.train;
        let mut f = SpecFile {
            batch_size: Some(t.batch_size),
            mu: Some(t.mu),
            lambda_em: Some(t.lambda_em),
            lambda_oc: Some(t.lambda_oc),
            lambda_fm: Some(t.lambda_fm),
            tau: Some(t.tau),
            e_fix: Some(t.e_fix),
            e_max: Some(t.e_max),
            i_max: Some(t.i_max),
            lr: Some(t.lr),
            momentum: Some(t.momentum),
            lr_schedule: Some(t.lr_schedule),
            seed: Some(t.seed),
            hidden: Some(t.hidden.clone()),
            consistency_head: Some(t.consistency_head),
            eval_every: Some(t.eval_every),
            weak_noise_sigma: Some(t.augment.weak_noise_sigma),
            strong_noise_sigma: Some(t.augment.strong_noise_sigma),
            strong_mask_prob: Some(t.augment.strong_mask_prob),
            disable_socr: Some(self.toggles.disable_socr),
            disable_em: Some(self.toggles.disable_em),
            disable_fixmatch: Some(self.toggles.disable_fixmatch),
            socr_on_closed_head: Some(self.toggles.socr_on_closed_head),
            out_dir: self.out_dir.clone(),
            histogram_bins: Some(self.histogram_bins),
            ..SpecFile::default()
        };
        match &self.source {
            DataSource::Csv(path) => f.data_path = Some(path.clone()),
            DataSource::Generate { config: g, seed } => {
                f.data_seed = Some(*seed);
                f.num_classes = Some(g.num_classes);
                f.seen_outlier_clusters = Some(g.seen_outlier_clusters);
                f.unseen_outlier_clusters = Some(g.unseen_outlier_clusters);
                f.dim = Some(g.dim);
                f.labels_per_class = Some(g.labels_per_class);
                f.unlabeled_per_class = Some(g.unlabeled_per_class);
                f.unlabeled_per_outlier_cluster = Some(g.unlabeled_per_outlier_cluster);
                f.test_per_class = Some(g.test_per_class);
                f.test_per_outlier_cluster = Some(g.test_per_outlier_cluster);
                f.cluster_sigma = Some(g.cluster_sigma);
                f.center_range = Some(g.center_range);
                f.min_center_distance = Some(g.min_center_distance);
                f.outlier_candidates = Some(g.outlier_candidates);
            }
        }
        f
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.to_file()).map_err(|e| Error::Config(e.to_string()))
    }
}
