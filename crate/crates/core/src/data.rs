//! Synthetic open-set datasets, augmentations, batch sampling and CSV I/O.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Ground truth for an unlabeled or test sample. Only evaluation reads it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Inlier(usize),
    SeenOutlier,
    UnseenOutlier,
}

impl Tag {
    pub fn is_outlier(self) -> bool {
        !matches!(self, Tag::Inlier(_))
    }

    pub fn class(self) -> Option<usize> {
        match self {
            Tag::Inlier(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedSample {
    pub x: Vec<f64>,
    pub tag: Tag,
}

/// Labeled, unlabeled and test splits over `num_classes` known classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_classes: usize,
    dim: usize,
    labeled: Vec<LabeledSample>,
    unlabeled: Vec<TaggedSample>,
    test: Vec<TaggedSample>,
}

impl Dataset {
    /// Validates the split invariants and builds the dataset.
    pub fn new(
        num_classes: usize,
        dim: usize,
        labeled: Vec<LabeledSample>,
        unlabeled: Vec<TaggedSample>,
        test: Vec<TaggedSample>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Validation("dataset needs at least one class".into()));
        }
        let mut seen = vec![false; num_classes];
        for s in &labeled {
            if s.label >= num_classes {
                return Err(Error::Validation(format!(
                    "label {} out of range for {num_classes} classes",
                    s.label
                )));
            }
            seen[s.label] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!("class {c} has no labeled sample")));
        }
        for s in unlabeled.iter().chain(&test) {
            if let Tag::Inlier(c) = s.tag {
                if c >= num_classes {
                    return Err(Error::Validation(format!(
                        "inlier class {c} out of range for {num_classes} classes"
                    )));
                }
            }
        }
        if unlabeled.iter().any(|s| s.tag == Tag::UnseenOutlier) {
            return Err(Error::Validation(
                "unseen outliers may only appear in the test split".into(),
            ));
        }
        let lengths = labeled
            .iter()
            .map(|s| s.x.len())
            .chain(unlabeled.iter().chain(&test).map(|s| s.x.len()));
        for len in lengths {
            if len != dim {
                return Err(Error::shape("dataset", &[dim], &[len]));
            }
        }
        Ok(Dataset {
            num_classes,
            dim,
            labeled,
            unlabeled,
            test,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labeled(&self) -> &[LabeledSample] {
        &self.labeled
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.len()
    }

    /// Unlabeled feature vectors without their tags; what training sees.
    pub fn unlabeled_inputs(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.unlabeled.iter().map(|s| s.x.as_slice())
    }

    /// Unlabeled samples with ground truth, for evaluation only.
    pub fn unlabeled_with_tags(&self) -> &[TaggedSample] {
        &self.unlabeled
    }

    pub fn test(&self) -> &[TaggedSample] {
        &self.test
    }

    /// Unlabeled features stacked into a `[N_u, dim]` matrix.
    pub fn unlabeled_matrix(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.unlabeled_inputs().collect();
        Tensor::from_rows(&rows, self.dim).expect("validated dims")
    }
}

/// Gaussian-cluster generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_classes: usize,
    pub seen_outlier_clusters: usize,
    pub unseen_outlier_clusters: usize,
    pub dim: usize,
    pub labels_per_class: usize,
    pub unlabeled_per_class: usize,
    pub unlabeled_per_outlier_cluster: usize,
    pub test_per_class: usize,
    pub test_per_outlier_cluster: usize,
    /// Per-coordinate standard deviation of every cluster.
    pub cluster_sigma: f64,
    /// Inlier centers are drawn uniformly from `[-center_range, center_range]^dim`.
    pub center_range: f64,
    /// Minimum distance between two inlier centers.
    pub min_center_distance: f64,
    /// Outlier centers are random convex combinations of the inlier centers:
    /// each one is the candidate farthest from every center placed so far,
    /// out of this many draws.
    pub outlier_candidates: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_classes: 4,
            seen_outlier_clusters: 2,
            unseen_outlier_clusters: 1,
            dim: 8,
            labels_per_class: 25,
            unlabeled_per_class: 400,
            unlabeled_per_outlier_cluster: 200,
            test_per_class: 200,
            test_per_outlier_cluster: 200,
            cluster_sigma: 1.0,
            center_range: 4.0,
            min_center_distance: 4.0,
            outlier_candidates: 64,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1");
        }
        if self.dim == 0 {
            return bad("dim must be >= 1");
        }
        if self.labels_per_class == 0 {
            return bad("labels_per_class must be >= 1");
        }
        if self.labels_per_class > self.unlabeled_per_class {
            return Err(Error::Config(format!(
                "labels_per_class ({}) exceeds the samples per class ({})",
                self.labels_per_class, self.unlabeled_per_class
            )));
        }
        if !(self.cluster_sigma >= 0.0 && self.cluster_sigma.is_finite()) {
            return bad("cluster_sigma must be finite and >= 0");
        }
        if !(self.center_range > 0.0 && self.center_range.is_finite()) {
            return bad("center_range must be finite and > 0");
        }
        if !(self.min_center_distance >= 0.0) {
            return bad("min_center_distance must be >= 0");
        }
        if self.outlier_candidates == 0 {
            return bad("outlier_candidates must be >= 1");
        }
        if self.num_classes < 2 && self.seen_outlier_clusters + self.unseen_outlier_clusters > 0 {
            return bad("outlier clusters need at least 2 inlier classes");
        }
        Ok(())
    }

    fn total_clusters(&self) -> usize {
        self.num_classes + self.seen_outlier_clusters + self.unseen_outlier_clusters
    }
}

const CENTER_ATTEMPTS: usize = 10_000;

/// Cluster centers in generation order: inlier classes, seen outlier
/// clusters, unseen outlier clusters.
///
/// Outlier clusters sit between the inlier classes rather than beyond them.
/// An outlier cluster on the far side of a class falls inside that class's
/// one-vs-all inlier region, which no amount of training can fix.
pub fn sample_centers(config: &GenConfig, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(config.total_clusters());
    let min_sq = config.min_center_distance * config.min_center_distance;
    for c in 0..config.num_classes {
        let mut placed = false;
        for _ in 0..CENTER_ATTEMPTS {
            let cand: Vec<f64> = (0..config.dim)
                .map(|_| rng.random_range(-config.center_range..=config.center_range))
                .collect();
            if centers.iter().all(|other| sq_dist(other, &cand) >= min_sq) {
                centers.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place center {c} at distance >= {} after {CENTER_ATTEMPTS} attempts",
                config.min_center_distance
            )));
        }
    }

    let k = config.num_classes;
    for _ in k..config.total_clusters() {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..config.outlier_candidates {
            // Exponential weights normalised to one are a uniform draw from the simplex.
            let w: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let total: f64 = w.iter().sum();
            let cand: Vec<f64> = (0..config.dim)
                .map(|j| (0..k).map(|i| w[i] * centers[i][j]).sum::<f64>() / total)
                .collect();
            let gap = centers.iter().map(|o| sq_dist(o, &cand)).fold(f64::INFINITY, f64::min);
            if best.as_ref().is_none_or(|(g, _)| gap > *g) {
                best = Some((gap, cand));
            }
        }
        centers.push(best.expect("outlier_candidates >= 1").1);
    }
    Ok(centers)
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Draws a dataset of isotropic Gaussian clusters. Deterministic in `seed`.
pub fn gen_synthetic(config: &GenConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = seeded(seed, 0);
    let centers = sample_centers(config, &mut rng)?;
    let noise = Normal::new(0.0, config.cluster_sigma)
        .map_err(|e| Error::Config(format!("cluster_sigma: {e}")))?;
    let draw = |center: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        center.iter().map(|&c| c + noise.sample(rng)).collect()
    };

    let k = config.num_classes;
    let seen_end = k + config.seen_outlier_clusters;
    let tag_of = |c: usize| {
        if c < k {
            Tag::Inlier(c)
        } else if c < seen_end {
            Tag::SeenOutlier
        } else {
            Tag::UnseenOutlier
        }
    };

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut test = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        let tag = tag_of(c);
        let (n_train, n_test) = match tag {
            Tag::Inlier(_) => (config.unlabeled_per_class, config.test_per_class),
            Tag::SeenOutlier => (config.unlabeled_per_outlier_cluster, config.test_per_outlier_cluster),
            Tag::UnseenOutlier => (0, config.test_per_outlier_cluster),
        };
        // The first `labels_per_class` draws of an inlier class become the
        // labeled set; the remainder is unlabeled.
        for i in 0..n_train {
            let x = draw(center, &mut rng);
            match tag {
                Tag::Inlier(label) if i < config.labels_per_class => {
                    labeled.push(LabeledSample { x, label })
                }
                _ => unlabeled.push(TaggedSample { x, tag }),
            }
        }
        for _ in 0..n_test {
            let x = draw(center, &mut rng);
            test.push(TaggedSample { x, tag });
        }
    }
    Dataset::new(k, config.dim, labeled, unlabeled, test)
}

/// Stochastic input transformations for vector data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub weak_noise_sigma: f64,
    pub strong_noise_sigma: f64,
    pub strong_mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            weak_noise_sigma: 1.0,
            strong_noise_sigma: 1.0,
            strong_mask_prob: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            weak_noise_sigma: 0.0,
            strong_noise_sigma: 0.0,
            strong_mask_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weak_noise_sigma >= 0.0 && self.weak_noise_sigma.is_finite()) {
            return Err(Error::Config("weak_noise_sigma must be finite and >= 0".into()));
        }
        if !(self.strong_noise_sigma >= self.weak_noise_sigma && self.strong_noise_sigma.is_finite()) {
            return Err(Error::Config(
                "strong_noise_sigma must be finite and >= weak_noise_sigma".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.strong_mask_prob) {
            return Err(Error::Config("strong_mask_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn add_noise(x: &[f64], sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    x.iter().map(|&v| v + normal.sample(rng)).collect()
}

/// `x` plus per-coordinate Gaussian noise of scale `weak_noise_sigma`.
pub fn augment_weak(x: &[f64], config: &AugmentConfig, rng: &mut impl Rng) -> Vec<f64> {
    add_noise(x, config.weak_noise_sigma, rng)
}

/// Gaussian noise of scale `strong_noise_sigma`, then every coordinate is
/// zeroed independently with probability `strong_mask_prob`.
pub fn augment_strong(x: &[f64], config: &AugmentConfig, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = add_noise(x, config.strong_noise_sigma, rng);
    if config.strong_mask_prob > 0.0 {
        let mask = Bernoulli::new(config.strong_mask_prob).expect("validated probability");
        for v in &mut out {
            if mask.sample(rng) {
                *v = 0.0;
            }
        }
    }
    out
}

/// Applies `f` to every row of a matrix.
pub fn augment_rows(
    x: &Tensor,
    rng: &mut ChaCha8Rng,
    f: impl Fn(&[f64], &mut ChaCha8Rng) -> Vec<f64>,
) -> Tensor {
    let cols = x.shape()[1];
    let rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| f(x.row(i), rng)).collect();
    Tensor::from_rows(&rows, cols).expect("augmentations preserve dimension")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

/// One iteration's worth of data: `B` labeled, `mu * B` unlabeled and up to
/// `mu * B` pseudo-inliers.
#[derive(Debug, Clone, PartialEq)]
pub struct Batches {
    pub labeled: LabeledBatch,
    pub unlabeled: Tensor,
    pub pseudo: Tensor,
}

/// Uniform sampling with replacement from each pool. `pseudo_inliers` are
/// indices into the unlabeled split; when empty, the pseudo batch is empty
/// and no random numbers are drawn for it.
pub fn sample_batches(
    dataset: &Dataset,
    batch_size: usize,
    mu: usize,
    pseudo_inliers: &[usize],
    rng: &mut impl Rng,
) -> Result<Batches> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if dataset.labeled.is_empty() {
        return Err(Error::Config("labeled set is empty".into()));
    }
    if dataset.unlabeled.is_empty() {
        return Err(Error::Config("unlabeled set is empty".into()));
    }
    let dim = dataset.dim;
    let n_unlabeled = mu * batch_size;

    let picks: Vec<&LabeledSample> = (0..batch_size)
        .map(|_| &dataset.labeled[rng.random_range(0..dataset.labeled.len())])
        .collect();
    let labeled = LabeledBatch {
        x: Tensor::from_rows(&picks.iter().map(|s| &s.x[..]).collect::<Vec<_>>(), dim)?,
        labels: picks.iter().map(|s| s.label).collect(),
    };

    let unl: Vec<&[f64]> = (0..n_unlabeled)
        .map(|_| &dataset.unlabeled[rng.random_range(0..dataset.unlabeled.len())].x[..])
        .collect();
    let unlabeled = Tensor::from_rows(&unl, dim)?;

    let pseudo = if pseudo_inliers.is_empty() {
        Tensor::zeros(&[0, dim])
    } else {
        let rows = (0..n_unlabeled)
            .map(|_| {
                let idx = pseudo_inliers[rng.random_range(0..pseudo_inliers.len())];
                dataset
                    .unlabeled
                    .get(idx)
                    .map(|s| &s.x[..])
                    .ok_or_else(|| Error::Config(format!("pseudo-inlier index {idx} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows, dim)?
    };

    Ok(Batches {
        labeled,
        unlabeled,
        pseudo,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Labeled,
    Unlabeled,
    Test,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Labeled => "labeled",
            Role::Unlabeled => "unlabeled",
            Role::Test => "test",
        })
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "labeled" => Ok(Role::Labeled),
            "unlabeled" => Ok(Role::Unlabeled),
            "test" => Ok(Role::Test),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

fn tag_name(tag: Tag) -> &'static str {
    match tag {
        Tag::Inlier(_) => "inlier",
        Tag::SeenOutlier => "seen_outlier",
        Tag::UnseenOutlier => "unseen_outlier",
    }
}

/// Writes the dataset as CSV with header `role,label,tag,f0,...,f{d-1}`.
///
/// Labels are `-1` for outliers. Floats use the shortest representation
/// that parses back to the same value.
pub fn write_csv<W: std::io::Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["role".to_string(), "label".into(), "tag".into()];
    header.extend((0..dataset.dim).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_io)?;

    let mut write_row = |role: Role, label: i64, tag: Tag, x: &[f64]| -> Result<()> {
        let mut rec = vec![role.to_string(), label.to_string(), tag_name(tag).to_string()];
        rec.extend(x.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_io)
    };
    for s in &dataset.labeled {
        write_row(Role::Labeled, s.label as i64, Tag::Inlier(s.label), &s.x)?;
    }
    for (role, split) in [(Role::Unlabeled, &dataset.unlabeled), (Role::Test, &dataset.test)] {
        for s in split {
            let label = s.tag.class().map_or(-1, |c| c as i64);
            write_row(role, label, s.tag, &s.x)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(dataset, std::io::BufWriter::new(file))
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Validation(format!("csv: {other:?}")),
    }
}

/// Parses the CSV written by [`write_csv`].
///
/// `d` is the number of `f*` header columns. The number of classes is one
/// more than the largest label in the labeled rows.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, path)
}

pub fn read_csv<R: std::io::Read>(reader: R, path: &Path) -> Result<Dataset> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.len() < 4 || &header[0] != "role" || &header[1] != "label" || &header[2] != "tag" {
        return Err(parse_err(1, "header must be role,label,tag,f0,...".into()));
    }
    let dim = header.len() - 3;
    for (i, name) in header.iter().skip(3).enumerate() {
        if name != format!("f{i}") {
            return Err(parse_err(1, format!("expected column f{i}, found {name:?}")));
        }
    }

    struct Row {
        line: u64,
        role: Role,
        label: i64,
        tag: &'static str,
        x: Vec<f64>,
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 3 {
            return Err(parse_err(
                line,
                format!("expected {} fields (d = {dim}), found {}", dim + 3, record.len()),
            ));
        }
        let role: Role = record[0].parse().map_err(|e| parse_err(line, e))?;
        let label: i64 = record[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad label {:?}", &record[1])))?;
        let tag = match &record[2] {
            "inlier" => "inlier",
            "seen_outlier" => "seen_outlier",
            "unseen_outlier" => "unseen_outlier",
            other => return Err(parse_err(line, format!("unknown tag {other:?}"))),
        };
        let x = record
            .iter()
            .skip(3)
            .enumerate()
            .map(|(i, f)| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("non-numeric feature f{i}: {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(Row {
            line,
            role,
            label,
            tag,
            x,
        });
    }

    let num_classes = rows
        .iter()
        .filter(|r| r.role == Role::Labeled)
        .map(|r| r.label + 1)
        .max()
        .unwrap_or(0)
        .max(0) as usize;

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut test = Vec::new();
    for r in rows {
        let invalid = |m: String| Error::Validation(format!("{}:{}: {m}", path.display(), r.line));
        let tag = match r.tag {
            "inlier" => {
                if r.label < 0 || r.label as usize >= num_classes {
                    return Err(invalid(format!(
                        "inlier label {} outside [0, {num_classes})",
                        r.label
                    )));
                }
                Tag::Inlier(r.label as usize)
            }
            outlier => {
                if r.label != -1 {
                    return Err(invalid(format!("outlier rows need label -1, got {}", r.label)));
                }
                if outlier == "seen_outlier" {
                    Tag::SeenOutlier
                } else {
                    Tag::UnseenOutlier
                }
            }
        };
        match (r.role, tag) {
            (Role::Labeled, Tag::Inlier(label)) => labeled.push(LabeledSample { x: r.x, label }),
            (Role::Labeled, _) => return Err(invalid("labeled rows must be inliers".into())),
            (Role::Unlabeled, Tag::UnseenOutlier) => {
                return Err(invalid("unseen outliers may only appear in test rows".into()))
            }
            (Role::Unlabeled, tag) => unlabeled.push(TaggedSample { x: r.x, tag }),
            (Role::Test, tag) => test.push(TaggedSample { x: r.x, tag }),
        }
    }
    Dataset::new(num_classes, dim, labeled, unlabeled, test)
}
