//! The training loop: loss assembly, Nesterov SGD and pseudo-inlier selection.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::config::TrainConfig;
use crate::data::{sample_batches, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsRecord};
use crate::losses::{loss_all, LossBreakdown};
use crate::model::ModelParams;
use crate::rng::seeded;

const INIT_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;

/// Velocity buffers, one per parameter tensor in `ModelParams::tensors` order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState {
            velocity: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// Nesterov momentum: `v <- m v + g`, `p <- p - lr (g + m v)`.
///
/// All gradients are checked before anything is written, so a failed step
/// leaves both `params` and `state` untouched.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if grads.len() != tensors.len() || state.velocity.len() != tensors.len() {
        return Err(Error::Validation(format!(
            "{} parameters, {} gradients, {} velocity buffers",
            tensors.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, g), v) in tensors.iter().zip(grads).zip(&state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
    }
    for ((p, g), v) in tensors.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * (gi + momentum * *vi);
        }
    }
    Ok(())
}

/// Indices of unlabeled rows the detector accepts as inliers, judged on
/// clean inputs.
pub fn select_pseudo_inliers(params: &ModelParams, unlabeled: &Tensor) -> Result<Vec<usize>> {
    if unlabeled.rows() == 0 {
        return Ok(Vec::new());
    }
    Ok(params
        .predict_open(unlabeled)?
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.is_outlier())
        .map(|(i, _)| i)
        .collect())
}

/// What one epoch did.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    /// 1-based.
    pub epoch: usize,
    /// Per-term means over the epoch's iterations.
    pub mean_losses: LossBreakdown,
    /// Size of the pseudo-inlier set after this epoch.
    pub k_size: usize,
    /// Iterations whose objective included the FixMatch term.
    pub fm_iterations: usize,
    pub metrics: Option<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    /// One record per evaluated epoch.
    pub records: Vec<MetricsRecord>,
    /// Pseudo-inlier set size after each epoch.
    pub k_sizes: Vec<usize>,
    /// FixMatch-active iterations per epoch.
    pub fm_iterations: Vec<usize>,
    pub steps: usize,
    pub params: ModelParams,
}

/// Step-by-step driver; `train` runs it to completion.
#[derive(Debug)]
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    config: TrainConfig,
    params: ModelParams,
    optimizer: OptimizerState,
    sample_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    unlabeled: Tensor,
    pseudo_inliers: Vec<usize>,
    epoch: usize,
    steps: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, config: TrainConfig) -> Result<Self> {
        let params = ModelParams::init(
            dataset.dim(),
            &config.hidden,
            dataset.num_classes(),
            &mut seeded(config.seed, INIT_STREAM),
        );
        Self::with_params(dataset, config, params)
    }

    /// Starts from the given weights instead of a fresh initialization.
    pub fn with_params(dataset: &'a Dataset, config: TrainConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        if params.input_dim() != dataset.dim() || params.num_classes() != dataset.num_classes() {
            return Err(Error::Validation(format!(
                "model is {}-d with {} classes, dataset is {}-d with {} classes",
                params.input_dim(),
                params.num_classes(),
                dataset.dim(),
                dataset.num_classes()
            )));
        }
        if dataset.num_classes() < 2 {
            return Err(Error::Validation("training needs at least 2 classes".into()));
        }
        Ok(Trainer {
            dataset,
            optimizer: OptimizerState::new(&params),
            sample_rng: seeded(config.seed, SAMPLE_STREAM),
            augment_rng: seeded(config.seed, AUGMENT_STREAM),
            unlabeled: dataset.unlabeled_matrix(),
            config,
            params,
            pseudo_inliers: Vec::new(),
            epoch: 0,
            steps: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn pseudo_inliers(&self) -> &[usize] {
        &self.pseudo_inliers
    }

    /// Overrides the current pseudo-inlier set.
    pub fn set_pseudo_inliers(&mut self, indices: Vec<usize>) -> Result<()> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.dataset.unlabeled_len()) {
            return Err(Error::Validation(format!("pseudo-inlier index {bad} out of range")));
        }
        self.pseudo_inliers = indices;
        Ok(())
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.e_max
    }

    fn iteration(&mut self, epoch: usize) -> Result<LossBreakdown> {
        // The pseudo batch is only drawn when it can contribute, so runs that
        // never use FixMatch consume the same sampling stream as plain
        // supervised training.
        let use_pseudo = epoch > self.config.e_fix && self.config.lambda_fm > 0.0;
        let pseudo: &[usize] = if use_pseudo { &self.pseudo_inliers } else { &[] };
        let batches = sample_batches(
            self.dataset,
            self.config.batch_size,
            self.config.mu,
            pseudo,
            &mut self.sample_rng,
        )?;
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let (loss, breakdown) = loss_all(&mut tape, &vars, &batches, &self.config, epoch, &mut self.augment_rng)?;
        let grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars.all().into_iter().map(|v| grads.get_or_zeros(v)).collect();
        let lr = self.config.lr_at(self.steps);
        sgd_step(&mut self.params, &grads, &mut self.optimizer, lr, self.config.momentum)?;
        Ok(breakdown)
    }

    /// Runs the next epoch: `i_max` steps, then selection and evaluation.
    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        if self.is_finished() {
            return Err(Error::Config(format!("all {} epochs already ran", self.config.e_max)));
        }
        let epoch = self.epoch + 1;
        let mut sum = LossBreakdown::default();
        let fm_active = epoch > self.config.e_fix && self.uses_fixmatch();
        let mut fm_mask = 0;
        for iteration in 1..=self.config.i_max {
            let b = self.iteration(epoch).map_err(|e| Error::TrainingAborted {
                epoch,
                iteration,
                source: Box::new(e),
            })?;
            self.steps += 1;
            sum.l_cls += b.l_cls;
            sum.l_ova += b.l_ova;
            sum.l_sup += b.l_sup;
            sum.l_em += b.l_em;
            sum.l_oc += b.l_oc;
            sum.l_fm += b.l_fm;
            sum.l_all += b.l_all;
            fm_mask += b.fm_mask_count;
        }
        let n = self.config.i_max as f64;
        let mean_losses = LossBreakdown {
            l_cls: sum.l_cls / n,
            l_ova: sum.l_ova / n,
            l_sup: sum.l_sup / n,
            l_em: sum.l_em / n,
            l_oc: sum.l_oc / n,
            l_fm: sum.l_fm / n,
            l_all: sum.l_all / n,
            fm_mask_count: fm_mask,
        };

        if epoch >= self.config.e_fix {
            self.pseudo_inliers = select_pseudo_inliers(&self.params, &self.unlabeled)?;
        }
        self.epoch = epoch;

        let metrics = if epoch % self.config.eval_every == 0 || epoch == self.config.e_max {
            Some(self.metrics(epoch, &mean_losses, fm_mask as f64 / n)?)
        } else {
            None
        };
        Ok(EpochSummary {
            epoch,
            mean_losses,
            k_size: self.pseudo_inliers.len(),
            fm_iterations: if fm_active { self.config.i_max } else { 0 },
            metrics,
        })
    }

    fn uses_fixmatch(&self) -> bool {
        self.config.lambda_fm > 0.0 && !self.pseudo_inliers.is_empty()
    }

    fn metrics(&self, epoch: usize, losses: &LossBreakdown, fm_mask: f64) -> Result<MetricsRecord> {
        let has_inliers = self.dataset.test().iter().any(|s| !s.tag.is_outlier());
        let report = if has_inliers {
            Some(evaluate(&self.params, self.dataset.test())?)
        } else {
            None
        };
        Ok(MetricsRecord {
            epoch,
            l_cls: losses.l_cls,
            l_ova: losses.l_ova,
            l_em: losses.l_em,
            l_oc: losses.l_oc,
            l_fm: losses.l_fm,
            l_all: losses.l_all,
            err_inlier: report.map_or(f64::NAN, |r| r.err_inlier),
            auroc_seen: report.and_then(|r| r.auroc_seen),
            auroc_unseen: report.and_then(|r| r.auroc_unseen),
            k_size: self.pseudo_inliers.len(),
            fm_mask,
        })
    }

    /// Runs the remaining epochs.
    pub fn finish(mut self) -> Result<TrainHistory> {
        let mut records = Vec::new();
        let mut k_sizes = Vec::new();
        let mut fm_iterations = Vec::new();
        while !self.is_finished() {
            let s = self.run_epoch()?;
            records.extend(s.metrics);
            k_sizes.push(s.k_size);
            fm_iterations.push(s.fm_iterations);
        }
        Ok(TrainHistory {
            records,
            k_sizes,
            fm_iterations,
            steps: self.steps,
            params: self.params,
        })
    }
}

/// Trains a fresh model on `dataset`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainHistory> {
    Trainer::new(dataset, config.clone())?.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, AugmentConfig, GenConfig, LabeledSample, Tag, TaggedSample};
    use crate::losses::{cls_from_probs, loss_cls, ova_from_probs};
    use crate::model::{classify_closed, feature_extract, ova_probs};
    use crate::model::OUTLIER;

    fn scalar_model(w: f64) -> ModelParams {
        let mut p = ModelParams::zeros(1, &[], 2);
        p.closed_head.weight.data_mut()[0] = w;
        p
    }

    fn one_grad(params: &ModelParams, g0: f64) -> Vec<Tensor> {
        let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        grads[0].data_mut()[0] = g0;
        grads
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut p = scalar_model(1.0);
        let mut st = OptimizerState::new(&p);
        let g = one_grad(&p, 0.5);
        sgd_step(&mut p, &g, &mut st, 0.1, 0.0).unwrap();
        assert!((p.closed_head.weight.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_keeps_params() {
        let mut p = ModelParams::init(3, &[4], 3, &mut seeded(0, 0));
        let before = p.clone();
        let mut st = OptimizerState::new(&p);
        let g: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        sgd_step(&mut p, &g, &mut st, 0.1, 0.9).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn nesterov_matches_scalar_recurrence_on_quadratic() {
        // f(w) = (w - 3)^2, f'(w) = 2 (w - 3)
        let (lr, m) = (0.1, 0.9);
        let mut p = scalar_model(0.0);
        let mut st = OptimizerState::new(&p);
        let (mut w, mut v) = (0.0f64, 0.0f64);
        for _ in 0..2 {
            let g = 2.0 * (w - 3.0);
            v = m * v + g;
            w -= lr * (g + m * v);
            let cur = p.closed_head.weight.data()[0];
            let grads = one_grad(&p, 2.0 * (cur - 3.0));
            sgd_step(&mut p, &grads, &mut st, lr, m).unwrap();
            assert_eq!(p.closed_head.weight.data()[0], w);
        }
        // g = -6: v = -6, w = -0.1 * (-6 + 0.9 * -6) = 1.14
        let mut p = scalar_model(0.0);
        let mut st = OptimizerState::new(&p);
        let grads = one_grad(&p, -6.0);
        sgd_step(&mut p, &grads, &mut st, lr, m).unwrap();
        assert!((p.closed_head.weight.data()[0] - 1.14).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_non_finite_without_mutating() {
        let mut p = scalar_model(1.0);
        let mut st = OptimizerState::new(&p);
        let mut g = one_grad(&p, 1.0);
        sgd_step(&mut p, &g, &mut st, 0.1, 0.9).unwrap();
        let (p0, st0) = (p.clone(), st.clone());
        g.last_mut().unwrap().data_mut()[0] = f64::NAN;
        assert!(matches!(sgd_step(&mut p, &g, &mut st, 0.1, 0.9), Err(Error::Numeric(_))));
        assert_eq!((p, st), (p0, st0));
    }

    #[test]
    fn selection_cases() {
        let x = Tensor::new(vec![4, 2], vec![0.0, 1.0, 2.0, 3.0, -1.0, 5.0, 0.5, 0.5]).unwrap();
        assert_eq!(select_pseudo_inliers(&ModelParams::zeros(2, &[3], 3), &x).unwrap(), vec![0, 1, 2, 3]);

        let mut forced = ModelParams::zeros(2, &[3], 3);
        for j in 0..3 {
            forced.ova_head.bias.data_mut()[2 * j + OUTLIER] = 40.0;
        }
        assert!(select_pseudo_inliers(&forced, &x).unwrap().is_empty());

        // K = 2, zero-depth extractor, 1-d input used as a row selector via
        // one-hot rows so each point gets its own inlier logit.
        let mut hand = ModelParams::zeros(3, &[], 2);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        for (row, p) in [0.9, 0.4, 0.6].into_iter().enumerate() {
            for j in 0..2 {
                hand.ova_head.weight.data_mut()[row * 4 + 2 * j] = logit(p);
            }
        }
        let pts = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let probs = hand.ova_probs(&pts).unwrap();
        assert!((probs.inlier(1, 0) - 0.4).abs() < 1e-12);
        assert_eq!(select_pseudo_inliers(&hand, &pts).unwrap(), vec![0, 2]);
    }

    fn small_data(seed: u64) -> Dataset {
        gen_synthetic(
            &GenConfig {
                num_classes: 3,
                seen_outlier_clusters: 1,
                unseen_outlier_clusters: 1,
                dim: 4,
                labels_per_class: 5,
                unlabeled_per_class: 40,
                unlabeled_per_outlier_cluster: 20,
                test_per_class: 20,
                test_per_outlier_cluster: 20,
                ..GenConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            mu: 2,
            e_fix: 2,
            e_max: 4,
            i_max: 5,
            hidden: vec![8],
            tau: 0.5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_data(1);
        let a = train(&ds, &small_config()).unwrap();
        let b = train(&ds, &small_config()).unwrap();
        assert_eq!(a, b);
        let c = train(&ds, &TrainConfig { seed: 9, ..small_config() }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn step_count_and_selection_schedule() {
        let ds = small_data(2);
        let cfg = small_config();
        let h = train(&ds, &cfg).unwrap();
        assert_eq!(h.steps, cfg.e_max * cfg.i_max);
        assert_eq!(h.records.len(), cfg.e_max);
        assert_eq!(h.k_sizes[0], 0);
        assert!(h.k_sizes[1] > 0, "selection runs at the end of epoch e_fix");
        assert_eq!(&h.fm_iterations[..2], &[0, 0]);

        let single = TrainConfig { e_fix: 1, e_max: 1, ..cfg.clone() };
        let h = train(&ds, &single).unwrap();
        assert_eq!(h.k_sizes.len(), 1);
        assert!(h.k_sizes[0] > 0);
        assert_eq!(h.fm_iterations, vec![0]);
        assert_eq!(h.records[0].l_fm, 0.0);

        let sparse = TrainConfig { eval_every: 3, ..cfg };
        let epochs: Vec<usize> = train(&ds, &sparse).unwrap().records.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![3, 4]);
    }

    #[test]
    fn fixmatch_gating_ignores_pseudo_set_before_e_fix() {
        let ds = small_data(3);
        let cfg = TrainConfig { e_fix: 2, e_max: 3, ..small_config() };
        let run = |pseudo: Vec<usize>| {
            let mut t = Trainer::new(&ds, cfg.clone()).unwrap();
            t.set_pseudo_inliers(pseudo).unwrap();
            t.run_epoch().unwrap();
            t.params().clone()
        };
        assert_eq!(run(vec![]), run((0..ds.unlabeled_len()).collect()));
        assert_eq!(run(vec![]), run(vec![0, 1, 2]));

        // after e_fix the set matters
        let run_late = |pseudo: Vec<usize>| {
            let mut t = Trainer::new(&ds, cfg.clone()).unwrap();
            t.run_epoch().unwrap();
            t.run_epoch().unwrap();
            t.set_pseudo_inliers(pseudo).unwrap();
            t.run_epoch().unwrap();
            t.params().clone()
        };
        assert_ne!(run_late(vec![0]), run_late(vec![5, 6]));
    }

    #[test]
    fn zero_weights_reduce_to_supervised_training() {
        let ds = small_data(4);
        let cfg = TrainConfig {
            lambda_em: 0.0,
            lambda_oc: 0.0,
            lambda_fm: 0.0,
            ..small_config()
        };
        let h = train(&ds, &cfg).unwrap();

        // hand-rolled loop: same init, same sampling stream, only L_cls + L_ova
        let mut params = ModelParams::init(ds.dim(), &cfg.hidden, ds.num_classes(), &mut seeded(cfg.seed, 1));
        let mut st = OptimizerState::new(&params);
        let mut rng = seeded(cfg.seed, 2);
        for _ in 0..cfg.e_max * cfg.i_max {
            let b = sample_batches(&ds, cfg.batch_size, cfg.mu, &[], &mut rng).unwrap();
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let x = tape.constant(b.labeled.x.clone());
            let feats = feature_extract(&mut tape, &vars, x).unwrap();
            let closed = classify_closed(&mut tape, &vars, feats).unwrap();
            let ova = ova_probs(&mut tape, &vars, feats).unwrap();
            let l1 = cls_from_probs(&mut tape, closed, &b.labeled.labels).unwrap();
            let l2 = ova_from_probs(&mut tape, ova, &b.labeled.labels).unwrap();
            let l = tape.add(l1, l2).unwrap();
            let g = tape.backward(l).unwrap();
            let grads: Vec<Tensor> = vars.all().into_iter().map(|v| g.get_or_zeros(v)).collect();
            sgd_step(&mut params, &grads, &mut st, cfg.lr, cfg.momentum).unwrap();
        }
        assert_eq!(h.params, params);
    }

    #[test]
    fn separable_clusters_are_fit_quickly() {
        let mut labeled = Vec::new();
        let mut test = Vec::new();
        let mut rng = seeded(7, 0);
        use rand::Rng;
        for i in 0..40 {
            let c = i % 2;
            let sign = if c == 0 { -1.0 } else { 1.0 };
            let x = vec![sign * 2.0 + rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            labeled.push(LabeledSample { x: x.clone(), label: c });
            test.push(TaggedSample { x, tag: Tag::Inlier(c) });
        }
        let unlabeled = test.clone();
        let ds = Dataset::new(2, 2, labeled, unlabeled, test).unwrap();
        let cfg = TrainConfig {
            lambda_em: 0.0,
            lambda_oc: 0.0,
            lambda_fm: 0.0,
            batch_size: 16,
            mu: 1,
            e_fix: 1,
            e_max: 1,
            i_max: 200,
            hidden: vec![16],
            augment: AugmentConfig::identity(),
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&ds, cfg).unwrap();
        t.run_epoch().unwrap();
        let mut tape = Tape::new();
        let vars = t.params().register_frozen(&mut tape);
        let all = crate::data::LabeledBatch {
            x: Tensor::from_rows(&ds.labeled().iter().map(|s| &s.x[..]).collect::<Vec<_>>(), 2).unwrap(),
            labels: ds.labeled().iter().map(|s| s.label).collect(),
        };
        let l = loss_cls(&mut tape, &vars, &all).unwrap();
        assert!(tape.value(l).item().unwrap() < 0.1);
    }

    #[test]
    fn non_finite_loss_reports_coordinates() {
        let ds = small_data(5);
        let cfg = TrainConfig { lr: 1e300, ..small_config() };
        match train(&ds, &cfg) {
            Err(Error::TrainingAborted { epoch, iteration, .. }) => {
                assert!(epoch >= 1 && iteration >= 1 && iteration <= cfg.i_max);
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_model_rejected() {
        let ds = small_data(6);
        let p = ModelParams::zeros(ds.dim() + 1, &[], ds.num_classes());
        assert!(Trainer::with_params(&ds, small_config(), p).is_err());
        let mut t = Trainer::new(&ds, small_config()).unwrap();
        assert!(t.set_pseudo_inliers(vec![ds.unlabeled_len()]).is_err());
    }
}
