//! Margin loss, Adam with exponential step-size decay, the weight-decay and
//! capsule-dropout baselines, the training loop and evaluation.

use std::fs::File;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::csv_err;
use crate::autodiff::MarginLossParams;
use crate::capsule::{CapsNet, Params};
use crate::checkpoint::{checkpoint_file_name, Checkpoint};
use crate::config::{DropoutMode, OptimizerConfig, Regularizer, RunConfig};
use crate::data::{random_shift, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "step,loss,train_acc,eval_acc";

/// `Σ_k T_k·max(0, m⁺−a_k)² + λ·(1−T_k)·max(0, a_k−m⁻)²` where `T_k` marks
/// the classes in `labels`.
pub fn margin_loss(class_activations: &[f64], labels: &[usize], params: &MarginLossParams) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("margin loss needs a non-empty label set".into()));
    }
    let k = class_activations.len();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::IndexOutOfRange {
            what: "class label",
            index: bad,
            len: k,
        });
    }
    Ok(class_activations
        .iter()
        .enumerate()
        .map(|(c, &a)| params.term(a, labels.contains(&c)).0)
        .sum())
}

/// A prediction is correct when the `labels.len()` highest activations are
/// exactly the labelled classes.
pub fn prediction_correct(class_activations: &[f64], labels: &[usize]) -> bool {
    let mut order: Vec<usize> = (0..class_activations.len()).collect();
    order.sort_by(|&a, &b| class_activations[b].total_cmp(&class_activations[a]).then(a.cmp(&b)));
    let k = labels.len();
    k <= order.len() && order[..k].iter().all(|c| labels.contains(c))
}

/// Mask for the primary capsules (`num_caps × dim`): kept entries hold
/// `1/keep`, dropped ones 0. `None` when `keep == 1`.
pub fn dropout_mask<R: Rng + ?Sized>(num_caps: usize, dim: usize, keep: f64, mode: DropoutMode, rng: &mut R) -> Option<Tensor> {
    if keep >= 1.0 {
        return None;
    }
    let scale = 1.0 / keep;
    let mut draw = || if rng.random::<f64>() < keep { scale } else { 0.0 };
    let data = match mode {
        DropoutMode::Capsule => (0..num_caps).flat_map(|_| std::iter::repeat(draw()).take(dim)).collect(),
        DropoutMode::Element => (0..num_caps * dim).map(|_| draw()).collect(),
    };
    Some(Tensor::new(vec![num_caps, dim], data).expect("mask length matches shape"))
}

/// `λ·Σw²` over every trainable tensor.
pub fn weight_decay_penalty(params: &Params, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    lambda * params.sum_squares()
}

/// Adds the penalty's gradient `2λw` to `grads`.
pub fn apply_weight_decay(grads: &mut Params, params: &Params, lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    for (g, w) in grads.tensors_mut().into_iter().zip(params.tensors()) {
        for (g, &w) in g.data_mut().iter_mut().zip(w.data()) {
            *g += 2.0 * lambda * w;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: OptimizerConfig,
    m: Params,
    v: Params,
    t: u64,
}

impl Adam {
    pub fn new(config: OptimizerConfig, like: &Params) -> Self {
        let zeros = |p: &Params| {
            let mut z = p.clone();
            z.tensors_mut().into_iter().for_each(|t| t.data_mut().fill(0.0));
            z
        };
        Adam {
            config,
            m: zeros(like),
            v: zeros(like),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// `lr · decay_rate^(step / decay_steps)` with a continuous exponent.
    pub fn step_size(&self, step: u64) -> f64 {
        let c = &self.config;
        c.learning_rate * c.decay_rate.powf(step as f64 / c.decay_steps as f64)
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        let lr = self.step_size(self.t);
        self.t += 1;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(self.t as i32);
        let bias2 = 1.0 - c.beta2.powi(self.t as i32);
        let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
        let moments = self.m.tensors_mut().into_iter().zip(self.v.tensors_mut());
        for ((w, g), (m, v)) in tensors.zip(moments) {
            let w = w.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (k, &g) in g.data().iter().enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let mhat = m[k] / bias1;
                let vhat = v[k] / bias2;
                w[k] -= lr * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub correct: usize,
    pub total: usize,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn error_rate(&self) -> f64 {
        1.0 - self.accuracy()
    }
}

fn label_indices(ds: &Dataset, i: usize) -> Vec<usize> {
    ds.label(i).classes().iter().map(|&c| c as usize).collect()
}

pub fn evaluate(net: &CapsNet, dataset: &Dataset) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0;
    for i in 0..dataset.len() {
        let out = net.forward(&dataset.image(i))?;
        if prediction_correct(out.class_activations.data(), &label_indices(dataset, i)) {
            correct += 1;
        }
    }
    Ok(EvalResult {
        correct,
        total: dataset.len(),
    })
}

/// Arithmetic mean of per-checkpoint error rates.
pub fn average_error_rates(rates: &[f64]) -> Result<f64> {
    if rates.is_empty() {
        return Err(Error::InvalidArgument("need at least one checkpoint".into()));
    }
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

/// Mean error rate of the given checkpoints on `test_set`.
pub fn eval_checkpoint_averaged(checkpoints: &[CapsNet], test_set: &Dataset) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rates = checkpoints
        .iter()
        .map(|net| evaluate(net, test_set).map(|r| r.error_rate()))
        .collect::<Result<Vec<_>>>()?;
    average_error_rates(&rates)
}

/// Network whose parameters are the elementwise mean of the checkpoints'.
pub fn average_weights(checkpoints: &[CapsNet]) -> Result<CapsNet> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one checkpoint".into()))?;
    let mut sum = first.params.clone();
    for net in &checkpoints[1..] {
        if net.arch != first.arch || net.activation != first.activation {
            return Err(Error::InvalidArgument("checkpoints use different architectures".into()));
        }
        for (s, t) in sum.tensors_mut().into_iter().zip(net.params.tensors()) {
            s.data_mut().iter_mut().zip(t.data()).for_each(|(s, &x)| *s += x);
        }
    }
    let n = checkpoints.len() as f64;
    sum.tensors_mut().into_iter().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x /= n));
    CapsNet::new(first.arch.clone(), first.activation, sum)
}

/// Error rate of a set of checkpoints under the configured averaging mode.
pub fn eval_checkpoints(checkpoints: &[CapsNet], test_set: &Dataset, mode: crate::config::CheckpointAveraging) -> Result<f64> {
    match mode {
        crate::config::CheckpointAveraging::Metric => eval_checkpoint_averaged(checkpoints, test_set),
        crate::config::CheckpointAveraging::Weights => Ok(evaluate(&average_weights(checkpoints)?, test_set)?.error_rate()),
    }
}

/// One line of the training log. `eval_acc` is empty on rows without an
/// evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    /// Mean training loss over the steps since the previous row.
    pub loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: CapsNet,
    pub log: Vec<LogRow>,
    /// Checkpoint files written, oldest first.
    pub checkpoints: Vec<PathBuf>,
    pub steps: usize,
}

/// One optimization step's summary.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub batch: usize,
}

/// Owns the model, optimizer state and the data-order RNG.
pub struct Trainer<'a> {
    pub config: RunConfig,
    pub net: CapsNet,
    adam: Adam,
    rng: ChaCha8Rng,
    train_set: &'a Dataset,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &RunConfig, train_set: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if train_set.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if train_set.image_shape() != config.arch.input_shape() {
            return Err(Error::shape(
                "training data",
                format!("{:?}", config.arch.input_shape()),
                format!("{:?}", train_set.image_shape()),
            ));
        }
        let net = CapsNet::init(config.arch.clone(), config.activation, config.routing_init_std, config.seed)?;
        let adam = Adam::new(config.optimizer.clone(), &net.params);
        Ok(Trainer {
            config: config.clone(),
            net,
            adam,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed)),
            train_set,
            order: Vec::new(),
            cursor: 0,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.train_set.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// One minibatch update. Gradients are summed in batch order, so the
    /// result depends only on the seed.
    pub fn train_step(&mut self) -> Result<StepStats> {
        let cfg = &self.config;
        let batch = cfg.batch_size;
        let shift = cfg.effective_augment_shift() as i32;
        let (keep, lambda) = match cfg.regularizer {
            Regularizer::Dropout(k) => (k, 0.0),
            Regularizer::WeightDecay(l) => (1.0, l),
            Regularizer::None => (1.0, 0.0),
        };
        let (mode, margin, num_classes) = (cfg.dropout_mode, cfg.margin, cfg.arch.num_classes);
        let (num_caps, dim) = (cfg.arch.num_primary_caps(), cfg.arch.prim_dim);

        let mut grad_sum: Option<Params> = None;
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for _ in 0..batch {
            let i = self.next_index();
            let image = random_shift(&self.train_set.image(i), shift, &mut self.rng);
            let labels = label_indices(self.train_set, i);
            let targets: Vec<bool> = (0..num_classes).map(|c| labels.contains(&c)).collect();
            let mask = dropout_mask(num_caps, dim, keep, mode, &mut self.rng);
            let (loss, acts, grads) = self
                .net
                .loss_and_grad(&image, &targets, margin, mask.as_ref())
                .map_err(|e| match e {
                    Error::NonFinite(_) => self.divergence(f64::NAN),
                    other => other,
                })?;
            loss_sum += loss;
            correct += prediction_correct(acts.data(), &labels) as usize;
            match grad_sum.as_mut() {
                None => grad_sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.tensors_mut().into_iter().zip(grads.tensors()) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(a, &g)| *a += g);
                    }
                }
            }
        }
        let mut grads = grad_sum.expect("batch_size >= 1");
        let inv = 1.0 / batch as f64;
        grads.tensors_mut().into_iter().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x *= inv));
        apply_weight_decay(&mut grads, &self.net.params, lambda);
        let loss = loss_sum * inv + weight_decay_penalty(&self.net.params, lambda);
        if !loss.is_finite() || grads.tensors().iter().any(|t| !t.all_finite()) {
            return Err(self.divergence(loss));
        }
        self.adam.step(&mut self.net.params, &grads);
        self.step += 1;
        Ok(StepStats { loss, correct, batch })
    }

    fn divergence(&self, loss: f64) -> Error {
        Error::Divergence {
            step: self.step + 1,
            loss,
            last_checkpoint: None,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.net.clone(), &self.config, self.step)
    }
}

/// Runs `config.steps` updates. With `out_dir`, checkpoints are written every
/// `checkpoint_every` steps and after the last step, and the log is
/// streamed to `train_log.csv`. On divergence the error names the last
/// checkpoint that was written.
pub fn train(config: &RunConfig, train_set: &Dataset, eval_set: Option<&Dataset>, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, train_set)?;
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(csv::Writer::from_writer(File::create(dir.join(LOG_FILE))?))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    let (mut loss_acc, mut correct_acc, mut seen_acc, mut steps_acc) = (0.0, 0, 0, 0);

    for step in 1..=config.steps {
        let stats = trainer.train_step().map_err(|e| match e {
            Error::Divergence { step, loss, .. } => Error::Divergence {
                step,
                loss,
                last_checkpoint: checkpoints.last().cloned(),
            },
            other => other,
        })?;
        loss_acc += stats.loss;
        correct_acc += stats.correct;
        seen_acc += stats.batch;
        steps_acc += 1;

        let last = step == config.steps;
        let at = |every: usize| every > 0 && step % every == 0;
        let eval_now = eval_set.is_some() && (at(config.eval_every) || last);
        if at(config.log_every) || eval_now || last {
            let eval_acc = match (eval_now, eval_set) {
                (true, Some(ds)) => Some(evaluate(&trainer.net, ds)?.accuracy()),
                _ => None,
            };
            let row = LogRow {
                step,
                loss: loss_acc / steps_acc as f64,
                train_acc: correct_acc as f64 / seen_acc as f64,
                eval_acc,
            };
            log::info!("step {} loss {:.5} train_acc {:.4} eval_acc {:?}", row.step, row.loss, row.train_acc, row.eval_acc);
            if let Some(w) = log_file.as_mut() {
                w.serialize(&row).map_err(csv_err)?;
                w.flush()?;
            }
            log.push(row);
            (loss_acc, correct_acc, seen_acc, steps_acc) = (0.0, 0, 0, 0);
        }
        if let Some(dir) = out_dir {
            if at(config.checkpoint_every) || last {
                let path = dir.join(checkpoint_file_name(step));
                trainer.checkpoint().save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome {
        steps: trainer.step_count(),
        net: trainer.net,
        log,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use crate::data::{LabelSet, Split};

    #[test]
    fn margin_loss_examples() {
        let p = MarginLossParams::default();
        assert_eq!(margin_loss(&[0.95, 0.05, 0.05], &[0], &p).unwrap(), 0.0);
        assert_abs_diff_eq!(margin_loss(&[0.0, 0.05], &[0], &p).unwrap(), 0.81, epsilon = 1e-15);
        assert!(margin_loss(&[0.5, 0.5], &[], &p).is_err());
        assert!(margin_loss(&[0.5, 0.5], &[2], &p).is_err());
        // negatives: 0.5 * (0.6 - 0.1)^2 = 0.125; positives at 0.95 contribute 0
        assert_abs_diff_eq!(margin_loss(&[0.95, 0.6, 0.95], &[0, 2], &p).unwrap(), 0.125, epsilon = 1e-15);
    }

    #[test]
    fn multi_label_accuracy() {
        assert!(prediction_correct(&[0.1, 0.9, 0.2], &[1]));
        assert!(!prediction_correct(&[0.1, 0.9, 0.2], &[2]));
        assert!(prediction_correct(&[0.8, 0.1, 0.7], &[2, 0]));
        assert!(!prediction_correct(&[0.8, 0.75, 0.7], &[2, 0]));
    }

    #[test]
    fn dropout_keep_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dropout_mask(10, 8, 1.0, DropoutMode::Capsule, &mut rng).is_none());
    }

    #[test]
    fn capsule_dropout_zeroes_whole_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = dropout_mask(200, 8, 0.5, DropoutMode::Capsule, &mut rng).unwrap();
        for i in 0..200 {
            let row = m.row(i);
            assert!(row.iter().all(|&x| x == row[0]));
            assert!(row[0] == 0.0 || row[0] == 2.0);
        }
    }

    #[test]
    fn dropout_rate_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let keep = 0.8;
        let trials = 10_000;
        let m = dropout_mask(trials, 1, keep, DropoutMode::Capsule, &mut rng).unwrap();
        let zeroed = m.data().iter().filter(|&&x| x == 0.0).count() as f64 / trials as f64;
        assert!((zeroed - (1.0 - keep)).abs() < 0.01, "zeroed fraction {zeroed}");
    }

    #[test]
    fn weight_decay_zero_is_noop() {
        let arch = crate::capsule::ArchConfig::desk_mnist();
        let p = Params::init(&arch, 0.05, 0);
        assert_eq!(weight_decay_penalty(&p, 0.0), 0.0);
        let mut g = p.clone();
        apply_weight_decay(&mut g, &p, 0.0);
        assert_eq!(g, p);
        let mut g = Params::zeros(&arch);
        apply_weight_decay(&mut g, &p, 1e-3);
        assert_abs_diff_eq!(g.routing_w.data()[5], 2e-3 * p.routing_w.data()[5], epsilon = 1e-18);
        assert_abs_diff_eq!(weight_decay_penalty(&p, 1e-3), 1e-3 * p.sum_squares(), epsilon = 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let arch = crate::capsule::ArchConfig::desk_mnist();
        let mut p = Params::zeros(&arch);
        let mut g = Params::zeros(&arch);
        g.conv1_b.data_mut()[0] = 3.0;
        g.conv1_b.data_mut()[1] = -0.01;
        let mut adam = Adam::new(OptimizerConfig::default(), &p);
        adam.step(&mut p, &g);
        assert_abs_diff_eq!(p.conv1_b.data()[0], -1e-3, epsilon = 1e-10);
        assert_abs_diff_eq!(p.conv1_b.data()[1], 1e-3, epsilon = 1e-8);
        assert_eq!(p.conv1_b.data()[2], 0.0);
        assert_abs_diff_eq!(adam.step_size(2000), 0.96e-3, epsilon = 1e-15);
        assert_abs_diff_eq!(adam.step_size(4000), 0.96 * 0.96e-3, epsilon = 1e-15);
    }

    #[test]
    fn checkpoint_averaging_arithmetic() {
        assert_abs_diff_eq!(average_error_rates(&[0.1, 0.3]).unwrap(), 0.2, epsilon = 1e-15);
        assert_eq!(average_error_rates(&[0.25]).unwrap(), 0.25);
        assert!(average_error_rates(&[]).is_err());
    }

    fn toy_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = (0..n * 12 * 12).map(|_| rng.random::<u8>()).collect();
        let labels = (0..n).map(|i| LabelSet::single((i % 3) as u8)).collect();
        Dataset::new("toy", Split::Train, 1, 12, 12, 3, pixels, labels).unwrap()
    }

    fn toy_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.apply_str(
            "input_size = 12\nconv1_channels = 3\nconv1_kernel = 3\nconv2_kernel = 3\nprim_channels = 2\n\
             prim_dim = 4\nnum_classes = 3\ndigit_dim = 5\nbatch_size = 4\nsteps = 3\nseed = 11",
        )
        .unwrap();
        cfg
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let ds = toy_dataset(8, 0);
        let mut cfg = toy_config();
        cfg.optimizer.learning_rate = 0.0;
        let out = train(&cfg, &ds, None, None).unwrap();
        let init = CapsNet::init(cfg.arch.clone(), cfg.activation, cfg.routing_init_std, cfg.seed).unwrap();
        assert_eq!(out.net, init);
    }

    #[test]
    fn same_seed_same_run() {
        let ds = toy_dataset(8, 0);
        let mut cfg = toy_config();
        cfg.regularizer = Regularizer::Dropout(0.7);
        let a = train(&cfg, &ds, Some(&ds), None).unwrap();
        let b = train(&cfg, &ds, Some(&ds), None).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.log, b.log);
        cfg.seed += 1;
        let c = train(&cfg, &ds, None, None).unwrap();
        assert_ne!(a.net, c.net);
    }

    #[test]
    fn writes_checkpoints_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(8, 0);
        let mut cfg = toy_config();
        cfg.steps = 5;
        cfg.checkpoint_every = 2;
        cfg.log_every = 2;
        let out = train(&cfg, &ds, Some(&ds), Some(dir.path())).unwrap();
        let names: Vec<String> = out.checkpoints.iter().map(|p| p.file_name().unwrap().to_string_lossy().into()).collect();
        assert_eq!(names, [checkpoint_file_name(2), checkpoint_file_name(4), checkpoint_file_name(5)]);
        let last = Checkpoint::load(out.checkpoints.last().unwrap()).unwrap();
        assert_eq!(last.net, out.net);
        assert_eq!(last.config_hash, cfg.hash());
        let csv = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("2,") && lines[1].ends_with(','));
        assert!(!lines[3].ends_with(','));
    }

    #[test]
    fn divergence_reports_last_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(8, 0);
        let mut cfg = toy_config();
        cfg.steps = 4;
        cfg.checkpoint_every = 1;
        let mut trainer = Trainer::new(&cfg, &ds).unwrap();
        trainer.train_step().unwrap();
        let path = dir.path().join(checkpoint_file_name(1));
        trainer.checkpoint().save(&path).unwrap();
        trainer.net.params.routing_w.data_mut()[0] = f64::NAN;
        match trainer.train_step() {
            Err(Error::Divergence { step, .. }) => assert_eq!(step, 2),
            other => panic!("expected divergence, got {other:?}"),
        }
        assert!(Checkpoint::load(&path).unwrap().net.params.routing_w.all_finite());

        // through the loop: blow the step size up until the loss overflows
        cfg.optimizer.learning_rate = 1e300;
        cfg.steps = 50;
        match train(&cfg, &ds, None, Some(dir.path())) {
            Err(Error::Divergence { last_checkpoint, step, .. }) => {
                let ck = last_checkpoint.expect("a checkpoint precedes divergence");
                assert!(step > 1);
                assert!(Checkpoint::load(&ck).unwrap().net.params.conv1_w.all_finite());
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.steps)),
        }
    }

    #[test]
    fn eval_of_identical_checkpoints() {
        let ds = toy_dataset(9, 3);
        let cfg = toy_config();
        let net = CapsNet::init(cfg.arch.clone(), cfg.activation, 0.05, 0).unwrap();
        let single = eval_checkpoint_averaged(std::slice::from_ref(&net), &ds).unwrap();
        assert_eq!(single, evaluate(&net, &ds).unwrap().error_rate());
        let triple = eval_checkpoint_averaged(&[net.clone(), net.clone(), net.clone()], &ds).unwrap();
        assert_abs_diff_eq!(triple, single, epsilon = 1e-15);
        assert_eq!(average_weights(&[net.clone(), net.clone()]).unwrap(), net);
        // datasets cannot be empty by construction
        assert!(matches!(ds.take(0), Err(Error::EmptyDataset)));
    }
}
