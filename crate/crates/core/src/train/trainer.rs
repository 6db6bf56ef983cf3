//! The training loop, checkpoints and evaluation.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::activation::FittingErrors;
use crate::error::{Error, Result};
use crate::input::Normalization;
use crate::network::{argmax, Model, StepOutput};
use crate::serialize::save_mixtures;
use crate::train::config::TrainConfig;
use crate::train::data::{epoch_order, normalize_splits, Dataset};
use crate::train::optim::{Adam, PlateauScheduler};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.tsv";
pub const BEST_CHECKPOINT: &str = "best.json";
pub const LAST_CHECKPOINT: &str = "last.json";

/// Everything needed to continue a run: the model (kernel factors, not
/// materialized covariances), optimizer and scheduler state and counters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub scheduler: PlateauScheduler,
    pub learning_rate: f64,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub best_accuracy: f64,
    pub normalization: Normalization,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", c.version)));
        }
        c.model.spec.validate()?;
        if c.model.param_count() != c.model.params().len() {
            return Err(Error::Format("checkpoint parameter count mismatch".into()));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Eval-mode accuracy, mean NLL and confusion matrix over `data`.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if data.classes != model.spec.classes {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} classes, model {}",
            data.classes, model.spec.classes
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut confusion = vec![vec![0; data.classes]; data.classes];
    let mut nll = 0.0;
    let order: Vec<usize> = (0..data.len()).collect();
    for batch in data.batches(&order, batch_size)? {
        let lp = model.forward(&batch.inputs)?;
        for (row, &l) in lp.iter().zip(&batch.labels) {
            confusion[l][argmax(row)] += 1;
            nll -= row[l];
        }
    }
    let correct: usize = (0..data.classes).map(|c| confusion[c][c]).sum();
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        loss: nll / data.len() as f64,
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test: EvalReport,
    pub learning_rate: f64,
    /// Mean fitting errors per layer on the first test sample.
    pub rmse: Vec<FittingErrors>,
}

impl EpochMetrics {
    /// `epoch\tsplit\tmetric\tvalue` lines.
    pub fn log_lines(&self) -> Vec<String> {
        let e = self.epoch;
        let mut v = vec![
            format!("{e}\ttrain\tloss\t{}", self.train_loss),
            format!("{e}\ttrain\taccuracy\t{}", self.train_accuracy),
            format!("{e}\ttrain\tlearning_rate\t{}", self.learning_rate),
            format!("{e}\ttest\tloss\t{}", self.test.loss),
            format!("{e}\ttest\taccuracy\t{}", self.test.accuracy),
        ];
        for (i, r) in self.rmse.iter().enumerate() {
            v.push(format!("{e}\ttest\trmse_all_layer{i}\t{}", r.all));
            v.push(format!("{e}\ttest\trmse_relu_layer{i}\t{}", r.relu));
            v.push(format!("{e}\ttest\trmse_reduction_layer{i}\t{}", r.reduction));
        }
        v
    }
}

pub struct Trainer {
    pub state: Checkpoint,
    pub train: Dataset,
    pub test: Dataset,
    out: Option<PathBuf>,
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    /// Normalizes both splits with the training constants and initializes
    /// the model from the config seed. Nothing is written unless `out` is set.
    pub fn new(config: TrainConfig, mut train: Dataset, mut test: Dataset, out: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        if train.classes != test.classes || train.inputs.dims() != test.inputs.dims() {
            return Err(Error::ShapeMismatch("train and test splits disagree".into()));
        }
        let normalization = normalize_splits(&mut train, &mut [&mut test])?;
        let (_, f, n) = train.inputs.shape();
        let mut spec = config.model.spec(train.inputs.dims(), n, train.classes);
        spec.input_channels = f;
        if let Some(l) = spec.layers.first_mut() {
            l.f_in = f;
        }
        let model = Model::new(spec, config.seed)?;
        let state = Checkpoint {
            version: CHECKPOINT_VERSION,
            adam: Adam::new(model.param_count()),
            scheduler: PlateauScheduler::new(config.scheduler.factor, config.scheduler.patience, config.scheduler.min_lr),
            learning_rate: config.learning_rate,
            epoch: 0,
            step: 0,
            best_accuracy: f64::NEG_INFINITY,
            normalization,
            model,
            config,
        };
        Self::with_state(state, train, test, out, false)
    }

    /// Continues from `state`; the raw splits are normalized with the stored
    /// constants.
    pub fn resume(state: Checkpoint, train: Dataset, test: Dataset, out: Option<PathBuf>) -> Result<Self> {
        Self::with_state(state, train, test, out, true)
    }

    fn with_state(mut state: Checkpoint, mut train: Dataset, mut test: Dataset, out: Option<PathBuf>, raw: bool) -> Result<Self> {
        if raw {
            train.inputs = state.normalization.apply(&train.inputs)?;
            test.inputs = state.normalization.apply(&test.inputs)?;
        }
        if train.classes != state.model.spec.classes {
            return Err(Error::ShapeMismatch("dataset classes differ from the model".into()));
        }
        if state.best_accuracy.is_nan() {
            state.best_accuracy = f64::NEG_INFINITY;
        }
        if let Some(dir) = &out {
            fs::create_dir_all(dir)?;
        }
        let pool = match state.config.threads {
            0 => None,
            n => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?,
            ),
        };
        Ok(Trainer {
            state,
            train,
            test,
            out,
            pool,
        })
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    pub fn model(&self) -> &Model {
        &self.state.model
    }

    /// Loss and gradient of one batch at the current parameters, without
    /// updating anything.
    pub fn evaluate_step(&self, batch: &Dataset) -> Result<StepOutput> {
        let wd = self.state.config.weight_decay_scale * self.state.learning_rate;
        self.install(|| self.state.model.loss_and_grad(&batch.inputs, &batch.labels, true, wd))
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &Dataset) -> Result<StepOutput> {
        let out = self.evaluate_step(batch)?;
        if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
            let dump = self.dump_batch(batch);
            return Err(Error::NonFiniteLoss {
                step: self.state.step,
                dump,
            });
        }
        let mut p = self.state.model.params();
        self.state.adam.update(&mut p, &out.grad, self.state.learning_rate)?;
        self.state.model.set_params(&p)?;
        if let Some(s) = &out.bn_stats {
            self.state.model.bn.update_running(s);
        }
        self.state.step += 1;
        Ok(out)
    }

    fn dump_batch(&self, batch: &Dataset) -> Option<PathBuf> {
        let dir = self.out.as_ref()?;
        let path = dir.join(format!("nonfinite_step{}.gm", self.state.step));
        let labels = dir.join(format!("nonfinite_step{}.labels.json", self.state.step));
        let ok = save_mixtures(&path, &batch.inputs).is_ok()
            && serde_json::to_vec(&batch.labels).ok().map(|b| fs::write(&labels, b).is_ok()) == Some(true);
        ok.then_some(path)
    }

    /// Batches of the next epoch in training order.
    pub fn next_epoch_batches(&self) -> Result<Vec<Dataset>> {
        let order = epoch_order(self.train.len(), self.state.config.seed, self.state.epoch);
        self.train.batches(&order, self.state.config.batch_size)
    }

    /// Mean fitting errors per layer over the channels of test sample 0.
    pub fn layer_rmse(&self) -> Result<Vec<FittingErrors>> {
        let n = self.state.config.rmse_points;
        if n == 0 || self.test.is_empty() {
            return Ok(Vec::new());
        }
        let sample = self.test.inputs.sample(0)?;
        let stages = self.install(|| self.state.model.stages(&sample, 0))?;
        stages
            .iter()
            .map(|st| {
                let f = st.convolved.channels();
                let mut acc = FittingErrors {
                    all: 0.0,
                    relu: 0.0,
                    reduction: 0.0,
                };
                for c in 0..f {
                    let e = st.fitting_errors(0, c, n, self.state.config.seed.wrapping_add(c as u64))?;
                    acc.all += e.all / f as f64;
                    acc.relu += e.relu / f as f64;
                    acc.reduction += e.reduction / f as f64;
                }
                Ok(acc)
            })
            .collect()
    }

    /// Trains one epoch, evaluates, steps the scheduler, and writes the log
    /// and checkpoints when an output directory is set.
    pub fn train_epoch(&mut self) -> Result<EpochMetrics> {
        let batches = self.next_epoch_batches()?;
        let mut loss = 0.0;
        let mut correct = 0;
        for b in &batches {
            let out = self.step(b)?;
            loss += out.nll * b.len() as f64;
            correct += out.log_probs.iter().zip(&b.labels).filter(|(r, &l)| argmax(r) == l).count();
        }
        let n = self.train.len() as f64;
        let batch_size = self.state.config.batch_size;
        let test = self.install(|| evaluate(&self.state.model, &self.test, batch_size))?;
        let rmse = self.layer_rmse()?;
        self.state.epoch += 1;
        let metrics = EpochMetrics {
            epoch: self.state.epoch,
            train_loss: loss / n,
            train_accuracy: correct as f64 / n,
            test,
            learning_rate: self.state.learning_rate,
            rmse,
        };
        self.state.learning_rate = self.state.scheduler.observe(metrics.test.accuracy, self.state.learning_rate);
        let improved = metrics.test.accuracy > self.state.best_accuracy;
        if improved {
            self.state.best_accuracy = metrics.test.accuracy;
        }
        if let Some(dir) = &self.out {
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join(METRICS_FILE))?;
            for l in metrics.log_lines() {
                writeln!(f, "{l}")?;
            }
            self.state.save(&dir.join(LAST_CHECKPOINT))?;
            if improved {
                self.state.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        log::info!(
            "epoch {} loss {:.4} train acc {:.4} test acc {:.4} lr {:.2e}",
            metrics.epoch,
            metrics.train_loss,
            metrics.train_accuracy,
            metrics.test.accuracy,
            metrics.learning_rate
        );
        Ok(metrics)
    }

    /// Trains until the configured epoch count is reached.
    pub fn run(&mut self) -> Result<Vec<EpochMetrics>> {
        if self.state.epoch == 0 {
            if let Some(dir) = &self.out {
                File::create(dir.join(METRICS_FILE))?;
            }
        }
        let mut all = Vec::new();
        while self.state.epoch < self.state.config.epochs {
            all.push(self.train_epoch()?);
        }
        Ok(all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::config::ModelConfig;
    use crate::train::data::toy_splits;

    fn small_config(threads: usize) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            rmse_points: 50,
            threads,
            model: ModelConfig {
                channels: vec![2],
                kernel_components: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn evaluate_confusion_and_batch_invariance() {
        let (tr, te) = toy_splits(12, 9, 1).unwrap();
        let t = Trainer::new(small_config(1), tr, te, None).unwrap();
        let a = evaluate(t.model(), &t.test, 1).unwrap();
        let b = evaluate(t.model(), &t.test, 32).unwrap();
        assert_eq!(a, b);
        let rows: Vec<usize> = a.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(rows, t.test.class_counts());
    }

    #[test]
    fn resume_reproduces_the_next_step() {
        let (tr, te) = toy_splits(16, 6, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(1);
        cfg.epochs = 1;
        let mut t = Trainer::new(cfg, tr.clone(), te.clone(), Some(dir.path().to_path_buf())).unwrap();
        t.run().unwrap();
        let next = t.next_epoch_batches().unwrap();
        let expected = t.step(&next[0]).unwrap().loss;

        let ck = Checkpoint::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(ck.epoch, 1);
        let mut r = Trainer::resume(ck, tr, te, None).unwrap();
        let got = r.step(&r.next_epoch_batches().unwrap()[0]).unwrap().loss;
        assert_eq!(got.to_bits(), expected.to_bits());
    }

    #[test]
    fn log_lines_have_four_fields_and_rising_epochs() {
        let (tr, te) = toy_splits(12, 6, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(small_config(1), tr, te, Some(dir.path().to_path_buf())).unwrap();
        let m = t.run().unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].rmse.len(), 2);
        let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let mut last = 0;
        for line in text.lines() {
            let f: Vec<&str> = line.split('\t').collect();
            assert_eq!(f.len(), 4, "{line}");
            let e: usize = f[0].parse().unwrap();
            assert!(e >= last);
            last = e;
            f[3].parse::<f64>().unwrap();
        }
        assert!(dir.path().join(BEST_CHECKPOINT).exists());
    }

    #[test]
    fn non_finite_loss_dumps_the_batch() {
        let (tr, te) = toy_splits(6, 3, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(small_config(1), tr, te, Some(dir.path().to_path_buf())).unwrap();
        t.state.model.bn.gamma[0] = f64::NAN;
        let b = t.next_epoch_batches().unwrap().remove(0);
        match t.step(&b) {
            Err(Error::NonFiniteLoss { step: 0, dump: Some(p) }) => {
                assert_eq!(crate::serialize::load_mixtures(&p).unwrap().batch(), b.len());
            }
            other => panic!("{:?}", other.map(|o| o.loss)),
        }
    }

    #[test]
    fn constant_labels_are_learned() {
        let (mut tr, mut te) = toy_splits(64, 6, 5).unwrap();
        tr.labels = vec![1; 64];
        te.labels = vec![1; 6];
        let mut cfg = small_config(1);
        cfg.epochs = 3;
        cfg.learning_rate = 0.1;
        cfg.rmse_points = 0;
        let mut t = Trainer::new(cfg, tr, te, None).unwrap();
        let m = t.run().unwrap();
        assert!(m[2].train_accuracy >= 0.99, "{:?}", m.iter().map(|x| x.train_accuracy).collect::<Vec<_>>());
    }
}
