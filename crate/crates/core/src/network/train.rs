use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::cross_entropy_loss;
use super::metrics::{format_metric, MetricsReport};
use super::model::{Mode, Model, Task};
use super::optim::{adam_step, cosine_lr, AdamConfig, AdamState};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::geometry::{augment, PointCloud};
use crate::nn::BatchMoments;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub test_batch_size: usize,
    pub learning_rate: f64,
    /// Floor of the cosine schedule.
    pub lr_min: f64,
    pub adam: AdamConfig,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            test_batch_size: 16,
            learning_rate: 1e-3,
            lr_min: 1e-5,
            adam: AdamConfig::default(),
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Smaller batches and a larger step for per-point training, where one
    /// epoch holds few clouds.
    pub fn segmentation() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.test_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.lr_min > 0.0) || self.lr_min > self.learning_rate {
            return bad(format!(
                "need 0 < lr_min <= learning_rate, got {} and {}",
                self.lr_min, self.learning_rate
            ));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return bad(format!("invalid Adam settings {a:?}"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingLog {
    pub task: Task,
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn csv_header(task: Task) -> &'static str {
        match task {
            Task::Classify => "epoch,lr,train_loss,test_acc,test_f1",
            Task::Segment => "epoch,lr,train_loss,test_acc,test_f1,test_iou,test_dsc",
        }
    }

    pub fn csv_row(task: Task, r: &EpochRecord) -> String {
        let mut line = format!(
            "{},{},{},{},{}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.test.accuracy,
            format_metric(r.test.f1)
        );
        if task == Task::Segment {
            line.push_str(&format!(
                ",{},{}",
                format_metric(r.test.headline_iou()),
                format_metric(r.test.headline_dsc())
            ));
        }
        line
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::csv_header(self.task));
        out.push('\n');
        for r in &self.records {
            out.push_str(&Self::csv_row(self.task, r));
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Targets of one cloud: its class for classification, one label per point
/// for segmentation.
pub fn targets(task: Task, num_classes: usize, cloud: &PointCloud) -> Result<Vec<usize>> {
    let raw = match task {
        Task::Classify => vec![cloud
            .class_label
            .ok_or_else(|| Error::Argument("classification sample without a class label".into()))?],
        Task::Segment => cloud
            .point_labels()
            .ok_or_else(|| Error::Argument("segmentation sample without point labels".into()))?,
    };
    raw.into_iter()
        .map(|l| {
            usize::try_from(l)
                .ok()
                .filter(|&l| l < num_classes)
                .ok_or_else(|| Error::Argument(format!("label {l} outside [0, {num_classes})")))
        })
        .collect()
}

/// Mean loss of a batch, its gradient for every parameter in store order,
/// and the batch moments of each standardization layer.
pub fn batch_gradients(model: &Model, clouds: &[&PointCloud]) -> Result<(f64, Vec<Tensor>, Vec<BatchMoments>)> {
    let cfg = model.config();
    let mut labels = Vec::new();
    for c in clouds {
        labels.extend(targets(cfg.task, cfg.num_classes, c)?);
    }
    let mut tape = Tape::new();
    let params = model.params().bind(&mut tape);
    let pass = model.forward_on_tape(&mut tape, &params, clouds, Mode::Train)?;
    let loss = cross_entropy_loss(&mut tape, pass.logits, &labels)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let g = params
        .vars()
        .iter()
        .zip(model.params().values())
        .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
        .collect();
    Ok((value, g, pass.moments))
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().expect("logits have a class axis");
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Evaluation-mode predictions and the metrics they earn.
pub fn evaluate(model: &Model, clouds: &[PointCloud], batch_size: usize) -> Result<MetricsReport> {
    if clouds.is_empty() {
        return Err(Error::Argument("empty evaluation set".into()));
    }
    let cfg = model.config();
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    for chunk in clouds.chunks(batch_size.max(1)) {
        let refs: Vec<&PointCloud> = chunk.iter().collect();
        predicted.extend(argmax_rows(&model.predict(&refs)?));
        for c in chunk {
            truth.extend(targets(cfg.task, cfg.num_classes, c)?);
        }
    }
    Ok(MetricsReport::from_predictions(&predicted, &truth, cfg.num_classes))
}

/// Mini-batches of a shuffled order. A trailing batch of one sample joins the
/// previous one so every standardization sees at least two rows.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

pub fn train(model: &mut Model, train_set: &[PointCloud], test_set: &[PointCloud], cfg: &TrainConfig) -> Result<TrainingLog> {
    train_with(model, train_set, test_set, cfg, |_| {})
}

/// Trains with Adam and a per-epoch cosine schedule, evaluating on
/// `test_set` after every epoch. `on_epoch` sees each record as it is made.
pub fn train_with(
    model: &mut Model,
    train_set: &[PointCloud],
    test_set: &[PointCloud],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingLog> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    if test_set.is_empty() {
        return Err(Error::Argument("empty test set".into()));
    }
    let task = model.config().task;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::zeros_like(model.params().values());
    let mut step = 0u64;
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.learning_rate, cfg.lr_min);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, batch) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let clouds: Vec<PointCloud> = batch
                .iter()
                .map(|&i| {
                    let seed: u64 = rng.random();
                    if cfg.augment {
                        augment(&train_set[i], seed)
                    } else {
                        train_set[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&PointCloud> = clouds.iter().collect();
            let (loss, grads, moments) = batch_gradients(model, &refs)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss or gradient at epoch {}, batch {}",
                    epoch + 1,
                    b + 1
                )));
            }
            step += 1;
            adam_step(model.params_mut().values_mut(), &grads, &mut state, step, lr, &cfg.adam)?;
            model.commit_moments(&moments)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen as f64,
            test: evaluate(model, test_set, cfg.test_batch_size)?,
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok(TrainingLog { task, records })
}
