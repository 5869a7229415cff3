//! The per-split training loop.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, ParamTable};
use crate::data::{AugmentationConfig, Dataset, FoldSplit};
use crate::error::{Error, Result};
use crate::model::{FpnModel, ModelConfig};
use crate::rng::Stream;
use crate::train::checkpoint::Checkpoint;
use crate::train::optim::{adam_step, AdamState};
use crate::train::TrainConfig;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub stopped: bool,
}

/// Trains one model configuration on one dataset.
///
/// Graphs are static per batch size, so the trainer keeps one per size it
/// meets (the full batch and the final partial one).
pub struct Trainer<'d> {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub augmentation: Option<AugmentationConfig>,
    pub class_weights: Vec<f64>,
    data: &'d Dataset,
    graphs: HashMap<usize, FpnModel>,
}

impl<'d> Trainer<'d> {
    pub fn new(
        model: ModelConfig,
        config: TrainConfig,
        augmentation: Option<AugmentationConfig>,
        class_weights: Vec<f64>,
        data: &'d Dataset,
    ) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        if let Some(a) = &augmentation {
            a.validate()?;
        }
        let [h, w, c] = model.backbone.input;
        if h != data.size || w != data.size || c != 1 {
            return Err(Error::Config(format!(
                "model input {h}×{w}×{c} does not match {}×{}×1 dataset images",
                data.size, data.size
            )));
        }
        if class_weights.len() != model.n_classes() {
            return Err(Error::Config(format!(
                "{} class weights for {} classes",
                class_weights.len(),
                model.n_classes()
            )));
        }
        Ok(Trainer {
            model,
            config,
            augmentation,
            class_weights,
            data,
            graphs: HashMap::new(),
        })
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    fn ensure_graph(&mut self, batch: usize) -> Result<()> {
        if !self.graphs.contains_key(&batch) {
            self.graphs.insert(batch, FpnModel::build(&self.model, batch)?);
        }
        Ok(())
    }

    /// Root stream of fold `fold`'s training run.
    pub fn stream(&self, fold: usize) -> Stream {
        Stream::root(self.config.seed).named("train").index(fold as u64)
    }

    /// A fresh checkpoint at epoch 0 for fold `fold`.
    pub fn start(&mut self, fold: usize) -> Result<Checkpoint<f32>> {
        self.ensure_graph(1)?;
        let stream = self.stream(fold);
        let params = self.graphs[&1].init_params(stream.named("init").key());
        Ok(Checkpoint {
            stream: Some(stream),
            schedule: Some(self.config.schedule()),
            optimizer: Some(AdamState::default()),
            ..Checkpoint::weights_only(self.model.clone(), params)
        })
    }

    /// Trains from `state` until early stopping or `max_epochs`, calling
    /// `on_epoch` after every epoch. Returns the final state, which carries
    /// the best-validation snapshot.
    pub fn fit(
        &mut self,
        split: &FoldSplit,
        fold: usize,
        state: Checkpoint<f32>,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Checkpoint<f32>> {
        if split.train.is_empty() {
            return Err(Error::Data(format!("fold {fold} has no training records")));
        }
        if state.model != self.model {
            return Err(Error::Checkpoint("checkpoint model config differs from the trainer's".into()));
        }
        let mut ck = state;
        let stream = ck.stream.ok_or_else(|| Error::Checkpoint("checkpoint has no training stream".into()))?;
        let mut schedule = ck.schedule.take().unwrap_or_else(|| self.config.schedule());
        let mut optimizer = ck.optimizer.take().unwrap_or_default();
        let adam = self.config.adam();
        let bs = self.config.batch_size;

        while ck.epoch < self.config.max_epochs && schedule.bad_epochs < schedule.early_stop_patience {
            let epoch = ck.epoch;
            let lr = schedule.lr;
            let mut order = split.train.clone();
            order.shuffle(&mut stream.named("shuffle").index(epoch as u64).rng());
            let aug_stream = stream.named("augment").index(epoch as u64);
            let mut total = 0.0;
            for (b, chunk) in order.chunks(bs).enumerate() {
                let images = self.data.batch(chunk, self.augmentation.as_ref().map(|a| (a, aug_stream)))?;
                let labels = self.data.labels(chunk);
                self.ensure_graph(chunk.len())?;
                let model = &self.graphs[&chunk.len()];
                let inputs = model.bindings(images, Some(&labels), &self.class_weights)?;
                let mode = Mode::Train(stream.named("dropout").index(epoch as u64).index(b as u64));
                let ev = model.graph.eval(&ck.params, &inputs, mode)?;
                total += f64::from(ev.value(model.loss).data()[0]) * chunk.len() as f64;
                let grads = ev.backward(model.loss)?;
                adam_step(&mut ck.params, &grads, &mut optimizer, lr, &adam)?;
            }
            let train_loss = total / split.train.len() as f64;
            let val_loss = if split.validation.is_empty() {
                train_loss
            } else {
                self.evaluate(&ck.params, &split.validation)?.1
            };
            if !val_loss.is_finite() {
                return Err(Error::Data(format!("non-finite validation loss at epoch {}", epoch + 1)));
            }
            let step = schedule.observe(val_loss);
            ck.epoch += 1;
            if step.improved {
                ck.best_params = Some(ck.params.clone());
                ck.best_val_loss = Some(val_loss);
                ck.best_epoch = Some(ck.epoch);
            }
            on_epoch(&EpochLog {
                fold,
                epoch: ck.epoch,
                train_loss,
                val_loss,
                lr,
                stopped: step.stop,
            });
        }
        ck.schedule = Some(schedule);
        ck.optimizer = Some(optimizer);
        Ok(ck)
    }

    /// Inference-mode class probabilities and the mean weighted loss over
    /// `indices`.
    pub fn evaluate(&mut self, params: &ParamTable<f32>, indices: &[usize]) -> Result<(Vec<Vec<f64>>, f64)> {
        if indices.is_empty() {
            return Err(Error::Data("nothing to evaluate".into()));
        }
        let mut probs = Vec::with_capacity(indices.len());
        let mut total = 0.0;
        for chunk in indices.chunks(self.config.batch_size) {
            let images = self.data.batch(chunk, None)?;
            let labels = self.data.labels(chunk);
            self.ensure_graph(chunk.len())?;
            let model = &self.graphs[&chunk.len()];
            let inputs = model.bindings(images, Some(&labels), &self.class_weights)?;
            let ev = model.graph.eval(params, &inputs, Mode::Infer)?;
            total += f64::from(ev.value(model.loss).data()[0]) * chunk.len() as f64;
            let p = ev.value(model.fusion.probs);
            let c = self.model.n_classes();
            probs.extend(p.data().chunks(c).map(|row| row.iter().map(|&v| f64::from(v)).collect()));
        }
        Ok((probs, total / indices.len() as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{patient_kfold, synth_generate};

    fn tiny() -> (Dataset, ModelConfig, TrainConfig) {
        let data = Dataset::from_synth(&synth_generate(6, 16, 1), 16);
        let mut model = ModelConfig::micro(2, 3);
        model.backbone.input = [16, 16, 1];
        model.backbone.blocks.truncate(3);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            max_epochs: 4,
            seed: 3,
            ..Default::default()
        };
        (data, model, cfg)
    }

    #[test]
    fn same_seed_same_curves_and_resume_is_exact() {
        let (data, model, cfg) = tiny();
        let plan = patient_kfold(&data.records, 2, 0).unwrap();
        let split = plan.split(&data.records, 0).unwrap();
        let aug = Some(AugmentationConfig::default());
        let run = |max_epochs: usize, from: Option<Checkpoint<f32>>| {
            let mut t = Trainer::new(model.clone(), TrainConfig { max_epochs, ..cfg.clone() }, aug.clone(), vec![0.3, 0.3, 0.4], &data).unwrap();
            let start = from.unwrap_or_else(|| t.start(0).unwrap());
            let mut logs = Vec::new();
            let ck = t.fit(&split, 0, start, |l| logs.push(l.clone())).unwrap();
            (ck, logs)
        };
        let (full, logs_a) = run(4, None);
        let (again, logs_b) = run(4, None);
        assert_eq!(logs_a, logs_b);
        assert_eq!(full, again);
        let (half, first) = run(2, None);
        let reloaded = Checkpoint::<f32>::from_bytes(&half.to_bytes().unwrap()).unwrap();
        let (resumed, second) = run(4, Some(reloaded));
        assert_eq!(resumed, full);
        assert_eq!([first, second].concat(), logs_a);
    }

    #[test]
    fn empty_training_fold_is_an_error() {
        let (data, model, cfg) = tiny();
        let mut t = Trainer::new(model, cfg, None, vec![1.0; 3], &data).unwrap();
        let start = t.start(0).unwrap();
        let split = FoldSplit {
            train: vec![],
            validation: vec![0],
            test: vec![1],
        };
        assert!(t.fit(&split, 0, start, |_| {}).is_err());
    }

    #[test]
    fn mismatched_input_size_is_rejected() {
        let (data, mut model, cfg) = tiny();
        model.backbone.input = [32, 32, 1];
        assert!(Trainer::new(model, cfg, None, vec![1.0; 3], &data).is_err());
    }
}
