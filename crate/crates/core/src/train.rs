//! Deterministic training loop: letterbox/mosaic batches, detection loss,
//! Adam updates and resumable state.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{images_to_tensor, letterbox_annotated, mosaic4, AnnotatedImage};
use crate::detect::GroundTruth;
use crate::error::{Error, Result};
use crate::loss::{assign_targets, detection_loss, LossBreakdown, LossInputs, LossWeights};
use crate::model::checkpoint::{self, Checkpoint, TRAIN_PREFIX};
use crate::model::{Model, ModelVariant};
use crate::nn::{Mode, Session};
use crate::optim::Adam;
use crate::tensor::{Tape, Tensor};

/// Stream-selector salt separating epoch shuffles from data generation.
const EPOCH_SEED_SALT: u64 = 0x6762_685f_7472_6e00;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Build every training sample as a four-image mosaic.
    pub mosaic: bool,
    /// Fraction of the final epochs trained without mosaic.
    pub mosaic_off_fraction: f64,
    pub ratio_gate: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 16,
            lr: 0.001,
            seed: 0,
            mosaic: true,
            mosaic_off_fraction: 0.1,
            ratio_gate: 4.0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.mosaic_off_fraction) || !(self.ratio_gate > 1.0) {
            return Err(Error::Config("mosaic_off_fraction must be in [0, 1] and ratio_gate > 1".into()));
        }
        Ok(())
    }

    /// Whether 1-based `epoch` uses mosaic samples.
    pub fn mosaic_at(&self, epoch: usize) -> bool {
        let off = (self.epochs as f64 * self.mosaic_off_fraction).round() as usize;
        self.mosaic && epoch + off <= self.epochs
    }
}

/// Mean loss terms over the steps of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub box_: f64,
    pub obj: f64,
    pub cls: f64,
    /// Ground truths that no anchor accepted during the epoch.
    pub unmatched: usize,
}

pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub opts: TrainOptions,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochStats>,
    weights: LossWeights,
}

fn counter_tensor(v: u64) -> Tensor<f32> {
    Tensor::new(&[2], vec![(v >> 20) as f32, (v & 0xFFFFF) as f32]).expect("two values")
}

fn counter_value(t: &Tensor<f32>) -> Option<u64> {
    (t.numel() == 2).then(|| ((t.data()[0] as u64) << 20) | t.data()[1] as u64)
}

impl Trainer {
    pub fn new(variant: ModelVariant, opts: TrainOptions) -> Result<Self> {
        opts.validate()?;
        let model = Model::new(variant, opts.seed)?;
        Ok(Self::with_model(model, opts))
    }

    fn with_model(model: Model, opts: TrainOptions) -> Self {
        let adam = Adam::for_store(opts.lr, &model.store);
        let weights = LossWeights::for_heads(model.num_heads());
        Self {
            model,
            adam,
            opts,
            epoch: 0,
            history: Vec::new(),
            weights,
        }
    }

    /// Continue from a checkpoint written by [`Trainer::save`]; the epoch
    /// counter and optimizer state are restored. A checkpoint without
    /// training state starts at epoch 0 with fresh optimizer moments.
    pub fn resume(ck: Checkpoint, opts: TrainOptions) -> Result<Self> {
        opts.validate()?;
        let mut t = Self::with_model(ck.model, opts);
        let epoch_name = format!("{TRAIN_PREFIX}epoch");
        if let Some((_, e)) = ck.extra.iter().find(|(n, _)| *n == epoch_name) {
            t.epoch = counter_value(e).ok_or_else(|| Error::Config("malformed epoch counter".into()))? as usize;
            t.adam.load_tensors(&format!("{TRAIN_PREFIX}adam."), &ck.extra)?;
        }
        Ok(t)
    }

    pub fn state_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = vec![(format!("{TRAIN_PREFIX}epoch"), counter_tensor(self.epoch as u64))];
        out.extend(self.adam.to_tensors(&format!("{TRAIN_PREFIX}adam.")));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_with(&self.model, &self.state_tensors(), path)
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed ^ EPOCH_SEED_SALT);
        rng.set_stream(epoch as u64);
        rng
    }

    fn sample(&self, data: &[AnnotatedImage], i: usize, mosaic: bool, rng: &mut ChaCha8Rng) -> Result<AnnotatedImage> {
        let size = self.model.variant.input_size as u32;
        if mosaic {
            let picks: [usize; 3] = [
                rng.gen_range(0..data.len()),
                rng.gen_range(0..data.len()),
                rng.gen_range(0..data.len()),
            ];
            mosaic4([&data[i], &data[picks[0]], &data[picks[1]], &data[picks[2]]], size, rng)
        } else {
            Ok(letterbox_annotated(&data[i], size)?.0)
        }
    }

    /// One optimisation step on a prepared batch.
    pub fn step(&mut self, batch: &[AnnotatedImage]) -> Result<(LossBreakdown, usize)> {
        let v = &self.model.variant;
        let images: Vec<&image::GrayImage> = batch.iter().map(|s| &s.image).collect();
        let x = images_to_tensor(&images)?;
        let gts: Vec<Vec<GroundTruth>> = batch.iter().map(|s| s.boxes.clone()).collect();
        let strides = v.head_strides();
        let assignment = assign_targets(&gts, &v.anchors, strides, v.input_size, self.opts.ratio_gate)?;
        let inputs = LossInputs {
            gts: &gts,
            assignment: &assignment,
            anchors: &v.anchors,
            strides,
            weights: &self.weights,
        };
        // non-finite values surface as a divergence of the loss below
        let tape = Tape::new().with_finite_check(false);
        let mut s = Session::with_tape(&self.model.store, Mode::Train, tape);
        let xv = s.input(x, false);
        let heads = self.model.forward(&mut s, xv)?;
        let (loss, breakdown) = detection_loss(&mut s.tape, &heads, &inputs)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch + 1,
                step: 0,
                loss: breakdown.total,
            });
        }
        let mut grads = s.tape.backward(loss)?;
        let param_grads = s.param_grads(&mut grads);
        let bn = s.take_bn_updates();
        drop(s);
        self.adam.update_store(&mut self.model.store, &param_grads)?;
        self.model.store.apply_bn_updates(&bn);
        Ok((breakdown, assignment.unmatched.len()))
    }

    /// Mean loss over `data` (letterboxed, batch-norm running statistics,
    /// no parameter update).
    pub fn eval_loss(&self, data: &[AnnotatedImage]) -> Result<LossBreakdown> {
        let v = &self.model.variant;
        let size = v.input_size as u32;
        let mut sums = [0.0f64; 4];
        let mut n = 0usize;
        for chunk in data.chunks(self.opts.batch_size) {
            let batch = chunk
                .iter()
                .map(|s| Ok(letterbox_annotated(s, size)?.0))
                .collect::<Result<Vec<_>>>()?;
            let images: Vec<&image::GrayImage> = batch.iter().map(|s| &s.image).collect();
            let gts: Vec<Vec<GroundTruth>> = batch.iter().map(|s| s.boxes.clone()).collect();
            let heads = crate::infer::forward_heads(&self.model, &images)?;
            let assignment = assign_targets(&gts, &v.anchors, v.head_strides(), v.input_size, self.opts.ratio_gate)?;
            let inputs = LossInputs {
                gts: &gts,
                assignment: &assignment,
                anchors: &v.anchors,
                strides: v.head_strides(),
                weights: &self.weights,
            };
            let refs: Vec<&Tensor<f32>> = heads.iter().collect();
            let (b, _) = crate::loss::loss_and_grads(&refs, &inputs)?;
            for (acc, x) in sums.iter_mut().zip([b.total, b.box_, b.obj, b.cls]) {
                *acc += x * chunk.len() as f64;
            }
            n += chunk.len();
        }
        let n = n.max(1) as f64;
        Ok(LossBreakdown {
            total: sums[0] / n,
            box_: sums[1] / n,
            obj: sums[2] / n,
            cls: sums[3] / n,
        })
    }

    /// Train one epoch over `data` (shuffled, mosaic per schedule).
    pub fn train_epoch(&mut self, data: &[AnnotatedImage]) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let epoch = self.epoch + 1;
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mosaic = self.opts.mosaic_at(epoch);
        let mut sums = [0.0f64; 4];
        let mut steps = 0;
        let mut unmatched = 0;
        for chunk in order.chunks(self.opts.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| self.sample(data, i, mosaic, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let (b, u) = self.step(&batch).map_err(|e| match e {
                Error::Diverged { loss, .. } => Error::Diverged {
                    epoch,
                    step: steps + 1,
                    loss,
                },
                e => e,
            })?;
            unmatched += u;
            for (acc, v) in sums.iter_mut().zip([b.total, b.box_, b.obj, b.cls]) {
                *acc += v;
            }
            steps += 1;
        }
        if unmatched > 0 {
            log::warn!("epoch {epoch}: {unmatched} ground truths matched no anchor");
        }
        let n = steps as f64;
        let stats = EpochStats {
            epoch,
            steps,
            loss: sums[0] / n,
            box_: sums[1] / n,
            obj: sums[2] / n,
            cls: sums[3] / n,
            unmatched,
        };
        self.epoch = epoch;
        self.history.push(stats);
        Ok(stats)
    }

    /// Train until `opts.epochs` epochs are complete, calling `on_epoch`
    /// after each one.
    pub fn fit(&mut self, data: &[AnnotatedImage], mut on_epoch: impl FnMut(&Self, &EpochStats) -> Result<()>) -> Result<()> {
        while self.epoch < self.opts.epochs {
            let stats = self.train_epoch(data)?;
            on_epoch(self, &stats)?;
        }
        Ok(())
    }
}

/// Whether the mean of every `window`-epoch block is strictly below the
/// mean of the block before it.
pub fn windowed_decreasing(losses: &[f64], window: usize) -> bool {
    let means: Vec<f64> = losses
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect();
    means.windows(2).all(|w| w[1] < w[0])
}
