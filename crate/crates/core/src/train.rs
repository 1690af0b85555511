//! Noise-prediction training: random timesteps, forward noising in the
//! model's layout, MSE on the noise, Adam, and an EMA shadow of the weights.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::io::checkpoint::{self, Checkpoint, RngState, Section, TrainCounters};
use crate::io::{Dataset, Loader, RunConfig};
use crate::nn::{Forward, ParamStore};
use crate::tensor::Tensor;
use crate::unet::Model;

/// Smoothing of the running loss reported in the log.
pub const LOSS_EMA_DECAY: f64 = 0.99;

/// Stream of the run RNG (model initialization uses the seed directly).
const RUN_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Total optimizer steps of the run (resumed runs continue up to it).
    pub iterations: u64,
    pub ema_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Clip the global gradient norm to this value; off when absent.
    pub grad_clip: Option<f64>,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Steps between log records.
    pub log_every: u64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 128,
            iterations: 1000,
            ema_rate: 0.9999,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            checkpoint_every: 0,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            errs.push(format!("lr {} must be finite and non-negative", self.lr));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        if !(self.ema_rate > 0.0 && self.ema_rate < 1.0) {
            errs.push(format!("ema_rate {} outside (0, 1)", self.ema_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            errs.push(format!("adam_eps {} must be positive", self.adam_eps));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                errs.push(format!("grad_clip {c} must be positive"));
            }
        }
        if self.log_every == 0 {
            errs.push("log_every must be positive".into());
        }
        errs
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Bias-corrected Adam; `step` is the 1-based index of this update.
pub fn adam_update(param: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32], step: u64, h: &AdamParams) {
    assert!(step >= 1, "adam steps are 1-based");
    assert!(param.len() == grad.len() && grad.len() == m.len() && m.len() == v.len());
    let c1 = 1.0 - h.beta1.powf(step as f64);
    let c2 = 1.0 - h.beta2.powf(step as f64);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let mi = h.beta1 * m[i] as f64 + (1.0 - h.beta1) * g;
        let vi = h.beta2 * v[i] as f64 + (1.0 - h.beta2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let delta = h.lr * (mi / c1) / ((vi / c2).sqrt() + h.eps);
        param[i] = (param[i] as f64 - delta) as f32;
    }
}

/// `shadow <- rate * shadow + (1 - rate) * param`.
pub fn ema_update(shadow: &mut [f32], param: &[f32], rate: f64) {
    assert_eq!(shadow.len(), param.len());
    for (s, &p) in shadow.iter_mut().zip(param) {
        *s = (rate * *s as f64 + (1.0 - rate) * p as f64) as f32;
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub timesteps: Vec<usize>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Parameters that received no gradient this step.
    pub missing_grads: Vec<String>,
}

/// Full training state: model, optimizer moments, EMA weights, RNG and
/// data-order position.
pub struct Trainer {
    config: RunConfig,
    model: Model<f32>,
    ema: ParamStore<f32>,
    adam_m: Vec<Tensor<f32>>,
    adam_v: Vec<Tensor<f32>>,
    schedule: NoiseSchedule,
    step: u64,
    loss_ema: f64,
    loss_count: u64,
    rng: ChaCha8Rng,
    loader: Option<Loader>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.trainer.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.trainer.seed);
        rng.set_stream(RUN_STREAM);
        Ok(Self::assemble(config, model, None, None, rng)?)
    }

    fn assemble(
        config: RunConfig,
        model: Model<f32>,
        ema: Option<ParamStore<f32>>,
        moments: Option<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)>,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let schedule = config.schedule.build()?;
        let ema = ema.unwrap_or_else(|| model.params().clone());
        let zeros = || model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let (adam_m, adam_v) = moments.unwrap_or_else(|| (zeros(), zeros()));
        Ok(Self {
            config,
            model,
            ema,
            adam_m,
            adam_v,
            schedule,
            step: 0,
            loss_ema: 0.0,
            loss_count: 0,
            rng,
            loader: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn ema(&self) -> &ParamStore<f32> {
        &self.ema
    }

    pub fn adam_moments(&self) -> (&[Tensor<f32>], &[Tensor<f32>]) {
        (&self.adam_m, &self.adam_v)
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Bias-corrected running loss (0 before the first step).
    pub fn ema_loss(&self) -> f64 {
        if self.loss_count == 0 {
            0.0
        } else {
            self.loss_ema / (1.0 - LOSS_EMA_DECAY.powf(self.loss_count as f64))
        }
    }

    /// Noise-prediction loss without updating anything, for explicit inputs.
    pub fn loss_for(&self, params: &ParamStore<f32>, u0: &Tensor<f32>, ts: &[usize], eps: &Tensor<f32>) -> Result<f64> {
        let ut = q_sample_batch(&self.schedule, u0, ts, eps)?;
        let pred = self.model.predict_with(params, &ut, ts)?;
        let diff = pred.zip_map(eps, "loss", |a, b| a - b)?;
        Ok(diff.sum_sq() / diff.numel() as f64)
    }

    /// One optimizer step on a pixel batch `[B, 3, H, W]` in `[-1, 1]`.
    pub fn train_step(&mut self, batch: &Tensor<f32>) -> Result<StepStats> {
        let layout = self.config.model.layout();
        let u0 = layout.encode(batch)?;
        let b = u0.shape()[0];
        let t_max = self.schedule.timesteps();
        let ts: Vec<usize> = (0..b).map(|_| self.rng.random_range(1..=t_max)).collect();
        let eps = Tensor::<f32>::randn(u0.shape(), &mut self.rng);
        let ut = q_sample_batch(&self.schedule, &u0, &ts, &eps)?;

        let mut f = Forward::train(self.model.params(), Some(&mut self.rng));
        let x = f.graph.constant(ut);
        let step = self.step + 1;
        let context = |e: Error| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {step}, t = {ts:?}")),
            other => other,
        };
        let pred = self.model.net().forward(&mut f, x, &ts).map_err(context)?;
        let target = f.graph.constant(eps);
        let diff = f.graph.sub(pred, target)?;
        let sq = f.graph.mul(diff, diff)?;
        let loss_var = f.graph.mean_all(sq);
        let loss = f.graph.value(loss_var).data()[0] as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {loss} at step {}, t = {ts:?}",
                self.step + 1
            )));
        }
        f.graph.backward(loss_var)?;
        let grads = f.param_grads();
        drop(f);

        let names = self.model.params().names();
        let missing_grads = grads
            .iter()
            .zip(names)
            .filter(|(g, _)| g.is_none())
            .map(|(_, n)| n.clone())
            .collect();
        let mut grads: Vec<Tensor<f32>> = grads
            .into_iter()
            .zip(self.model.params().tensors())
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let grad_norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient norm {grad_norm} at step {}, t = {ts:?}",
                self.step + 1
            )));
        }
        if let Some(clip) = self.config.trainer.grad_clip {
            if grad_norm > clip {
                let scale = (clip / grad_norm) as f32;
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= scale);
                }
            }
        }

        self.step += 1;
        let hyper = self.config.trainer.adam();
        let rate = self.config.trainer.ema_rate;
        let params = self.model.params_mut().tensors_mut();
        for i in 0..params.len() {
            adam_update(
                params[i].data_mut(),
                grads[i].data(),
                self.adam_m[i].data_mut(),
                self.adam_v[i].data_mut(),
                self.step,
                &hyper,
            );
            ema_update(self.ema.tensors_mut()[i].data_mut(), params[i].data(), rate);
        }
        self.loss_ema = LOSS_EMA_DECAY * self.loss_ema + (1.0 - LOSS_EMA_DECAY) * loss;
        self.loss_count += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            timesteps: ts,
            grad_norm,
            missing_grads,
        })
    }

    /// Trains until `trainer.iterations` steps, drawing shuffled minibatches
    /// from `data`. Writes a log record every `log_every` steps (and at the
    /// last one) as `step loss ema_loss elapsed_ms`, and checkpoints to
    /// `checkpoint` every `checkpoint_every` steps and at the end. Returns
    /// the losses of the steps run.
    pub fn fit(&mut self, data: &Dataset, log: &mut dyn Write, checkpoint: Option<&Path>) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let (h, w) = data.image_dims();
        let size = self.config.model.image_size;
        if (h, w) != (size, size) {
            return Err(Error::InvalidArgument(format!(
                "dataset images are {w}x{h}, model expects {size}x{size}"
            )));
        }
        let mut loader = match self.loader.take() {
            Some(l) if l.order.len() == data.len() => l,
            Some(l) => {
                return Err(Error::InvalidArgument(format!(
                    "resumed loader covers {} images, dataset has {}",
                    l.order.len(),
                    data.len()
                )))
            }
            None => Loader::new(data.len(), &mut self.rng)?,
        };
        let start = Instant::now();
        let tc = self.config.trainer.clone();
        let mut losses = Vec::new();
        let result = (|| -> Result<()> {
            while self.step < tc.iterations {
                let batch = loader.next_batch(data, tc.batch_size, &mut self.rng)?;
                let stats = self.train_step(&batch)?;
                losses.push(stats.loss);
                if stats.step % tc.log_every == 0 || stats.step == tc.iterations {
                    writeln!(
                        log,
                        "{} {:.6} {:.6} {}",
                        stats.step,
                        stats.loss,
                        self.ema_loss(),
                        start.elapsed().as_millis()
                    )
                    .map_err(|e| Error::io("training log", e))?;
                }
                if let Some(path) = checkpoint {
                    if tc.checkpoint_every > 0 && stats.step % tc.checkpoint_every == 0 && stats.step < tc.iterations {
                        self.loader = Some(loader.clone());
                        self.to_checkpoint().save(path)?;
                    }
                }
            }
            Ok(())
        })();
        self.loader = Some(loader);
        result?;
        if let Some(path) = checkpoint {
            self.to_checkpoint().save(path)?;
        }
        Ok(losses)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let table = |name: &str, tensors: &[Tensor<f32>]| Section {
            name: name.to_string(),
            tensors: self.model.params().names().iter().cloned().zip(tensors.iter().cloned()).collect(),
        };
        Checkpoint {
            config: self.config.to_json(),
            sections: vec![
                table(checkpoint::PARAMS, self.model.params().tensors()),
                table(checkpoint::EMA, self.ema.tensors()),
                table(checkpoint::ADAM_M, &self.adam_m),
                table(checkpoint::ADAM_V, &self.adam_v),
            ],
            state: Some(TrainCounters {
                step: self.step,
                loss_ema: self.loss_ema,
                loss_count: self.loss_count,
                rng: RngState::capture(&self.rng),
                loader: self.loader.clone(),
            }),
        }
    }

    /// Restores a run. With `config`, its trainer section replaces the
    /// stored one (e.g. to extend `iterations`); model and schedule must
    /// match the checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint, config: Option<RunConfig>) -> Result<Self> {
        let stored = RunConfig::from_json(&ck.config)?;
        let config = match config {
            None => stored,
            Some(c) => {
                if c.model != stored.model || c.schedule != stored.schedule {
                    return Err(Error::InvalidArgument(
                        "resume config's model/schedule differ from the checkpoint's".into(),
                    ));
                }
                c.validate()?;
                c
            }
        };
        let model = Model::with_params(config.model.clone(), section_store(ck, checkpoint::PARAMS)?)?;
        let ema = match ck.section(checkpoint::EMA) {
            Some(_) => {
                let e = section_store(ck, checkpoint::EMA)?;
                Model::with_params(config.model.clone(), e.clone())?;
                Some(e)
            }
            None => None,
        };
        let moments = match (ck.section(checkpoint::ADAM_M), ck.section(checkpoint::ADAM_V)) {
            (Some(m), Some(v)) => {
                let take = |s: &Section| -> Result<Vec<Tensor<f32>>> {
                    let shapes_ok = s.tensors.len() == model.params().len()
                        && s.tensors.iter().zip(model.params().tensors()).all(|((_, a), b)| a.shape() == b.shape());
                    if !shapes_ok {
                        return Err(Error::InvalidArgument(format!("section {} does not match the model", s.name)));
                    }
                    Ok(s.tensors.iter().map(|(_, t)| t.clone()).collect())
                };
                Some((take(m)?, take(v)?))
            }
            _ => None,
        };
        let (rng, counters) = match &ck.state {
            Some(s) => (s.rng.restore(), Some(s.clone())),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.trainer.seed);
                rng.set_stream(RUN_STREAM);
                (rng, None)
            }
        };
        let mut t = Self::assemble(config, model, ema, moments, rng)?;
        if let Some(s) = counters {
            t.step = s.step;
            t.loss_ema = s.loss_ema;
            t.loss_count = s.loss_count;
            t.loader = s.loader;
        }
        Ok(t)
    }
}

/// Parameters of a checkpoint section as a store.
pub fn section_store(ck: &Checkpoint, name: &str) -> Result<ParamStore<f32>> {
    let section = ck
        .section(name)
        .ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no {name} section")))?;
    let mut store = ParamStore::new();
    for (n, t) in &section.tensors {
        store.add(n.clone(), t.clone())?;
    }
    Ok(store)
}

/// The run config and a model carrying either the EMA or the raw weights.
pub fn model_from_checkpoint(ck: &Checkpoint, use_ema: bool) -> Result<(RunConfig, Model<f32>)> {
    let config = RunConfig::from_json(&ck.config)?;
    let name = if use_ema && ck.section(checkpoint::EMA).is_some() {
        checkpoint::EMA
    } else {
        checkpoint::PARAMS
    };
    let model = Model::with_params(config.model.clone(), section_store(ck, name)?)?;
    Ok((config, model))
}
