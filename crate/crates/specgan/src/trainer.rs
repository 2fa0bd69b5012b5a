//! Adversarial training loop.
//!
//! Each iteration performs, per batch:
//!
//! 1. generate fake spectrograms (detached; the generator sees no gradient),
//! 2. one discriminator update on the LS-GAN loss
//!    `L_d = MSE(1,C_r) + MSE(1,F_r) + MSE(0,C_f) + MSE(0,F_f)`,
//! 3. re-extract real-side features with the updated discriminator (no
//!    gradients; they act as constants),
//! 4. one generator update on
//!    `L_g = L_tts + lambda_a * L_a + lambda_f * L_f`, where the fake passes
//!    through the frozen discriminator,
//!
//! with batch losses averaged over samples. Both optimizers share the
//! learning-rate schedule: constant at `lr_start` until `decay_start_iter`,
//! then exponential decay reaching `lr_floor` at `total_iters` (clamped
//! below at the floor).

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{Corpus, SynthSample};
use crate::discriminator::{DiscOutput, Discriminator, Variant};
use crate::error::{Error, Result};
use crate::generator::{tts_loss, Generator};
use crate::optim::{OptimizerConfig, RAdamLookahead};
use crate::rng::mix;
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayMode {
    /// Constant until `decay_start_iter`, then decay to the floor at
    /// `total_iters`.
    AfterStart,
    /// Decay from iteration 0, reaching the floor at `decay_start_iter`.
    CompleteAtStart,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda_a: f64,
    pub lambda_f: f64,
    pub lambda_dur: f64,
    pub batch_size: usize,
    pub total_iters: u64,
    pub lr_start: f64,
    pub lr_floor: f64,
    pub decay_start_iter: u64,
    pub decay_mode: DecayMode,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Checkpoint cadence in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Desk-scale defaults; adversarial weights depend on the variant
    /// (0.2 / 2 for the U-Net discriminators, 1 / 10 otherwise).
    pub fn for_variant(variant: Variant) -> Self {
        let (lambda_a, lambda_f) = if variant.is_unet() {
            (0.2, 2.0)
        } else {
            (1.0, 10.0)
        };
        TrainConfig {
            lambda_a,
            lambda_f,
            lambda_dur: 0.02,
            batch_size: 4,
            total_iters: 2000,
            lr_start: 1e-3,
            lr_floor: 1e-5,
            decay_start_iter: 20_000,
            decay_mode: DecayMode::AfterStart,
            optimizer: OptimizerConfig::default(),
            seed: 1,
            checkpoint_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_a < 0.0 || self.lambda_f < 0.0 || self.lambda_dur < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.lr_floor > self.lr_start {
            return Err(Error::Config(format!(
                "lr floor {} exceeds lr start {}",
                self.lr_floor, self.lr_start
            )));
        }
        if self.batch_size == 0 || self.total_iters == 0 {
            return Err(Error::Config(
                "batch size and iteration count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate at a 1-based iteration index.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let (start, floor) = (cfg.lr_start, cfg.lr_floor);
    match cfg.decay_mode {
        DecayMode::AfterStart => {
            if iter <= cfg.decay_start_iter || cfg.total_iters <= cfg.decay_start_iter {
                return start;
            }
            let span = (cfg.total_iters - cfg.decay_start_iter) as f64;
            let kappa = (start / floor).ln() / span;
            (start * (-kappa * (iter - cfg.decay_start_iter) as f64).exp()).max(floor)
        }
        DecayMode::CompleteAtStart => {
            if cfg.decay_start_iter == 0 {
                return floor;
            }
            let kappa = (start / floor).ln() / cfg.decay_start_iter as f64;
            (start * (-kappa * iter as f64).exp()).max(floor)
        }
    }
}

/// Per-iteration losses. `l_spec`/`l_dur` are the components of `l_tts`;
/// the CSV stream carries the six spec'd columns plus the learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub iter: u64,
    pub l_d: f64,
    pub l_a: f64,
    pub l_f: f64,
    pub l_tts: f64,
    pub l_g: f64,
    pub l_spec: f64,
    pub l_dur: f64,
    pub lr: f64,
}

impl LossReport {
    /// `iter,L_d,L_a,L_f,L_tts,L_g,lr` with 9-significant-digit floats.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
            self.iter, self.l_d, self.l_a, self.l_f, self.l_tts, self.l_g, self.lr
        )
    }
}

/// LS-GAN discriminator loss; the fine-map terms are omitted for variants
/// without a fine map.
pub fn discriminator_loss(
    tape: &mut Tape,
    real: &DiscOutput,
    fake: &DiscOutput,
) -> Result<NodeId> {
    if real.fine.is_some() != fake.fine.is_some() || real.hidden.len() != fake.hidden.len() {
        return Err(Error::ShapeMismatch {
            op: "discriminator_loss",
            lhs: vec![real.hidden.len(), real.fine.is_some() as usize],
            rhs: vec![fake.hidden.len(), fake.fine.is_some() as usize],
        });
    }
    let ones_c = tape.full(tape.shape(real.coarse).to_vec().as_slice(), 1.0);
    let zeros_c = tape.full(tape.shape(fake.coarse).to_vec().as_slice(), 0.0);
    let mut loss = tape.mse(real.coarse, ones_c)?;
    if let Some(f_r) = real.fine {
        let ones_f = tape.full(tape.shape(f_r).to_vec().as_slice(), 1.0);
        let term = tape.mse(f_r, ones_f)?;
        loss = tape.add(loss, term)?;
    }
    let term = tape.mse(fake.coarse, zeros_c)?;
    loss = tape.add(loss, term)?;
    if let Some(f_f) = fake.fine {
        let zeros_f = tape.full(tape.shape(f_f).to_vec().as_slice(), 0.0);
        let term = tape.mse(f_f, zeros_f)?;
        loss = tape.add(loss, term)?;
    }
    Ok(loss)
}

/// Generator-side adversarial and feature-matching losses. The real-side
/// hidden features must already be constants on the tape (no gradient).
pub fn generator_adv_losses(
    tape: &mut Tape,
    fake: &DiscOutput,
    real_hidden: &[NodeId],
) -> Result<(NodeId, NodeId)> {
    if real_hidden.len() != fake.hidden.len() {
        return Err(Error::ShapeMismatch {
            op: "feature_matching",
            lhs: vec![real_hidden.len()],
            rhs: vec![fake.hidden.len()],
        });
    }
    let ones_c = tape.full(tape.shape(fake.coarse).to_vec().as_slice(), 1.0);
    let mut l_a = tape.mse(fake.coarse, ones_c)?;
    if let Some(f_f) = fake.fine {
        let ones_f = tape.full(tape.shape(f_f).to_vec().as_slice(), 1.0);
        let term = tape.mse(f_f, ones_f)?;
        l_a = tape.add(l_a, term)?;
    }

    let mut sum = None;
    for (&h_f, &h_r) in fake.hidden.iter().zip(real_hidden) {
        let term = tape.mae(h_f, h_r)?;
        sum = Some(match sum {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let sum = sum.expect("hidden list is non-empty");
    let l_f = tape.scale(sum, 1.0 / fake.hidden.len() as f64);
    Ok((l_a, l_f))
}

fn ensure_finite(value: f64, term: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            what: format!("loss term {term}"),
        })
    }
}

/// Owns models, optimizers and data for one training run.
pub struct TrainSession {
    pub run_config: RunConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub corpus: Corpus,
    gen_opt: RAdamLookahead,
    disc_opt: RAdamLookahead,
    iter: u64,
}

impl TrainSession {
    pub fn new(run_config: RunConfig) -> Result<Self> {
        run_config.validate()?;
        let corpus = Corpus::build(run_config.corpus.clone())?;
        let generator = Generator::build(
            run_config.generator.clone(),
            mix(run_config.train.seed, 11),
        )?;
        let discriminator = Discriminator::build(
            run_config.discriminator.clone(),
            mix(run_config.train.seed, 22),
        )?;
        let opt_cfg = run_config.train.optimizer.clone();
        let gen_opt = RAdamLookahead::new(opt_cfg.clone(), &generator.named_params());
        let disc_opt = RAdamLookahead::new(opt_cfg, &discriminator.named_params());
        Ok(TrainSession {
            run_config,
            generator,
            discriminator,
            corpus,
            gen_opt,
            disc_opt,
            iter: 0,
        })
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    /// One full train step over a batch of corpus indices.
    pub fn step(&mut self, batch: &[usize]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let cfg = self.run_config.train.clone();
        let iter = self.iter + 1;
        let lr = lr_at(iter, &cfg);
        let samples: Vec<SynthSample> = batch
            .iter()
            .map(|&i| self.corpus.get(i).cloned())
            .collect::<Result<_>>()?;
        let inv_b = 1.0 / samples.len() as f64;

        // fakes for the discriminator update, detached from the generator
        let fakes: Vec<_> = samples
            .iter()
            .map(|s| {
                self.generator
                    .generate(&s.tokens, Some(&s.durations))
                    .map(|(spec, _)| spec)
            })
            .collect::<Result<Vec<_>>>()?;

        // discriminator update
        let l_d = {
            let mut tape = Tape::new();
            let dbind = self.discriminator.bind(&mut tape, true)?;
            let mut sum = None;
            for (sample, fake) in samples.iter().zip(&fakes) {
                let real_in = tape.constant(sample.target.tensor());
                let fake_in = tape.constant(fake.tensor());
                let out_r = self.discriminator.forward(&mut tape, &dbind, real_in)?;
                let out_f = self.discriminator.forward(&mut tape, &dbind, fake_in)?;
                let term = discriminator_loss(&mut tape, &out_r, &out_f)?;
                sum = Some(match sum {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            let mean = tape.scale(sum.expect("non-empty batch"), inv_b);
            let l_d = ensure_finite(tape.item(mean), "L_d")?;
            tape.backward(mean)?;
            self.discriminator.assign_grads_from(&tape);
            let mut params = self.discriminator.named_params_mut();
            self.disc_opt.step(&mut params, lr)?;
            l_d
        };

        // generator update through the frozen (updated) discriminator; the
        // real-side passes ride on the same tape as constants, which is the
        // gradient-free feature re-extraction
        let mut tape = Tape::new();
        let gbind = self.generator.bind(&mut tape, true)?;
        let dbind = self.discriminator.bind(&mut tape, false)?;
        let (mut tts_sum, mut spec_sum, mut dur_sum, mut a_sum, mut f_sum) =
            (None, None, None, None, None);
        let push = |tape: &mut Tape, acc: &mut Option<NodeId>, term: NodeId| -> Result<()> {
            *acc = Some(match *acc {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
            Ok(())
        };
        for sample in &samples {
            let fwd = self
                .generator
                .forward(&mut tape, &gbind, &sample.tokens, &sample.durations)?;
            let tts = tts_loss(
                &mut tape,
                fwd.spec,
                &sample.target,
                fwd.dur_pred,
                &sample.durations,
                cfg.lambda_dur,
            )?;
            let out_f = self.discriminator.forward(&mut tape, &dbind, fwd.spec)?;
            let real_in = tape.constant(sample.target.tensor());
            let out_r = self.discriminator.forward(&mut tape, &dbind, real_in)?;
            let (l_a, l_f) = generator_adv_losses(&mut tape, &out_f, &out_r.hidden)?;
            push(&mut tape, &mut tts_sum, tts.l_tts)?;
            push(&mut tape, &mut spec_sum, tts.l_spec)?;
            push(&mut tape, &mut dur_sum, tts.l_dur)?;
            push(&mut tape, &mut a_sum, l_a)?;
            push(&mut tape, &mut f_sum, l_f)?;
        }
        let mean = |tape: &mut Tape, acc: Option<NodeId>| tape.scale(acc.expect("batch"), inv_b);
        let l_tts_m = mean(&mut tape, tts_sum);
        let l_spec_m = mean(&mut tape, spec_sum);
        let l_dur_m = mean(&mut tape, dur_sum);
        let l_a_m = mean(&mut tape, a_sum);
        let l_f_m = mean(&mut tape, f_sum);
        let a_weighted = tape.scale(l_a_m, cfg.lambda_a);
        let f_weighted = tape.scale(l_f_m, cfg.lambda_f);
        let partial = tape.add(l_tts_m, a_weighted)?;
        let l_g = tape.add(partial, f_weighted)?;

        let report = LossReport {
            iter,
            l_d,
            l_a: ensure_finite(tape.item(l_a_m), "L_a")?,
            l_f: ensure_finite(tape.item(l_f_m), "L_f")?,
            l_tts: ensure_finite(tape.item(l_tts_m), "L_tts")?,
            l_g: ensure_finite(tape.item(l_g), "L_g")?,
            l_spec: ensure_finite(tape.item(l_spec_m), "L_spec")?,
            l_dur: ensure_finite(tape.item(l_dur_m), "L_dur")?,
            lr,
        };
        tape.backward(l_g)?;
        self.generator.assign_grads_from(&tape);
        let mut params = self.generator.named_params_mut();
        self.gen_opt.step(&mut params, lr)?;

        self.iter = iter;
        Ok(report)
    }

    /// Runs remaining iterations, invoking `on_report` once per iteration
    /// and writing periodic plus final checkpoints under `ckpt_dir`.
    pub fn run<F>(&mut self, ckpt_dir: Option<&Path>, mut on_report: F) -> Result<()>
    where
        F: FnMut(&LossReport) -> Result<()>,
    {
        let total = self.run_config.train.total_iters;
        let every = self.run_config.train.checkpoint_every;
        let mut epoch = 0u64;
        'outer: while self.iter < total {
            let batches = self.corpus.batches(
                self.run_config.train.batch_size,
                mix(self.run_config.train.seed, 0xe70c_0000_u64.wrapping_add(epoch)),
            )?;
            for batch in batches {
                if self.iter >= total {
                    break 'outer;
                }
                let report = self.step(&batch)?;
                on_report(&report)?;
                if let Some(dir) = ckpt_dir {
                    if every > 0 && report.iter % every == 0 {
                        self.save_checkpoint(&dir.join(format!("checkpoint_{:06}", report.iter)))?;
                    }
                }
            }
            epoch += 1;
        }
        if let Some(dir) = ckpt_dir {
            self.save_checkpoint(&dir.join("checkpoint_final"))?;
        }
        Ok(())
    }

    /// Average discriminator loss over (real, fake) pairs with frozen
    /// weights; used to observe the effect of an update.
    pub fn eval_disc_loss(
        disc: &Discriminator,
        reals: &[&crate::spectrogram::Spectrogram],
        fakes: &[&crate::spectrogram::Spectrogram],
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let dbind = disc.bind(&mut tape, false)?;
        let mut sum = None;
        for (r, f) in reals.iter().zip(fakes) {
            let r_in = tape.constant(r.tensor());
            let f_in = tape.constant(f.tensor());
            let out_r = disc.forward(&mut tape, &dbind, r_in)?;
            let out_f = disc.forward(&mut tape, &dbind, f_in)?;
            let term = discriminator_loss(&mut tape, &out_r, &out_f)?;
            sum = Some(match sum {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        Ok(tape.item(sum.expect("non-empty")) / reals.len() as f64)
    }

    pub fn save_checkpoint(&self, stem: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::default();
        for (name, t) in self.generator.named_params() {
            ckpt.insert_tensor(name, t.shape().to_vec(), t.data().to_vec());
        }
        for (name, t) in self.discriminator.named_params() {
            ckpt.insert_tensor(name, t.shape().to_vec(), t.data().to_vec());
        }
        for (name, shape, data) in self.gen_opt.state_entries("opt.gen") {
            ckpt.insert_tensor(name, shape, data.to_vec());
        }
        for (name, shape, data) in self.disc_opt.state_entries("opt.disc") {
            ckpt.insert_tensor(name, shape, data.to_vec());
        }
        ckpt.insert_scalar("iter", self.iter);
        ckpt.insert_scalar("opt.gen.t", self.gen_opt.steps_taken());
        ckpt.insert_scalar("opt.disc.t", self.disc_opt.steps_taken());
        for (k, v) in self.run_config.to_pairs() {
            ckpt.insert_scalar(format!("cfg.{k}"), v);
        }
        ckpt.save(stem)
    }

    /// Restores parameters, optimizer state and the iteration counter from a
    /// checkpoint written by [`save_checkpoint`](Self::save_checkpoint).
    pub fn load_checkpoint_state(&mut self, stem: &Path) -> Result<()> {
        let ckpt = Checkpoint::load(stem)?;
        restore_params(&ckpt, self.generator.named_params_mut())?;
        restore_params(&ckpt, self.discriminator.named_params_mut())?;
        let gen_t = ckpt.scalar_parsed("opt.gen.t")?;
        self.gen_opt
            .load_state("opt.gen", gen_t, |key| {
                ckpt.tensors.get(key).map(|(_, d)| d.clone())
            })?;
        let disc_t = ckpt.scalar_parsed("opt.disc.t")?;
        self.disc_opt
            .load_state("opt.disc", disc_t, |key| {
                ckpt.tensors.get(key).map(|(_, d)| d.clone())
            })?;
        self.iter = ckpt.scalar_parsed("iter")?;
        Ok(())
    }
}

fn restore_params(
    ckpt: &Checkpoint,
    params: Vec<(String, &mut crate::tensor::Tensor)>,
) -> Result<()> {
    for (name, t) in params {
        let (shape, data) = ckpt.tensor(&name)?;
        if shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {shape:?}, expected {:?}",
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(data);
    }
    Ok(())
}

/// Models reconstructed from a checkpoint's embedded config and tensors.
pub struct LoadedModels {
    pub run_config: RunConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub iter: u64,
}

pub fn load_models(stem: &Path) -> Result<LoadedModels> {
    let ckpt = Checkpoint::load(stem)?;
    let mut pairs = std::collections::BTreeMap::new();
    for (k, v) in &ckpt.scalars {
        if let Some(key) = k.strip_prefix("cfg.") {
            pairs.insert(key.to_string(), v.clone());
        }
    }
    let run_config = RunConfig::from_kv(&pairs)?;
    let mut generator = Generator::build(
        run_config.generator.clone(),
        mix(run_config.train.seed, 11),
    )?;
    let mut discriminator = Discriminator::build(
        run_config.discriminator.clone(),
        mix(run_config.train.seed, 22),
    )?;
    restore_params(&ckpt, generator.named_params_mut())?;
    restore_params(&ckpt, discriminator.named_params_mut())?;
    let iter = ckpt.scalar_parsed("iter")?;
    Ok(LoadedModels {
        run_config,
        generator,
        discriminator,
        iter,
    })
}
