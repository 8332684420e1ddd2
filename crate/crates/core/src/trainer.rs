//! AdamW with two learning-rate groups, warm-up plus cosine schedule, and the
//! deterministic training loop.

use std::f64::consts::PI;

use crate::dataset::PairRecord;
use crate::error::{ensure, Error, Result};
use crate::evaluation::{evaluate, fmt6, RetrievalMetrics};
use crate::math::SeededRng;
use crate::model::{GradientSet, ModelParameters, ModelSpec, ParamGroup, ParamName, DEFAULT_LOG_LOGIT_SCALE};
use crate::objectives::{backward, BatchNoise, LossBreakdown, Objective, PairBatch};
use crate::text_mass::{RadiusVariant, SamplingConfig, DEFAULT_TRIALS};
use crate::encoders::DEFAULT_DROPOUT;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const NOISE_STREAM: u64 = 0x4E4F_4953;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_head: f64,
    pub lr_adapter: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent warming up.
    pub warmup: f64,
    pub alpha: f64,
    pub seed: u64,
    pub dim: usize,
    pub concepts: usize,
    /// Sampled frames per video (T′).
    pub frames: usize,
    /// Best-of-M trials used for validation.
    pub trials: usize,
    /// Reparameterized draws per text per step.
    pub samples_per_text: usize,
    pub variant: RadiusVariant,
    pub frozen_theta: Option<f64>,
    pub adapters: bool,
    pub dropout: f64,
    /// 0 gives identical text and frame projections, 1 independent ones.
    pub tower_mismatch: f64,
    /// Evaluate on the test split after every epoch.
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 5,
            lr_head: 1e-5,
            lr_adapter: 1e-6,
            weight_decay: 0.2,
            warmup: 0.1,
            alpha: 1.2,
            seed: 0,
            dim: 32,
            concepts: 16,
            frames: 8,
            trials: DEFAULT_TRIALS,
            samples_per_text: 1,
            variant: RadiusVariant::Linear,
            frozen_theta: None,
            adapters: true,
            dropout: DEFAULT_DROPOUT,
            tower_mismatch: 0.3,
            validate: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.batch_size >= 1, || "batch size must be at least 1".into())?;
        ensure((0.0..1.0).contains(&self.warmup), || {
            format!("warm-up proportion must lie in [0, 1), got {}", self.warmup)
        })?;
        ensure(self.lr_head > 0.0 && self.lr_adapter > 0.0, || "learning rates must be positive".into())?;
        ensure(self.weight_decay >= 0.0, || "weight decay must be non-negative".into())?;
        ensure(self.alpha >= 0.0, || "alpha must be non-negative".into())?;
        ensure(self.trials >= 1 && self.samples_per_text >= 1, || "sample counts must be at least 1".into())?;
        ensure((0.0..1.0).contains(&self.dropout), || "dropout must lie in [0, 1)".into())?;
        ensure((0.0..=1.0).contains(&self.tower_mismatch), || "tower mismatch must lie in [0, 1]".into())?;
        Ok(())
    }

    pub fn model_spec(&self, mode: Objective) -> ModelSpec {
        ModelSpec {
            dim: self.dim,
            concepts: self.concepts,
            frames: self.frames,
            variant: self.variant,
            text_mass: mode != Objective::Baseline,
            adapters: self.adapters,
            dropout: self.dropout,
            tower_mismatch: self.tower_mismatch,
            log_logit_scale: DEFAULT_LOG_LOGIT_SCALE,
            frozen_theta: self.frozen_theta,
        }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            train_samples_per_text: self.samples_per_text,
            ..SamplingConfig::with_trials(self.trials)
        }
    }

    pub fn base_rate(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::BackboneAdapter => self.lr_adapter,
            ParamGroup::Head => self.lr_head,
        }
    }
}

/// Linear warm-up to the group's base rate over `warmup · total` steps, then
/// cosine decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig, group: ParamGroup) -> Result<f64> {
    ensure(total >= 1 && step <= total, || format!("step {step} outside schedule of {total} steps"))?;
    let base = cfg.base_rate(group);
    let warm = cfg.warmup * total as f64;
    let s = step as f64;
    if s < warm {
        return Ok(base * s / warm);
    }
    let progress = (s - warm) / (total as f64 - warm);
    Ok(base * 0.5 * (1.0 + (PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub head: f64,
    pub adapter: f64,
}

impl GroupRates {
    pub fn uniform(lr: f64) -> Self {
        Self { head: lr, adapter: lr }
    }

    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::BackboneAdapter => self.adapter,
            ParamGroup::Head => self.head,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<(ParamName, Vec<f64>)>,
    pub second: Vec<(ParamName, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(params: &ModelParameters) -> Self {
        let zeros: Vec<(ParamName, Vec<f64>)> = params
            .trainable()
            .into_iter()
            .map(|p| (p, vec![0.0; params.get(p).len()]))
            .collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    fn check_layout(&self, params: &ModelParameters) -> Result<()> {
        let names = params.trainable();
        let fits = |table: &[(ParamName, Vec<f64>)]| {
            table.len() == names.len()
                && table
                    .iter()
                    .zip(&names)
                    .all(|((n, v), &p)| *n == p && v.len() == params.get(p).len())
        };
        ensure(fits(&self.first) && fits(&self.second), || {
            "optimizer state does not match trainable parameters".into()
        })
    }
}

/// One decoupled-weight-decay Adam update. Decay uses the pre-update value
/// and is skipped for parameters that opt out (the logit scale).
pub fn adamw_step(
    params: &mut ModelParameters,
    grads: &GradientSet,
    state: &mut OptimizerState,
    rates: GroupRates,
    weight_decay: f64,
) -> Result<()> {
    grads.check_layout(params)?;
    state.check_layout(params)?;
    if !grads.is_finite() {
        return Err(Error::Divergence {
            step: state.step as usize,
            detail: "non-finite gradient".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((name, g), (_, m)), (_, v)) in grads.iter().zip(&mut state.first).zip(&mut state.second) {
        let lr = rates.get(name.group());
        let decay = if name.decays() { weight_decay } else { 0.0 };
        let values = params.get_mut(name);
        for k in 0..values.len() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            let old = values[k];
            values[k] = old - lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON) - lr * decay * old;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr_head: f64,
    pub lr_adapter: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Text-to-video and video-to-text metrics on the test split.
    pub validation: Option<[RetrievalMetrics; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub mode: Objective,
    pub steps_per_epoch: usize,
    /// Training pairs left out of every epoch by the partial final batch.
    pub dropped_per_epoch: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr_head,lr_adapter,l_ce,l_s,l_sup,l_total\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{:.6e},{:.6e},{},{},{},{}\n",
                s.step,
                s.epoch,
                s.lr_head,
                s.lr_adapter,
                fmt6(s.loss.l_ce),
                fmt6(s.loss.l_s),
                fmt6(s.loss.l_sup),
                fmt6(s.loss.l_total)
            ));
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = format!(
            "# mode={} steps_per_epoch={} dropped_per_epoch={}\nepoch,mean_loss,direction,r1,r5,r10,mdr,mnr\n",
            self.mode, self.steps_per_epoch, self.dropped_per_epoch
        );
        for e in &self.epochs {
            match &e.validation {
                Some(ms) => {
                    for m in ms {
                        out.push_str(&format!("{},{},{},{}\n", e.epoch, fmt6(e.mean_loss), m.direction, m.csv_fields()));
                    }
                }
                None => out.push_str(&format!("{},{},,,,,,\n", e.epoch, fmt6(e.mean_loss))),
            }
        }
        out
    }
}

/// Resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParameters,
    pub optimizer: OptimizerState,
    /// Keystream position of the training-noise generator.
    pub rng_position: (u64, u64),
}

pub struct Trainer {
    cfg: TrainConfig,
    mode: Objective,
    params: ModelParameters,
    optimizer: OptimizerState,
    rng: SeededRng,
    steps_per_epoch: usize,
    total_steps: usize,
    log: TrainLog,
}

impl Trainer {
    /// `train_len` is the number of training pairs (K).
    pub fn new(cfg: &TrainConfig, mode: Objective, train_len: usize) -> Result<Self> {
        let params = ModelParameters::init(&cfg.model_spec(mode), cfg.seed)?;
        let optimizer = OptimizerState::new(&params);
        let state = TrainState {
            params,
            optimizer,
            rng_position: (0, 0),
        };
        Self::resume(cfg, mode, train_len, state)
    }

    pub fn resume(cfg: &TrainConfig, mode: Objective, train_len: usize, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        ensure(train_len >= cfg.batch_size, || {
            format!("{train_len} training pairs cannot fill a batch of {}", cfg.batch_size)
        })?;
        state.optimizer.check_layout(&state.params)?;
        let steps_per_epoch = train_len / cfg.batch_size;
        let mut rng = SeededRng::keyed(cfg.seed, &[NOISE_STREAM]);
        rng.set_position(state.rng_position);
        Ok(Self {
            cfg: cfg.clone(),
            mode,
            params: state.params,
            optimizer: state.optimizer,
            rng,
            steps_per_epoch,
            total_steps: (cfg.epochs * steps_per_epoch).max(1),
            log: TrainLog {
                mode,
                steps_per_epoch,
                dropped_per_epoch: train_len % cfg.batch_size,
                steps: Vec::new(),
                epochs: Vec::new(),
            },
        })
    }

    pub fn params(&self) -> &ModelParameters {
        &self.params
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn into_log(self) -> TrainLog {
        self.log
    }

    /// Completed epochs, derived from the optimizer step count.
    pub fn epoch(&self) -> usize {
        self.optimizer.step as usize / self.steps_per_epoch
    }

    pub fn finished(&self) -> bool {
        self.epoch() >= self.cfg.epochs
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            rng_position: self.rng.position(),
        }
    }

    pub fn run_epoch(&mut self, train: &[PairRecord], test: &[PairRecord]) -> Result<()> {
        ensure(!self.finished(), || "all configured epochs have run".into())?;
        ensure(train.len() / self.cfg.batch_size == self.steps_per_epoch, || {
            "training split size changed since the trainer was built".into()
        })?;
        let epoch = self.epoch();
        let mut order: Vec<usize> = (0..train.len()).collect();
        SeededRng::keyed(self.cfg.seed, &[SHUFFLE_STREAM, epoch as u64]).shuffle(&mut order);
        let n = self.cfg.batch_size;
        let mut loss_sum = 0.0;
        for chunk in order.chunks_exact(n) {
            let step = self.optimizer.step as usize;
            let batch = PairBatch::new(
                chunk.iter().map(|&k| train[k].text.clone()).collect(),
                chunk.iter().map(|&k| train[k].video.clone()).collect(),
            )?;
            let noise = BatchNoise::draw(&self.params, n, self.cfg.samples_per_text, true, &mut self.rng);
            let (loss, grads) = backward(&batch, &self.params, self.mode, self.cfg.alpha, &noise)?;
            if !loss.l_total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("non-finite loss {loss:?}"),
                });
            }
            let rates = GroupRates {
                head: lr_at(step, self.total_steps, &self.cfg, ParamGroup::Head)?,
                adapter: lr_at(step, self.total_steps, &self.cfg, ParamGroup::BackboneAdapter)?,
            };
            adamw_step(&mut self.params, &grads, &mut self.optimizer, rates, self.cfg.weight_decay)?;
            if !self.params.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: "parameters became non-finite".into(),
                });
            }
            loss_sum += loss.l_total;
            self.log.steps.push(StepRecord {
                step,
                epoch,
                lr_head: rates.head,
                lr_adapter: rates.adapter,
                loss,
            });
        }
        let validation = if self.cfg.validate && !test.is_empty() {
            Some(evaluate(&self.params, test, &self.cfg.sampling(), self.params.text_mass, self.cfg.seed)?)
        } else {
            None
        };
        self.log.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / self.steps_per_epoch as f64,
            validation,
        });
        Ok(())
    }
}

/// Runs every configured epoch from a fresh initialization.
pub fn train(cfg: &TrainConfig, train: &[PairRecord], test: &[PairRecord], mode: Objective) -> Result<(TrainState, TrainLog)> {
    let mut trainer = Trainer::new(cfg, mode, train.len())?;
    while !trainer.finished() {
        trainer.run_epoch(train, test)?;
    }
    Ok((trainer.state(), trainer.into_log()))
}
