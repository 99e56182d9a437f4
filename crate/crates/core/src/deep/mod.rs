//! Fully connected Γ-nets trained from prioritized n-step replay against a
//! periodically synchronized target network.

mod adam;
mod net;
mod replay;

pub use adam::Adam;
pub use net::{
    Activation, Architecture, Cache, DeepGammaNet, EmbeddingKind, InitMode, InputSpec,
};
pub use replay::{NStepSample, PrioritizedReplay, ReplayConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Transition;
use crate::error::{Error, Result};
use crate::timescale::{Timescale, TimescaleInputMode, TimescaleSetSpec};

/// n-step TD error in value space.
///
/// `cumulants` are `C_{t+1}..C_{t+m}`; `bootstrap` is the target value at
/// `S_{t+m}`, or `None` when the window ended in a terminal. With `scaling`
/// the error is multiplied by `1 - gamma`.
pub fn nstep_scaled_delta(
    cumulants: &[f64],
    bootstrap: Option<f64>,
    current: f64,
    ts: Timescale,
    scaling: bool,
) -> Result<f64> {
    if cumulants.is_empty() {
        return Err(Error::Range("empty n-step window".into()));
    }
    let g = ts.gamma();
    let (ret, disc) = discounted(cumulants, g);
    let delta = ret + disc * bootstrap.unwrap_or(0.0) - current;
    Ok(if scaling { ts.scale() * delta } else { delta })
}

/// n-step TD error in the network's output space. Under loss scaling the
/// outputs are `f = (1 - gamma) V` and the cumulants are scaled instead.
pub fn output_space_delta(
    cumulants: &[f64],
    bootstrap_out: Option<f64>,
    current_out: f64,
    ts: Timescale,
    scaling: bool,
) -> f64 {
    let (ret, disc) = discounted(cumulants, ts.gamma());
    let ret = if scaling { ts.scale() * ret } else { ret };
    ret + disc * bootstrap_out.unwrap_or(0.0) - current_out
}

/// `(sum_i gamma^i C_{i+1}, gamma^m)`
fn discounted(cumulants: &[f64], gamma: f64) -> (f64, f64) {
    let mut ret = 0.0;
    let mut disc = 1.0;
    for c in cumulants {
        ret += disc * c;
        disc *= gamma;
    }
    (ret, disc)
}

/// Loss over a batch tiled with every timescale.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    /// Mean squared error over all `samples x timescales` terms.
    pub mean: f64,
    /// Errors indexed `[sample][timescale]`.
    pub deltas: Vec<Vec<f64>>,
}

impl BatchLoss {
    pub fn terms(&self) -> usize {
        self.deltas.iter().map(Vec::len).sum()
    }

    /// Largest squared error across timescales, per sample.
    pub fn max_squared(&self) -> Vec<f64> {
        self.deltas
            .iter()
            .map(|d| d.iter().map(|x| x * x).fold(0.0, f64::max))
            .collect()
    }
}

/// Computes the tiled batch loss and, if `grad` is given, accumulates its
/// gradient with respect to the online parameters. Bootstrap values come
/// from `target`, which receives no gradient.
pub fn batch_loss(
    online: &DeepGammaNet,
    target: &DeepGammaNet,
    samples: &[NStepSample],
    timescales: &[Timescale],
    mut grad: Option<&mut [f64]>,
) -> Result<BatchLoss> {
    let n_terms = samples.len() * timescales.len();
    if n_terms == 0 {
        return Err(Error::Range("empty batch".into()));
    }
    let scaling = online.loss_scaling();
    let mut cache = Cache::default();
    let mut boot_cache = Cache::default();
    let mut sum = 0.0;
    let mut deltas = Vec::with_capacity(samples.len());
    for s in samples {
        let mut row = Vec::with_capacity(timescales.len());
        for &ts in timescales {
            let current = online.forward_cached(&s.phi, ts, &mut cache)?;
            let boot = match &s.bootstrap {
                Some(next) => Some(target.forward_cached(next, ts, &mut boot_cache)?),
                None => None,
            };
            let delta = output_space_delta(&s.cumulants, boot, current, ts, scaling);
            sum += delta * delta;
            if let Some(g) = grad.as_deref_mut() {
                // d(delta^2)/d(current) = -2 delta
                online.backward(&s.phi, -2.0 * delta / n_terms as f64, &mut cache, g);
            }
            row.push(delta);
        }
        deltas.push(row);
    }
    Ok(BatchLoss {
        mean: sum / n_terms as f64,
        deltas,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainStats {
    pub loss: BatchLoss,
    /// `(slot, new priority)` for every sampled window.
    pub priorities: Vec<(usize, f64)>,
    pub timescales: Vec<Timescale>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    /// The buffer does not yet hold enough history; nothing changed.
    Skipped { have: usize, need: usize },
    Trained(TrainStats),
}

/// One optimizer step: draw a timescale set and a batch, tile the batch over
/// the set, descend on the mean squared error, and reset each sampled
/// window's priority to its largest squared error across the set.
pub fn train_step<R: Rng + ?Sized>(
    online: &mut DeepGammaNet,
    target: &DeepGammaNet,
    replay: &mut PrioritizedReplay,
    set_spec: &TimescaleSetSpec,
    optimizer: &mut Adam,
    rng: &mut R,
) -> Result<StepOutcome> {
    if !replay.ready() {
        return Ok(StepOutcome::Skipped {
            have: replay.len(),
            need: replay.config().min_history,
        });
    }
    let timescales = set_spec.sample(rng)?;
    let samples = replay.sample(rng)?;
    let mut grad = vec![0.0; online.n_params()];
    let loss = batch_loss(online, target, &samples, &timescales, Some(&mut grad))?;
    optimizer.step(online.params_mut(), &grad);
    let priorities: Vec<(usize, f64)> = samples
        .iter()
        .zip(loss.max_squared())
        .map(|(s, p)| (s.slot, p))
        .collect();
    for &(slot, p) in &priorities {
        replay.update_priority(slot, p);
    }
    Ok(StepOutcome::Trained(TrainStats {
        loss,
        priorities,
        timescales,
    }))
}

/// Makes `target` an exact copy of `online`.
pub fn sync_target(online: &DeepGammaNet, target: &mut DeepGammaNet) {
    target.copy_from(online);
}

/// Hyperparameters of the deep learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeepConfig {
    pub layer_sizes: Vec<usize>,
    pub embedding: EmbeddingKind,
    pub init: InitMode,
    pub replay: ReplayConfig,
    pub learning_rate: f64,
    pub adam_eps: f64,
    /// Training steps between target synchronizations.
    pub sync_interval: u64,
    /// Environment steps per training step.
    pub update_period: u64,
}

impl Default for DeepConfig {
    fn default() -> Self {
        DeepConfig {
            layer_sizes: Architecture::TOY_LAYERS.to_vec(),
            embedding: EmbeddingKind::Direct,
            init: InitMode::Standard,
            replay: ReplayConfig::default(),
            learning_rate: Adam::DEFAULT_LEARNING_RATE,
            adam_eps: Adam::DEFAULT_EPS,
            sync_interval: 10_000,
            update_period: 4,
        }
    }
}

impl DeepConfig {
    pub fn validate(&self) -> Result<()> {
        self.replay.validate()?;
        if self.sync_interval == 0 || self.update_period == 0 {
            return Err(Error::Config("sync_interval and update_period must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("learning_rate and adam_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Online network, target network, replay and optimizer driven by a stream
/// of transitions.
#[derive(Clone, Debug)]
pub struct DeepLearner {
    online: DeepGammaNet,
    target: DeepGammaNet,
    replay: PrioritizedReplay,
    optimizer: Adam,
    set_spec: TimescaleSetSpec,
    rng: ChaCha8Rng,
    cfg: DeepConfig,
    env_steps: u64,
    train_steps: u64,
    syncs: u64,
}

impl DeepLearner {
    pub fn new(
        cfg: DeepConfig,
        phi_dim: usize,
        input: Option<TimescaleInputMode>,
        loss_scaling: bool,
        set_spec: TimescaleSetSpec,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        set_spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture {
            phi_dim,
            input: input.map(InputSpec::from),
            embedding: cfg.embedding,
            layer_sizes: cfg.layer_sizes.clone(),
        };
        let online = DeepGammaNet::new(arch, loss_scaling, cfg.init, &mut rng)?;
        Ok(DeepLearner {
            target: online.clone(),
            online,
            replay: PrioritizedReplay::new(cfg.replay.clone())?,
            optimizer: Adam::new(cfg.learning_rate, cfg.adam_eps),
            set_spec,
            rng,
            cfg,
            env_steps: 0,
            train_steps: 0,
            syncs: 0,
        })
    }

    pub fn online(&self) -> &DeepGammaNet {
        &self.online
    }

    pub fn target(&self) -> &DeepGammaNet {
        &self.target
    }

    pub fn replay(&self) -> &PrioritizedReplay {
        &self.replay
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn syncs(&self) -> u64 {
        self.syncs
    }

    pub fn forward(&self, phi: &[f64], ts: Timescale) -> Result<f64> {
        self.online.forward(phi, ts)
    }

    /// Stores `t` and, every `update_period` transitions, trains once. The
    /// update counter runs across episode boundaries.
    pub fn observe(&mut self, t: &Transition) -> Result<Option<TrainStats>> {
        self.replay
            .push(t.state.clone(), t.cumulant, t.next_state.clone(), t.terminal);
        self.env_steps += 1;
        if self.env_steps % self.cfg.update_period != 0 {
            return Ok(None);
        }
        self.train_step()
    }

    /// Trains once if the replay is ready, synchronizing the target every
    /// `sync_interval` training steps.
    pub fn train_step(&mut self) -> Result<Option<TrainStats>> {
        match train_step(
            &mut self.online,
            &self.target,
            &mut self.replay,
            &self.set_spec,
            &mut self.optimizer,
            &mut self.rng,
        )? {
            StepOutcome::Skipped { .. } => Ok(None),
            StepOutcome::Trained(stats) => {
                self.train_steps += 1;
                if self.train_steps % self.cfg.sync_interval == 0 {
                    sync_target(&self.online, &mut self.target);
                    self.syncs += 1;
                }
                Ok(Some(stats))
            }
        }
    }
}
