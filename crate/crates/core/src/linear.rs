//! Linear Γ-nets trained by TD(0) over a set of timescales per transition,
//! and the single-timescale baseline.

use rand::Rng;

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::features::{dot, Featurizer, TileCoder};
use crate::timescale::{Timescale, TimescaleInputMode, TimescaleSetSpec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSize {
    pub alpha: f64,
    /// Divide `alpha` by the number of active features.
    pub divide_by_active: bool,
    /// Decay linearly to zero over this many updates.
    pub decay_over: Option<u64>,
}

impl Default for StepSize {
    fn default() -> Self {
        StepSize {
            alpha: 0.1,
            divide_by_active: true,
            decay_over: None,
        }
    }
}

impl StepSize {
    pub fn at(&self, update: u64, active: usize) -> f64 {
        let mut a = self.alpha;
        if self.divide_by_active {
            a /= active.max(1) as f64;
        }
        if let Some(total) = self.decay_over {
            let frac = if total == 0 {
                0.0
            } else {
                1.0 - (update as f64 / total as f64).min(1.0)
            };
            a *= frac;
        }
        a
    }
}

/// One possible successor of a state, used by the expected update.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub next_state: Vec<f64>,
    pub prob: f64,
    pub cumulant: f64,
    pub terminal: bool,
}

/// Linear value estimator over features of `(state, timescale)`.
///
/// With loss scaling on, the weights parameterize the scaled value
/// `f = (1 - gamma) V` and predictions divide by `1 - gamma`.
#[derive(Clone, Debug)]
pub struct LinearGammaNet<F = TileCoder> {
    weights: Vec<f64>,
    coder: F,
    input: Option<TimescaleInputMode>,
    step_size: StepSize,
    loss_scaling: bool,
    state_dim: usize,
    updates: u64,
}

impl<F: Featurizer> LinearGammaNet<F> {
    /// `input = None` builds a learner whose coder sees the state only.
    pub fn new(
        coder: F,
        input: Option<TimescaleInputMode>,
        step_size: StepSize,
        loss_scaling: bool,
    ) -> Result<Self> {
        let ts_width = input.map_or(0, |m| m.width());
        let state_dim = coder
            .input_dim()
            .checked_sub(ts_width)
            .filter(|d| *d > 0)
            .ok_or_else(|| {
                Error::Config(format!(
                    "coder input_dim {} leaves no room for the state",
                    coder.input_dim()
                ))
            })?;
        if !(step_size.alpha > 0.0) {
            return Err(Error::Config(format!("step size {} must be > 0", step_size.alpha)));
        }
        Ok(LinearGammaNet {
            weights: vec![0.0; coder.dim()],
            coder,
            input,
            step_size,
            loss_scaling,
            state_dim,
            updates: 0,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.weights.len() {
            return Err(Error::Dimension {
                expected: self.weights.len(),
                got: weights.len(),
            });
        }
        self.weights = weights;
        Ok(())
    }

    pub fn coder(&self) -> &F {
        &self.coder
    }

    pub fn input_mode(&self) -> Option<TimescaleInputMode> {
        self.input
    }

    pub fn loss_scaling(&self) -> bool {
        self.loss_scaling
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn step_size(&self) -> &StepSize {
        &self.step_size
    }

    pub fn set_step_size(&mut self, step_size: StepSize) {
        self.step_size = step_size;
    }

    /// Step size that the next update will use.
    pub fn current_alpha(&self) -> f64 {
        self.step_size.at(self.updates, self.coder.active_count())
    }

    fn active(&self, state: &[f64], ts: Timescale, out: &mut Vec<usize>) -> Result<()> {
        if state.len() != self.state_dim {
            return Err(Error::Dimension {
                expected: self.state_dim,
                got: state.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.state_dim + 2);
        inputs.extend_from_slice(state);
        if let Some(mode) = self.input {
            mode.encode_into(ts, &mut inputs)?;
        }
        self.coder.active_into(&inputs, out)
    }

    /// The linear output `phi(s, ts)^T w`: `f` under loss scaling, else `V`.
    pub fn output(&self, state: &[f64], ts: Timescale) -> Result<f64> {
        let mut idx = Vec::with_capacity(self.coder.active_count());
        self.active(state, ts, &mut idx)?;
        Ok(dot(&idx, &self.weights))
    }

    pub fn predict(&self, state: &[f64], ts: Timescale) -> Result<f64> {
        let out = self.output(state, ts)?;
        Ok(if self.loss_scaling {
            out / ts.scale()
        } else {
            out
        })
    }

    /// TD error for one timescale, added into `acc` as `weight * delta * phi`.
    #[allow(clippy::too_many_arguments)]
    fn accumulate(
        &self,
        s_idx: &[usize],
        next_idx: Option<&[usize]>,
        cumulant: f64,
        ts: Timescale,
        weight: f64,
        acc: &mut Vec<(usize, f64)>,
    ) -> f64 {
        let out = dot(s_idx, &self.weights);
        let next_out = next_idx.map_or(0.0, |n| dot(n, &self.weights));
        let delta = if self.loss_scaling {
            let scale = ts.scale();
            let v = out / scale;
            let v_next = next_out / scale;
            scale * (cumulant + ts.gamma() * v_next - v)
        } else {
            cumulant + ts.gamma() * next_out - out
        };
        acc.extend(s_idx.iter().map(|&i| (i, weight * delta)));
        delta
    }

    fn apply(&mut self, acc: &[(usize, f64)]) {
        let alpha = self.current_alpha();
        for &(i, d) in acc {
            self.weights[i] += alpha * d;
        }
        self.updates += 1;
    }

    /// One TD(0) update over every timescale in `timescales`.
    ///
    /// All errors are computed against the pre-update weights and applied
    /// together. On a terminal transition the bootstrap term is dropped.
    /// Returns the error for each timescale, in order.
    pub fn td_update(
        &mut self,
        state: &[f64],
        next_state: &[f64],
        cumulant: f64,
        timescales: &[Timescale],
        terminal: bool,
    ) -> Result<Vec<f64>> {
        if timescales.is_empty() {
            return Err(Error::Config("empty timescale set".into()));
        }
        let n = self.coder.active_count();
        let mut acc = Vec::with_capacity(n * timescales.len());
        let mut deltas = Vec::with_capacity(timescales.len());
        let (mut s_idx, mut n_idx) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for &ts in timescales {
            self.active(state, ts, &mut s_idx)?;
            let next = if terminal {
                None
            } else {
                self.active(next_state, ts, &mut n_idx)?;
                Some(n_idx.as_slice())
            };
            deltas.push(self.accumulate(&s_idx, next, cumulant, ts, 1.0, &mut acc));
        }
        self.apply(&acc);
        Ok(deltas)
    }

    /// The expectation of [`td_update`](Self::td_update) over the successor
    /// distribution of `state`, applied as one update.
    pub fn expected_td_update(
        &mut self,
        state: &[f64],
        outcomes: &[Outcome],
        timescales: &[Timescale],
    ) -> Result<()> {
        if timescales.is_empty() {
            return Err(Error::Config("empty timescale set".into()));
        }
        let n = self.coder.active_count();
        let mut acc = Vec::new();
        let (mut s_idx, mut n_idx) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for &ts in timescales {
            self.active(state, ts, &mut s_idx)?;
            for o in outcomes.iter().filter(|o| o.prob > 0.0) {
                let next = if o.terminal {
                    None
                } else {
                    self.active(&o.next_state, ts, &mut n_idx)?;
                    Some(n_idx.as_slice())
                };
                self.accumulate(&s_idx, next, o.cumulant, ts, o.prob, &mut acc);
            }
        }
        self.apply(&acc);
        Ok(())
    }
}

/// Result of driving a learner over an environment.
#[derive(Clone, Debug, Default)]
pub struct OnlineLog {
    /// Per-step TD errors, one per timescale in that step's set.
    pub deltas: Vec<Vec<f64>>,
    pub steps: usize,
    /// The environment ran out before the requested number of steps.
    pub truncated: bool,
}

/// Trains `net` online for `n_steps` transitions, drawing a fresh timescale
/// set on every step.
pub fn run_online<F, E, R>(
    net: &mut LinearGammaNet<F>,
    env: &mut E,
    n_steps: usize,
    set_spec: &TimescaleSetSpec,
    rng: &mut R,
) -> Result<OnlineLog>
where
    F: Featurizer,
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    run_online_with(net, env, n_steps, set_spec, rng, |_, _| Ok(()))
}

/// As [`run_online`], calling `hook(step, net)` after every update.
pub fn run_online_with<F, E, R, H>(
    net: &mut LinearGammaNet<F>,
    env: &mut E,
    n_steps: usize,
    set_spec: &TimescaleSetSpec,
    rng: &mut R,
    mut hook: H,
) -> Result<OnlineLog>
where
    F: Featurizer,
    E: Environment + ?Sized,
    R: Rng + ?Sized,
    H: FnMut(usize, &LinearGammaNet<F>) -> Result<()>,
{
    set_spec.validate()?;
    let mut log = OnlineLog {
        deltas: Vec::with_capacity(n_steps),
        ..Default::default()
    };
    let mut set = Vec::with_capacity(set_spec.len());
    for step in 0..n_steps {
        let Some(t) = env.step()? else {
            log.truncated = true;
            break;
        };
        set_spec.sample_into(rng, &mut set)?;
        let d = net.td_update(&t.state, &t.next_state, t.cumulant, &set, t.terminal)?;
        log.deltas.push(d);
        log.steps += 1;
        hook(step + 1, net)?;
    }
    Ok(log)
}

/// A learner for exactly one timescale, without timescale inputs.
#[derive(Clone, Debug)]
pub struct FixedBaseline<F = TileCoder> {
    net: LinearGammaNet<F>,
    timescale: Timescale,
    trained: bool,
}

impl<F: Featurizer> FixedBaseline<F> {
    pub fn new(
        coder: F,
        timescale: Timescale,
        step_size: StepSize,
        loss_scaling: bool,
    ) -> Result<Self> {
        Ok(FixedBaseline {
            net: LinearGammaNet::new(coder, None, step_size, loss_scaling)?,
            timescale,
            trained: false,
        })
    }

    pub fn timescale(&self) -> Timescale {
        self.timescale
    }

    pub fn net(&self) -> &LinearGammaNet<F> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut LinearGammaNet<F> {
        &mut self.net
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn check(&self, ts: Timescale) -> Result<()> {
        if (ts.gamma() - self.timescale.gamma()).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "baseline for tau {} queried at tau {}",
                self.timescale.tau(),
                ts.tau()
            )));
        }
        Ok(())
    }

    pub fn predict(&self, state: &[f64], ts: Timescale) -> Result<f64> {
        self.check(ts)?;
        self.net.predict(state, self.timescale)
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        self.net.predict(state, self.timescale)
    }

    pub fn td_update(
        &mut self,
        state: &[f64],
        next_state: &[f64],
        cumulant: f64,
        terminal: bool,
    ) -> Result<f64> {
        self.trained = true;
        let d = self
            .net
            .td_update(state, next_state, cumulant, &[self.timescale], terminal)?;
        Ok(d[0])
    }

    /// Trains on up to `n_steps` transitions. Returns the steps taken.
    pub fn train<E: Environment + ?Sized>(&mut self, env: &mut E, n_steps: usize) -> Result<usize> {
        for step in 0..n_steps {
            let Some(t) = env.step()? else {
                return Ok(step);
            };
            self.td_update(&t.state, &t.next_state, t.cumulant, t.terminal)?;
        }
        Ok(n_steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{TabularCoder, TileLayerSpec};
    use crate::timescale::InputMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ts(g: f64) -> Timescale {
        Timescale::from_gamma(g).unwrap()
    }

    /// One state, keys for a fixed list of gammas (gamma-only input).
    fn tabular(n_states: usize, gammas: &[f64], scaling: bool, alpha: f64) -> LinearGammaNet<TabularCoder> {
        let keys = gammas.iter().map(|g| vec![*g]).collect();
        let coder = TabularCoder::new(n_states, keys).unwrap();
        let mode = TimescaleInputMode::new(InputMode::GammaOnly, 100.0).unwrap();
        let step = StepSize { alpha, divide_by_active: false, decay_over: None };
        LinearGammaNet::new(coder, Some(mode), step, scaling).unwrap()
    }

    #[test]
    fn predict_trivia() {
        let mut net = tabular(1, &[0.5], true, 0.1);
        assert_eq!(net.predict(&[1.0], ts(0.5)).unwrap(), 0.0);
        net.set_weights(vec![0.5]).unwrap();
        assert_eq!(net.predict(&[1.0], ts(0.5)).unwrap(), 1.0);
        let mut off = tabular(1, &[0.5], false, 0.1);
        off.set_weights(vec![0.5]).unwrap();
        assert_eq!(off.predict(&[1.0], ts(0.5)).unwrap(), 0.5);
        assert!(matches!(net.predict(&[1.0, 0.0], ts(0.5)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn td_update_trivia() {
        let mut net = tabular(1, &[0.0], false, 0.1);
        let d = net.td_update(&[1.0], &[1.0], 1.0, &[ts(0.0)], false).unwrap();
        assert_eq!(d, vec![1.0]);

        let mut net = tabular(1, &[0.5], false, 0.1);
        net.set_weights(vec![0.4]).unwrap();
        let d = net.td_update(&[1.0], &[1.0], 1.0, &[ts(0.5)], true).unwrap();
        assert!((d[0] - 0.6).abs() < 1e-15);

        assert!(net.td_update(&[1.0], &[1.0], 1.0, &[], false).is_err());
    }

    #[test]
    fn self_loop_fixed_point() {
        for scaling in [false, true] {
            let mut net = tabular(1, &[0.5], scaling, 0.1);
            for _ in 0..2000 {
                net.td_update(&[1.0], &[1.0], 1.0, &[ts(0.5)], false).unwrap();
            }
            let v = net.predict(&[1.0], ts(0.5)).unwrap();
            assert!((v - 2.0).abs() < 1e-3, "scaling {scaling}: {v}");
        }
    }

    #[test]
    fn update_uses_pre_update_weights() {
        // Two timescales hitting the same feature: both errors see w = 0.
        let coder = TabularCoder::new(1, vec![vec![]]).unwrap();
        let step = StepSize { alpha: 0.5, divide_by_active: false, decay_over: None };
        let mut net = LinearGammaNet::new(coder, None, step, false).unwrap();
        let d = net.td_update(&[1.0], &[1.0], 1.0, &[ts(0.0), ts(0.5)], false).unwrap();
        assert_eq!(d, vec![1.0, 1.0]);
        assert_eq!(net.weights(), &[1.0]);
    }

    #[test]
    fn timescale_order_does_not_matter() {
        let layers = [TileLayerSpec::new(8, 0.5), TileLayerSpec::new(8, 0.25)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coder = TileCoder::build(&layers, 3, None, false, &mut rng).unwrap();
        let mut a = LinearGammaNet::new(coder, Some(TimescaleInputMode::default()), StepSize::default(), true).unwrap();
        let w: Vec<f64> = (0..a.weights().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        a.set_weights(w).unwrap();
        let mut b = a.clone();
        let set = TimescaleSetSpec::default().sample(&mut rng).unwrap();
        let mut rev = set.clone();
        rev.reverse();
        a.td_update(&[0.3], &[0.31], 0.7, &set, false).unwrap();
        b.td_update(&[0.3], &[0.31], 0.7, &rev, false).unwrap();
        for (x, y) in a.weights().iter().zip(b.weights()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_reaches_zero() {
        let s = StepSize { alpha: 0.1, divide_by_active: true, decay_over: Some(100) };
        assert!((s.at(0, 10) - 0.01).abs() < 1e-15);
        assert!((s.at(50, 10) - 0.005).abs() < 1e-15);
        assert_eq!(s.at(100, 10), 0.0);
        assert_eq!(s.at(1000, 10), 0.0);
    }

    #[test]
    fn baseline_rejects_other_timescales() {
        let coder = TabularCoder::new(1, vec![vec![]]).unwrap();
        let b = FixedBaseline::new(coder, ts(0.9), StepSize::default(), true).unwrap();
        assert!(b.predict(&[1.0], ts(0.9)).is_ok());
        assert!(matches!(b.predict(&[1.0], ts(0.5)), Err(Error::Domain(_))));
    }

    #[test]
    fn baseline_matches_gamma_net_with_constant_inputs() {
        use crate::env::{FiniteMdp, FiniteMdpEnv};
        let g = 0.9;
        let mdp = FiniteMdp::new(
            vec![vec![0.2, 0.8, 0.0], vec![0.0, 0.3, 0.7], vec![0.6, 0.0, 0.4]],
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, -1.0], vec![0.5, 0.0, 0.0]],
            vec![],
            0,
        )
        .unwrap();
        let step = StepSize { alpha: 0.05, divide_by_active: false, decay_over: None };
        let mut gnet = tabular(3, &[g], true, 0.05);
        let mut base = FixedBaseline::new(TabularCoder::new(3, vec![vec![]]).unwrap(), ts(g), step, true).unwrap();
        let mut e1 = FiniteMdpEnv::new(mdp.clone(), 17);
        let mut e2 = FiniteMdpEnv::new(mdp, 17);
        let spec = TimescaleSetSpec::fixed(ts(g));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            run_online(&mut gnet, &mut e1, 1, &spec, &mut rng).unwrap();
            base.train(&mut e2, 1).unwrap();
            for (x, y) in gnet.weights().iter().zip(base.net().weights()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn run_online_zero_steps_and_determinism() {
        use crate::env::SquareWaveEnv;
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let layers = [TileLayerSpec::new(4, 0.5)];
            let coder = TileCoder::build(&layers, 3, None, false, &mut rng).unwrap();
            (LinearGammaNet::new(coder, Some(TimescaleInputMode::default()), StepSize::default(), true).unwrap(), rng)
        };
        let spec = TimescaleSetSpec { tau_integer: false, n_gamma_uniform: 2, n_tau_uniform: 2, ..Default::default() };
        let (mut net, mut rng) = build();
        let before = net.weights().to_vec();
        let log = run_online(&mut net, &mut SquareWaveEnv::new(100).unwrap(), 0, &spec, &mut rng).unwrap();
        assert_eq!(log.steps, 0);
        assert_eq!(net.weights(), &before[..]);

        let (mut a, mut ra) = build();
        let (mut b, mut rb) = build();
        run_online(&mut a, &mut SquareWaveEnv::new(100).unwrap(), 3000, &spec, &mut ra).unwrap();
        run_online(&mut b, &mut SquareWaveEnv::new(100).unwrap(), 3000, &spec, &mut rb).unwrap();
        let bits = |n: &LinearGammaNet| n.weights().iter().map(|w| w.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn run_online_reports_truncation() {
        use crate::env::{TraceRecord, TraceReplay};
        let recs = (0..5)
            .map(|i| TraceRecord { obs: vec![i as f64 / 5.0], cumulant: 1.0, terminal: false })
            .collect();
        let mut tr = TraceReplay::from_records(recs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let coder = TileCoder::build(&[TileLayerSpec::new(2, 0.5)], 3, None, false, &mut rng).unwrap();
        let mut net = LinearGammaNet::new(coder, Some(TimescaleInputMode::default()), StepSize::default(), true).unwrap();
        let log = run_online(&mut net, &mut tr, 10, &TimescaleSetSpec::default(), &mut rng).unwrap();
        assert!(log.truncated);
        assert_eq!(log.steps, 4);
    }
}
