//! Ground-truth returns, error metrics, probe baselines, interpolation
//! between probes and difference-of-discounts composition.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, FiniteMdp, FiniteMdpEnv, Restorable};
use crate::error::{Error, Result};
use crate::features::Featurizer;
use crate::linear::FixedBaseline;
use crate::timescale::{tau_to_gamma, Timescale};

/// Timescales at which accuracy is measured, in timesteps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbeSet {
    taus: Vec<f64>,
}

impl ProbeSet {
    pub const DEFAULT_TAUS: [f64; 9] = [1.0, 2.0, 5.0, 10.0, 20.0, 40.0, 60.0, 80.0, 100.0];

    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::Config("probe set is empty".into()));
        }
        if taus.iter().any(|t| !(*t >= 1.0) || !t.is_finite()) {
            return Err(Error::Config("probe taus must be >= 1".into()));
        }
        if taus.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("probe taus must be strictly increasing".into()));
        }
        Ok(ProbeSet { taus })
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    pub fn timescales(&self) -> Vec<Timescale> {
        self.taus
            .iter()
            .map(|&t| Timescale::from_tau(t).expect("validated tau"))
            .collect()
    }
}

impl Default for ProbeSet {
    fn default() -> Self {
        ProbeSet {
            taus: Self::DEFAULT_TAUS.to_vec(),
        }
    }
}

impl TryFrom<Vec<f64>> for ProbeSet {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbeSet::new(v)
    }
}

impl From<ProbeSet> for Vec<f64> {
    fn from(p: ProbeSet) -> Self {
        p.taus
    }
}

/// Exact discounted return from `phase` of a deterministic periodic signal,
/// where `signal[p]` is the cumulant received on arriving at phase `p`.
pub fn true_return_periodic(signal: &[f64], phase: usize, gamma: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Domain(format!("gamma {gamma} outside [0, 1)")));
    }
    let p = signal.len();
    if p == 0 {
        return Err(Error::Domain("empty signal".into()));
    }
    let mut sum = 0.0;
    let mut disc = 1.0;
    for k in 0..p {
        sum += disc * signal[(phase + 1 + k) % p];
        disc *= gamma;
    }
    Ok(sum / (1.0 - disc))
}

/// Solves `(I - gamma P) v = r` for the chain's state values. Terminal states
/// have value zero and are never bootstrapped from.
pub fn analytic_mdp_values(mdp: &FiniteMdp, gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain(format!("gamma {gamma} outside [0, 1]")));
    }
    let n = mdp.n_states();
    let r = DVector::from_vec(mdp.expected_cumulants());
    let a = DMatrix::from_fn(n, n, |s, next| {
        let id = if s == next { 1.0 } else { 0.0 };
        if mdp.is_terminal(s) || mdp.is_terminal(next) {
            id
        } else {
            id - gamma * mdp.prob(s, next)
        }
    });
    let v = a
        .clone()
        .lu()
        .solve(&r)
        .ok_or_else(|| Error::Undefined(format!("singular system at gamma {gamma}")))?;
    let residual = (&a * &v - &r).amax();
    if !(residual < 1e-10) {
        return Err(Error::Undefined(format!(
            "ill-conditioned system at gamma {gamma}: residual {residual:e}"
        )));
    }
    Ok(v.iter().copied().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub rollouts: usize,
    /// Upper bound on the bias from cutting rollouts at the horizon, using
    /// the largest cumulant magnitude seen.
    pub truncation_bound: f64,
}

/// Mean discounted return of `n_rollouts` independent rollouts from the
/// current state of `env`, each stopped at a terminal or after `horizon`
/// steps.
pub fn monte_carlo_return<E: Restorable>(
    env: &E,
    gamma: f64,
    n_rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_rollouts == 0 {
        return Err(Error::Config("n_rollouts must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Domain(format!("gamma {gamma} outside [0, 1)")));
    }
    let mut returns = Vec::with_capacity(n_rollouts);
    let mut max_c: f64 = 0.0;
    for i in 0..n_rollouts {
        let mut e = env.fork(seed.wrapping_add(i as u64));
        let mut g = 0.0;
        let mut disc = 1.0;
        for _ in 0..horizon {
            let Some(t) = e.step()? else { break };
            g += disc * t.cumulant;
            disc *= gamma;
            max_c = max_c.max(t.cumulant.abs());
            if t.terminal {
                break;
            }
        }
        returns.push(g);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std_err = if returns.len() > 1 {
        let var = returns.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_err,
        rollouts: returns.len(),
        truncation_bound: gamma.powi(horizon as i32) * max_c / (1.0 - gamma),
    })
}

/// [`monte_carlo_return`] from a chosen state of a Markov chain.
pub fn monte_carlo_mdp(
    env: &FiniteMdpEnv,
    state: usize,
    gamma: f64,
    n_rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Result<McEstimate> {
    let snapshot = env.at_state(state, seed)?;
    monte_carlo_return(&snapshot, gamma, n_rollouts, horizon, seed)
}

/// Pearson correlation. Undefined when either side has zero variance.
pub fn prediction_correlation(expected: &[f64], predicted: &[f64]) -> Result<f64> {
    if expected.len() != predicted.len() {
        return Err(Error::Dimension {
            expected: expected.len(),
            got: predicted.len(),
        });
    }
    if expected.len() < 2 {
        return Err(Error::Undefined("correlation needs at least two points".into()));
    }
    let n = expected.len() as f64;
    let me = expected.iter().sum::<f64>() / n;
    let mp = predicted.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in expected.iter().zip(predicted) {
        let (dx, dy) = (x - me, y - mp);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined(
            "zero variance: the predictions or targets are constant".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Mean and variance of squared error at one probe timescale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub series: String,
    pub tau: f64,
    pub mse_mean: f64,
    pub mse_var: f64,
    pub corr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub series: String,
    pub tau: f64,
    pub mse_mean: f64,
    pub mse_var: f64,
    pub norm_mse: f64,
    pub norm_var: f64,
    pub corr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesBar {
    pub series: String,
    pub avg_norm_mse: f64,
    pub avg_norm_var: f64,
}

/// Per-timescale errors normalized across series, with per-series averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedTable {
    pub rows: Vec<MetricsRow>,
    pub bars: Vec<SeriesBar>,
}

/// Divides every series' mean (and variance) at each tau by the largest
/// across series at that tau. A tau where the largest is zero reports zero
/// for every series. Bars average the normalized values uniformly over tau.
pub fn normalized_mse(stats: &[SeriesStats]) -> Result<NormalizedTable> {
    if stats.is_empty() {
        return Err(Error::Config("no series to normalize".into()));
    }
    let key = |t: f64| t.to_bits();
    let mut max_mean: BTreeMap<u64, f64> = BTreeMap::new();
    let mut max_var: BTreeMap<u64, f64> = BTreeMap::new();
    for s in stats {
        let m = max_mean.entry(key(s.tau)).or_insert(0.0);
        *m = m.max(s.mse_mean);
        let v = max_var.entry(key(s.tau)).or_insert(0.0);
        *v = v.max(s.mse_var);
    }
    let norm = |x: f64, max: f64| if max > 0.0 { x / max } else { 0.0 };
    let rows: Vec<MetricsRow> = stats
        .iter()
        .map(|s| MetricsRow {
            series: s.series.clone(),
            tau: s.tau,
            mse_mean: s.mse_mean,
            mse_var: s.mse_var,
            norm_mse: norm(s.mse_mean, max_mean[&key(s.tau)]),
            norm_var: norm(s.mse_var, max_var[&key(s.tau)]),
            corr: s.corr,
        })
        .collect();

    let mut order: Vec<&str> = Vec::new();
    let mut acc: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for r in &rows {
        let e = acc.entry(&r.series).or_insert_with(|| {
            order.push(&r.series);
            (0.0, 0.0, 0)
        });
        e.0 += r.norm_mse;
        e.1 += r.norm_var;
        e.2 += 1;
    }
    let bars = order
        .iter()
        .map(|s| {
            let (m, v, n) = acc[s];
            SeriesBar {
                series: s.to_string(),
                avg_norm_mse: m / n as f64,
                avg_norm_var: v / n as f64,
            }
        })
        .collect();
    Ok(NormalizedTable { rows, bars })
}

/// Coordinate used for linear interpolation between probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpScale {
    Gamma,
    Tau,
}

impl InterpScale {
    fn coord(self, ts: Timescale) -> f64 {
        match self {
            InterpScale::Gamma => ts.gamma(),
            InterpScale::Tau => ts.tau(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interpolated {
    pub value: f64,
    /// Weight on the upper bracketing probe.
    pub lambda: f64,
    pub lower: Timescale,
    pub upper: Timescale,
}

/// Linear interpolation between the two probes bracketing `query`.
/// `probes` holds `(timescale, prediction)` pairs in any order.
pub fn interpolate_prediction(
    probes: &[(Timescale, f64)],
    query: Timescale,
    scale: InterpScale,
) -> Result<Interpolated> {
    if probes.is_empty() {
        return Err(Error::Config("no probes to interpolate".into()));
    }
    let mut sorted = probes.to_vec();
    sorted.sort_by(|a, b| a.0.tau().total_cmp(&b.0.tau()));
    if let Some(&(ts, v)) = sorted
        .iter()
        .find(|(ts, _)| (ts.gamma() - query.gamma()).abs() <= 1e-12)
    {
        return Ok(Interpolated {
            value: v,
            lambda: 0.0,
            lower: ts,
            upper: ts,
        });
    }
    let pos = sorted.partition_point(|(ts, _)| ts.tau() < query.tau());
    if pos == 0 || pos == sorted.len() {
        return Err(Error::Range(format!(
            "tau {} outside probe range [{}, {}]",
            query.tau(),
            sorted[0].0.tau(),
            sorted[sorted.len() - 1].0.tau()
        )));
    }
    let (lo, v_lo) = sorted[pos - 1];
    let (hi, v_hi) = sorted[pos];
    let x = scale.coord(query);
    let (x_lo, x_hi) = (scale.coord(lo), scale.coord(hi));
    let lambda = (x - x_lo) / (x_hi - x_lo);
    Ok(Interpolated {
        value: (1.0 - lambda) * v_lo + lambda * v_hi,
        lambda,
        lower: lo,
        upper: hi,
    })
}

/// Return over the band between two discounts: `v_long - v_short`.
pub fn compose_difference_return(
    v_long: f64,
    gamma_long: f64,
    v_short: f64,
    gamma_short: f64,
) -> Result<f64> {
    if gamma_long < gamma_short {
        return Err(Error::Domain(format!(
            "gamma_long {gamma_long} below gamma_short {gamma_short}"
        )));
    }
    Ok(v_long - v_short)
}

/// Fixed-timescale baselines, one per probe.
#[derive(Clone, Debug)]
pub struct ProbeSuite<F> {
    pub baselines: Vec<FixedBaseline<F>>,
    /// False when the budget was zero and nothing was trained.
    pub trained: bool,
}

impl<F: Featurizer> ProbeSuite<F> {
    /// Predictions of every probe at `state`, paired with its timescale.
    pub fn predictions(&self, state: &[f64]) -> Result<Vec<(Timescale, f64)>> {
        self.baselines
            .iter()
            .map(|b| Ok((b.timescale(), b.value(state)?)))
            .collect()
    }
}

/// Trains one baseline per probe for `budget` steps on its own environment
/// instance. Probes train in parallel.
pub fn train_probe_suite<F, E, MB, ME>(
    probes: &ProbeSet,
    make_baseline: MB,
    make_env: ME,
    budget: usize,
) -> Result<ProbeSuite<F>>
where
    F: Featurizer + Send,
    E: Environment,
    MB: Fn(Timescale) -> Result<FixedBaseline<F>> + Sync,
    ME: Fn(usize) -> Result<E> + Sync,
{
    let baselines = probes
        .timescales()
        .into_par_iter()
        .enumerate()
        .map(|(i, ts)| {
            let mut b = make_baseline(ts)?;
            let mut env = make_env(i)?;
            b.train(&mut env, budget)?;
            Ok(b)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeSuite {
        baselines,
        trained: budget > 0,
    })
}

/// Record offsets used as evaluation points on a trace: a random start in
/// `[10, 100)` and then every `stride` records.
pub fn trace_eval_offsets<R: Rng + ?Sized>(len: usize, stride: usize, rng: &mut R) -> Vec<usize> {
    let start = rng.gen_range(10..100).min(len.saturating_sub(1));
    (start..len).step_by(stride.max(1)).collect()
}

/// Probe taus used for the interpolation sweep.
pub const INTERPOLATION_TAUS: [f64; 8] = [1.5, 3.5, 7.5, 15.0, 30.0, 50.0, 70.0, 90.0];

/// `gamma` for a tau known to be valid.
pub fn gamma_of(tau: f64) -> f64 {
    tau_to_gamma(tau).expect("tau >= 1")
}
