//! Seeded experiment runs: training, checkpointed evaluation at the probe
//! timescales, and the CSV/JSON artifacts derived from them.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EnvConfig, ExperimentConfig, FeatureKind, LearnerConfig, LinearConfig};
use crate::deep::DeepLearner;
use crate::env::{
    load_trace, Environment, FiniteMdp, FiniteMdpEnv, SquareWaveEnv, TraceReplay, TraceSchema,
    Transition,
};
use crate::error::{Error, Result};
use crate::eval::{
    analytic_mdp_values, interpolate_prediction, normalized_mse, prediction_correlation,
    train_probe_suite, trace_eval_offsets, true_return_periodic, InterpScale, MetricsRow,
    NormalizedTable, ProbeSet, ProbeSuite, SeriesStats, INTERPOLATION_TAUS,
};
use crate::features::{Featurizer, TabularCoder, TileCoder};
use crate::linear::{FixedBaseline, LinearGammaNet};
use crate::timescale::{Timescale, TimescaleInputMode, TimescaleSetSpec};

/// Feature coder selected by the configuration.
#[derive(Clone, Debug)]
pub enum Coder {
    Tile(TileCoder),
    Tabular(TabularCoder),
}

impl Featurizer for Coder {
    fn dim(&self) -> usize {
        match self {
            Coder::Tile(c) => c.dim(),
            Coder::Tabular(c) => c.dim(),
        }
    }

    fn active_count(&self) -> usize {
        match self {
            Coder::Tile(c) => c.active_count(),
            Coder::Tabular(c) => c.active_count(),
        }
    }

    fn input_dim(&self) -> usize {
        match self {
            Coder::Tile(c) => c.input_dim(),
            Coder::Tabular(c) => c.input_dim(),
        }
    }

    fn active_into(&self, inputs: &[f64], out: &mut Vec<usize>) -> Result<()> {
        match self {
            Coder::Tile(c) => c.active_into(inputs, out),
            Coder::Tabular(c) => c.active_into(inputs, out),
        }
    }
}

/// Builds the coder for `state_dim` state scalars followed by the encoded
/// timescale inputs of `input` (none for fixed-timescale baselines).
/// Tabular coders enumerate `keys` as their timescales.
pub fn build_coder<R: Rng + ?Sized>(
    lin: &LinearConfig,
    state_dim: usize,
    input: Option<TimescaleInputMode>,
    keys: &[Timescale],
    rng: &mut R,
) -> Result<Coder> {
    let width = input.map_or(0, |m| m.width());
    match lin.features {
        FeatureKind::Tile => Ok(Coder::Tile(TileCoder::build(
            &lin.layers(),
            state_dim + width,
            lin.index_space,
            lin.bias,
            rng,
        )?)),
        FeatureKind::Tabular => {
            let keys = match input {
                None => vec![Vec::new()],
                Some(m) => keys.iter().map(|&ts| m.encode(ts)).collect::<Result<_>>()?,
            };
            Ok(Coder::Tabular(TabularCoder::new(state_dim, keys)?))
        }
    }
}

/// The environment of a run. Traces restart from their first record when
/// exhausted.
#[derive(Clone, Debug)]
pub enum RunEnv {
    SquareWave(SquareWaveEnv),
    Mdp(FiniteMdpEnv),
    Trace(TraceReplay),
}

impl Environment for RunEnv {
    fn state_dim(&self) -> usize {
        match self {
            RunEnv::SquareWave(e) => e.state_dim(),
            RunEnv::Mdp(e) => e.state_dim(),
            RunEnv::Trace(e) => e.state_dim(),
        }
    }

    fn step(&mut self) -> Result<Option<Transition>> {
        match self {
            RunEnv::SquareWave(e) => e.step(),
            RunEnv::Mdp(e) => e.step(),
            RunEnv::Trace(e) => match e.step()? {
                Some(t) => Ok(Some(t)),
                None => {
                    e.rewind();
                    e.step()
                }
            },
        }
    }
}

fn load_env_trace(env: &EnvConfig) -> Result<Option<TraceReplay>> {
    match env {
        EnvConfig::Trace { path, .. } => load_trace(path, &TraceSchema::default()).map(Some),
        _ => Ok(None),
    }
}

/// Fresh environment for one seed.
pub fn make_env(cfg: &ExperimentConfig, seed: u64) -> Result<RunEnv> {
    Ok(match &cfg.environment {
        EnvConfig::SquareWave { period } => RunEnv::SquareWave(SquareWaveEnv::new(*period)?),
        EnvConfig::Mdp { .. } => RunEnv::Mdp(FiniteMdpEnv::new(cfg.environment.mdp()?, seed)),
        EnvConfig::Trace { .. } => RunEnv::Trace(load_env_trace(&cfg.environment)?.unwrap()),
    })
}

/// Ground truth for the evaluation points of an environment.
#[derive(Clone, Debug)]
pub enum Oracle {
    /// Closed-form periodic returns at every phase.
    Periodic { env: SquareWaveEnv },
    /// Linear-solve values at every non-terminal state.
    Mdp { mdp: FiniteMdp, states: Vec<usize> },
    /// Discounted returns along a recorded trace at sampled offsets.
    Trace {
        trace: TraceReplay,
        offsets: Vec<usize>,
    },
}

/// Evaluation points and their oracle.
#[derive(Clone, Debug)]
pub struct EvalPoints {
    pub states: Vec<Vec<f64>>,
    pub oracle: Oracle,
}

impl EvalPoints {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        match &cfg.environment {
            EnvConfig::SquareWave { period } => {
                let env = SquareWaveEnv::new(*period)?;
                Ok(EvalPoints {
                    states: (0..*period).map(|p| env.observe(p)).collect(),
                    oracle: Oracle::Periodic { env },
                })
            }
            EnvConfig::Mdp { .. } => {
                let mdp = cfg.environment.mdp()?;
                let states: Vec<usize> = (0..mdp.n_states()).filter(|&s| !mdp.is_terminal(s)).collect();
                Ok(EvalPoints {
                    states: states.iter().map(|&s| mdp.one_hot(s)).collect(),
                    oracle: Oracle::Mdp { mdp, states },
                })
            }
            EnvConfig::Trace { eval_stride, .. } => {
                let trace = load_env_trace(&cfg.environment)?.unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0e7a_1bad);
                let offsets = trace_eval_offsets(trace.len(), *eval_stride, &mut rng);
                if offsets.is_empty() {
                    return Err(Error::Config("environment.path: trace too short to evaluate".into()));
                }
                Ok(EvalPoints {
                    states: offsets.iter().map(|&i| trace.records()[i].obs.clone()).collect(),
                    oracle: Oracle::Trace { trace, offsets },
                })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// True returns at every point for discount `gamma`.
    pub fn targets(&self, gamma: f64) -> Result<Vec<f64>> {
        match &self.oracle {
            Oracle::Periodic { env } => {
                let signal = env.signal_sequence();
                (0..env.period())
                    .map(|p| true_return_periodic(&signal, p, gamma))
                    .collect()
            }
            Oracle::Mdp { mdp, states } => {
                let v = analytic_mdp_values(mdp, gamma)?;
                Ok(states.iter().map(|&s| v[s]).collect())
            }
            Oracle::Trace { trace, offsets } => {
                let g = trace.returns(gamma);
                Ok(offsets.iter().map(|&i| g[i]).collect())
            }
        }
    }
}

/// A Γ-net of either family, trained online from a transition stream.
#[derive(Clone, Debug)]
pub enum Learner {
    Linear {
        net: LinearGammaNet<Coder>,
        set_spec: TimescaleSetSpec,
        rng: ChaCha8Rng,
        scratch: Vec<Timescale>,
    },
    Deep(Box<DeepLearner>),
}

impl Learner {
    pub fn new(cfg: &ExperimentConfig, state_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set_spec = cfg.timescales.spec()?;
        let input = cfg.input.mode()?;
        match &cfg.learner {
            LearnerConfig::Linear(lin) => {
                let mut keys = set_spec.always_include.clone();
                keys.extend(cfg.probes.timescales());
                keys.dedup_by(|a, b| a.gamma() == b.gamma());
                let coder = build_coder(lin, state_dim, Some(input), &keys, &mut rng)?;
                let net = LinearGammaNet::new(coder, Some(input), lin.step(cfg.steps), cfg.loss_scaling)?;
                Ok(Learner::Linear {
                    net,
                    set_spec,
                    rng,
                    scratch: Vec::new(),
                })
            }
            LearnerConfig::Deep(deep) => Ok(Learner::Deep(Box::new(DeepLearner::new(
                deep.clone(),
                state_dim,
                Some(input),
                cfg.loss_scaling,
                set_spec,
                rng.gen(),
            )?))),
        }
    }

    pub fn observe(&mut self, t: &Transition) -> Result<()> {
        match self {
            Learner::Linear {
                net,
                set_spec,
                rng,
                scratch,
            } => {
                set_spec.sample_into(rng, scratch)?;
                net.td_update(&t.state, &t.next_state, t.cumulant, scratch, t.terminal)?;
            }
            Learner::Deep(d) => {
                d.observe(t)?;
            }
        }
        Ok(())
    }

    pub fn predict(&self, state: &[f64], ts: Timescale) -> Result<f64> {
        match self {
            Learner::Linear { net, .. } => net.predict(state, ts),
            Learner::Deep(d) => d.forward(state, ts),
        }
    }
}

/// Error at each probe after one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub mse: Vec<f64>,
}

/// Final prediction of one probe at one evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub series: String,
    pub tau: f64,
    pub point: usize,
    pub true_return: f64,
    pub prediction: f64,
}

/// One learning-curve sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub series: String,
    pub step: usize,
    pub tau: f64,
    pub mse: f64,
}

/// Everything measured in one seeded run.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedReport {
    pub seed: u64,
    pub stats: Vec<SeriesStats>,
    /// Correlation over every probe's predictions concatenated.
    pub overall_corr: Option<f64>,
    pub checkpoints: Vec<Checkpoint>,
    /// Index of the first checkpoint in the averaging window.
    pub window_start: usize,
    pub predictions: Vec<PredictionRow>,
}

impl SeedReport {
    pub fn metrics(&self) -> Result<Vec<MetricsRow>> {
        Ok(normalized_mse(&self.stats)?.rows)
    }

    pub fn curve(&self, series: &str, probes: &ProbeSet) -> Vec<CurveRow> {
        self.checkpoints
            .iter()
            .flat_map(|c| {
                probes.taus().iter().zip(&c.mse).map(move |(&tau, &mse)| CurveRow {
                    series: series.to_string(),
                    step: c.step,
                    tau,
                    mse,
                })
            })
            .collect()
    }
}

fn checkpoint_steps(cfg: &ExperimentConfig) -> Vec<usize> {
    let every = cfg.checkpoint_every();
    let mut steps: Vec<usize> = (1..=cfg.steps / every).map(|k| k * every).collect();
    if steps.last() != Some(&cfg.steps) {
        steps.push(cfg.steps);
    }
    steps
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Trains and evaluates one seed without touching the filesystem.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedReport> {
    cfg.validate()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let (env_seed, learner_seed, eval_seed) = (seeds.gen(), seeds.gen(), seeds.gen());
    let mut env = make_env(cfg, env_seed)?;
    let points = EvalPoints::new(cfg, eval_seed)?;
    let mut learner = Learner::new(cfg, env.state_dim(), learner_seed)?;

    let probes = cfg.probes.timescales();
    let targets: Vec<Vec<f64>> = probes
        .iter()
        .map(|ts| points.targets(ts.gamma()))
        .collect::<Result<_>>()?;

    let steps = checkpoint_steps(cfg);
    let window = ((steps.len() as f64 * cfg.eval_window).ceil() as usize).clamp(1, steps.len());
    let window_start = steps.len() - window;

    let mut checkpoints = Vec::with_capacity(steps.len());
    let mut window_preds: Vec<Vec<f64>> = vec![Vec::new(); probes.len()];
    let mut window_truth: Vec<Vec<f64>> = vec![Vec::new(); probes.len()];
    let mut last_preds: Vec<Vec<f64>> = Vec::new();
    let mut done = 0;
    for (ci, &until) in steps.iter().enumerate() {
        while done < until {
            let t = env
                .step()?
                .ok_or_else(|| Error::Config("environment produced no transitions".into()))?;
            learner.observe(&t)?;
            done += 1;
        }
        let mut mse = Vec::with_capacity(probes.len());
        last_preds.clear();
        for (j, &ts) in probes.iter().enumerate() {
            let preds = points
                .states
                .iter()
                .map(|s| learner.predict(s, ts))
                .collect::<Result<Vec<_>>>()?;
            if preds.iter().any(|p| !p.is_finite()) {
                return Err(Error::Undefined(format!(
                    "non-finite prediction at tau {} after {until} steps",
                    ts.tau()
                )));
            }
            let err = preds
                .iter()
                .zip(&targets[j])
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / preds.len() as f64;
            mse.push(err);
            if ci >= window_start {
                window_preds[j].extend_from_slice(&preds);
                window_truth[j].extend_from_slice(&targets[j]);
            }
            last_preds.push(preds);
        }
        checkpoints.push(Checkpoint { step: until, mse });
    }

    let series = cfg.name.clone();
    let stats = probes
        .iter()
        .enumerate()
        .map(|(j, ts)| {
            let errs: Vec<f64> = checkpoints[window_start..].iter().map(|c| c.mse[j]).collect();
            let (mse_mean, mse_var) = mean_var(&errs);
            SeriesStats {
                series: series.clone(),
                tau: ts.tau(),
                mse_mean,
                mse_var,
                corr: prediction_correlation(&window_truth[j], &window_preds[j]).ok(),
            }
        })
        .collect();
    let overall_corr =
        prediction_correlation(&window_truth.concat(), &window_preds.concat()).ok();
    let predictions = probes
        .iter()
        .enumerate()
        .flat_map(|(j, ts)| {
            let series = &series;
            let truth = &targets[j];
            last_preds[j].iter().enumerate().map(move |(i, &p)| PredictionRow {
                series: series.clone(),
                tau: ts.tau(),
                point: i,
                true_return: truth[i],
                prediction: p,
            })
        })
        .collect();
    Ok(SeedReport {
        seed,
        stats,
        overall_corr,
        checkpoints,
        window_start,
        predictions,
    })
}

/// Where and for which seeds to run.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seeds: Option<Vec<u64>>,
    pub out_dir: Option<PathBuf>,
    pub dry_run: bool,
}

impl RunOptions {
    fn seeds<'a>(&'a self, cfg: &'a ExperimentConfig) -> &'a [u64] {
        self.seeds.as_deref().unwrap_or(&cfg.seeds)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("results"))
    }
}

/// Files written by a run.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub config_hash: String,
    pub files: Vec<PathBuf>,
    pub failures: Vec<(u64, String)>,
}

#[derive(Serialize)]
struct SeedSummary<'a> {
    name: &'a str,
    config_hash: &'a str,
    seed: u64,
    steps: usize,
    checkpoints: usize,
    window_steps: [usize; 2],
    overall_corr: Option<f64>,
    avg_norm_mse: f64,
    avg_norm_var: f64,
    metrics: &'a [MetricsRow],
}

#[derive(Serialize)]
struct AggregateSummary<'a> {
    name: &'a str,
    config_hash: &'a str,
    seeds: &'a [u64],
    steps: usize,
    overall_corr: Vec<Option<f64>>,
    metrics: &'a [MetricsRow],
}

/// Writes rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

/// Reads a metrics CSV written by [`run_experiment`] or [`compare_series`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .map_err(|e| csv_err(path, e))?;
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "no metrics rows".into(),
        });
    }
    Ok(rows)
}

fn stem(cfg: &ExperimentConfig, hash: &str) -> String {
    format!("{}-{hash}", cfg.name)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// A pool honoring `GAMMANET_THREADS`.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("GAMMANET_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("GAMMANET_THREADS: invalid value {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(e.to_string()))
}

fn write_seed(
    cfg: &ExperimentConfig,
    hash: &str,
    dir: &Path,
    report: &SeedReport,
) -> Result<Vec<PathBuf>> {
    let base = format!("{}-seed{}", stem(cfg, hash), report.seed);
    let table = normalized_mse(&report.stats)?;
    let metrics = dir.join(format!("{base}.metrics.csv"));
    write_csv(&metrics, &table.rows)?;
    let preds = dir.join(format!("{base}.predictions.csv"));
    write_csv(&preds, &report.predictions)?;
    let curve = dir.join(format!("{base}.curve.csv"));
    write_csv(&curve, &report.curve(&cfg.name, &cfg.probes))?;
    let summary = dir.join(format!("{base}.summary.json"));
    let bar = &table.bars[0];
    write_json(
        &summary,
        &SeedSummary {
            name: &cfg.name,
            config_hash: hash,
            seed: report.seed,
            steps: cfg.steps,
            checkpoints: report.checkpoints.len(),
            window_steps: [
                report.checkpoints[report.window_start].step,
                report.checkpoints.last().map_or(0, |c| c.step),
            ],
            overall_corr: report.overall_corr,
            avg_norm_mse: bar.avg_norm_mse,
            avg_norm_var: bar.avg_norm_var,
            metrics: &table.rows,
        },
    )?;
    Ok(vec![metrics, preds, curve, summary])
}

/// Mean over seeds of each probe's error; the variance is across seeds.
/// Correlation is averaged and undefined if any seed's is.
pub fn aggregate_seeds(series: &str, reports: &[SeedReport]) -> Result<Vec<SeriesStats>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Config("no seed reports to aggregate".into()))?;
    (0..first.stats.len())
        .map(|j| {
            let means: Vec<f64> = reports.iter().map(|r| r.stats[j].mse_mean).collect();
            let (mse_mean, mse_var) = mean_var(&means);
            let corrs: Option<Vec<f64>> = reports.iter().map(|r| r.stats[j].corr).collect();
            Ok(SeriesStats {
                series: series.to_string(),
                tau: first.stats[j].tau,
                mse_mean,
                mse_var,
                corr: corrs.map(|c| c.iter().sum::<f64>() / c.len() as f64),
            })
        })
        .collect()
}

/// Runs every seed, writing per-seed artifacts and the cross-seed aggregate.
/// A failing seed leaves a `.FAILED` marker and fails the whole run.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let hash = cfg.hash();
    let seeds = opts.seeds(cfg).to_vec();
    if seeds.is_empty() {
        return Err(Error::Config("seeds: at least one seed required".into()));
    }
    let mut out = RunOutput {
        config_hash: hash.clone(),
        ..Default::default()
    };
    if opts.dry_run {
        make_env(cfg, 0)?;
        return Ok(out);
    }
    let dir = opts.out_dir(cfg);
    create_dir(&dir)?;
    let results: Vec<(u64, Result<SeedReport>)> = worker_pool()?.install(|| {
        seeds
            .par_iter()
            .map(|&seed| (seed, run_seed(cfg, seed)))
            .collect()
    });
    let mut reports = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(report) => {
                out.files.extend(write_seed(cfg, &hash, &dir, &report)?);
                reports.push(report);
            }
            Err(e) => {
                let marker = dir.join(format!("{}-seed{seed}.FAILED", stem(cfg, &hash)));
                fs::write(&marker, format!("{e}\n")).map_err(|e| Error::io(&marker, e))?;
                out.files.push(marker);
                out.failures.push((seed, e.to_string()));
            }
        }
    }
    if !out.failures.is_empty() {
        let marker = dir.join(format!("{}.FAILED", stem(cfg, &hash)));
        let text: String = out
            .failures
            .iter()
            .map(|(s, e)| format!("seed {s}: {e}\n"))
            .collect();
        fs::write(&marker, text).map_err(|e| Error::io(&marker, e))?;
        out.files.push(marker);
        return Ok(out);
    }
    let table = normalized_mse(&aggregate_seeds(&cfg.name, &reports)?)?;
    let agg = dir.join(format!("{}.aggregate.csv", stem(cfg, &hash)));
    write_csv(&agg, &table.rows)?;
    let summary = dir.join(format!("{}.summary.json", stem(cfg, &hash)));
    write_json(
        &summary,
        &AggregateSummary {
            name: &cfg.name,
            config_hash: &hash,
            seeds: &seeds,
            steps: cfg.steps,
            overall_corr: reports.iter().map(|r| r.overall_corr).collect(),
            metrics: &table.rows,
        },
    )?;
    out.files.push(agg);
    out.files.push(summary);
    Ok(out)
}

/// Joins the series of several metrics files and renormalizes across them.
/// Every file must cover the same probe taus. Repeated series names get a
/// `#2`, `#3`, ... suffix.
pub fn compare_series(files: &[PathBuf], out: &Path) -> Result<NormalizedTable> {
    if files.is_empty() {
        return Err(Error::Config("compare needs at least one metrics file".into()));
    }
    let mut stats = Vec::new();
    let mut probe_set: Option<(BTreeSet<u64>, &Path)> = None;
    let mut seen: Vec<String> = Vec::new();
    for path in files {
        let rows = read_metrics(path)?;
        let taus: BTreeSet<u64> = rows.iter().map(|r| r.tau.to_bits()).collect();
        match &probe_set {
            None => probe_set = Some((taus, path)),
            Some((first, first_path)) if *first != taus => {
                return Err(Error::Config(format!(
                    "probe taus of {} differ from {}",
                    path.display(),
                    first_path.display()
                )));
            }
            Some(_) => {}
        }
        let mut local: Vec<(String, String)> = Vec::new();
        for r in rows {
            let name = match local.iter().find(|(orig, _)| *orig == r.series) {
                Some((_, renamed)) => renamed.clone(),
                None => {
                    let mut name = r.series.clone();
                    let mut k = 1;
                    while seen.contains(&name) {
                        k += 1;
                        name = format!("{}#{k}", r.series);
                    }
                    seen.push(name.clone());
                    local.push((r.series.clone(), name.clone()));
                    name
                }
            };
            stats.push(SeriesStats {
                series: name,
                tau: r.tau,
                mse_mean: r.mse_mean,
                mse_var: r.mse_var,
                corr: r.corr,
            });
        }
    }
    let table = normalized_mse(&stats)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_csv(out, &table.rows)?;
    write_csv(&out.with_extension("bars.csv"), &table.bars)?;
    Ok(table)
}

/// Analytic values of every state at each probe timescale.
pub fn oracle_mdp(cfg: &ExperimentConfig) -> Result<Vec<(Timescale, Vec<f64>)>> {
    let mdp = cfg.environment.mdp()?;
    cfg.probes
        .timescales()
        .into_iter()
        .map(|ts| Ok((ts, analytic_mdp_values(&mdp, ts.gamma())?)))
        .collect()
}

fn linear_config(cfg: &ExperimentConfig) -> Result<&LinearConfig> {
    match &cfg.learner {
        LearnerConfig::Linear(l) => Ok(l),
        LearnerConfig::Deep(_) => Err(Error::Config(
            "learner.family: probe baselines are only available for linear learners".into(),
        )),
    }
}

/// One fixed-timescale baseline per probe, each trained for `cfg.steps`.
pub fn probe_suite(cfg: &ExperimentConfig, seed: u64) -> Result<ProbeSuite<Coder>> {
    cfg.validate()?;
    let lin = linear_config(cfg)?;
    let state_dim = make_env(cfg, 0)?.state_dim();
    train_probe_suite(
        &cfg.probes,
        |ts| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ts.gamma().to_bits());
            let coder = build_coder(lin, state_dim, None, &[], &mut rng)?;
            FixedBaseline::new(coder, ts, lin.step(cfg.steps), cfg.loss_scaling)
        },
        |i| make_env(cfg, seed.wrapping_add(i as u64 + 1)),
        cfg.steps,
    )
}

fn series_stats(series: &str, ts: Timescale, truth: &[f64], preds: &[f64]) -> SeriesStats {
    let mse = truth
        .iter()
        .zip(preds)
        .map(|(t, p)| (t - p) * (t - p))
        .sum::<f64>()
        / truth.len() as f64;
    SeriesStats {
        series: series.to_string(),
        tau: ts.tau(),
        mse_mean: mse,
        mse_var: 0.0,
        corr: prediction_correlation(truth, preds).ok(),
    }
}

/// Final error of each probe baseline against the oracle.
pub fn evaluate_probes(
    cfg: &ExperimentConfig,
    suite: &ProbeSuite<Coder>,
    seed: u64,
) -> Result<Vec<SeriesStats>> {
    let points = EvalPoints::new(cfg, seed)?;
    let series = format!("{}-probes", cfg.name);
    suite
        .baselines
        .iter()
        .map(|b| {
            let ts = b.timescale();
            let preds = points
                .states
                .iter()
                .map(|s| b.value(s))
                .collect::<Result<Vec<_>>>()?;
            Ok(series_stats(&series, ts, &points.targets(ts.gamma())?, &preds))
        })
        .collect()
}

/// Error of probe interpolation at [`INTERPOLATION_TAUS`], in both scales.
pub fn evaluate_interpolation(
    cfg: &ExperimentConfig,
    suite: &ProbeSuite<Coder>,
    seed: u64,
) -> Result<Vec<SeriesStats>> {
    let points = EvalPoints::new(cfg, seed)?;
    let per_point = points
        .states
        .iter()
        .map(|s| suite.predictions(s))
        .collect::<Result<Vec<_>>>()?;
    let mut stats = Vec::new();
    for (scale, label) in [(InterpScale::Gamma, "gamma"), (InterpScale::Tau, "tau")] {
        let series = format!("{}-interp-{label}", cfg.name);
        for &tau in &INTERPOLATION_TAUS {
            let ts = Timescale::from_tau(tau)?;
            let preds = per_point
                .iter()
                .map(|p| Ok(interpolate_prediction(p, ts, scale)?.value))
                .collect::<Result<Vec<_>>>()?;
            stats.push(series_stats(&series, ts, &points.targets(ts.gamma())?, &preds));
        }
    }
    Ok(stats)
}

fn run_suite_command(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    suffix: &str,
    evaluate: fn(&ExperimentConfig, &ProbeSuite<Coder>, u64) -> Result<Vec<SeriesStats>>,
) -> Result<RunOutput> {
    cfg.validate()?;
    linear_config(cfg)?;
    let hash = cfg.hash();
    let mut out = RunOutput {
        config_hash: hash.clone(),
        ..Default::default()
    };
    if opts.dry_run {
        return Ok(out);
    }
    let dir = opts.out_dir(cfg);
    create_dir(&dir)?;
    let pool = worker_pool()?;
    for &seed in opts.seeds(cfg) {
        let stats = pool.install(|| {
            let suite = probe_suite(cfg, seed)?;
            evaluate(cfg, &suite, seed)
        })?;
        let path = dir.join(format!("{}-seed{seed}.{suffix}.csv", stem(cfg, &hash)));
        write_csv(&path, &normalized_mse(&stats)?.rows)?;
        out.files.push(path);
    }
    Ok(out)
}

/// Trains the probe suite for every seed and writes its metrics.
pub fn run_probes(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput> {
    run_suite_command(cfg, opts, "probes", evaluate_probes)
}

/// Trains the probe suite for every seed and writes the interpolation sweep.
pub fn run_interp(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput> {
    run_suite_command(cfg, opts, "interp", evaluate_interpolation)
}
