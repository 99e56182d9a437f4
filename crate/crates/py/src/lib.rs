//! Python module `gammanet`: timescale conversions, tile-coded linear
//! Γ-nets, deep Γ-nets, environments, oracles and evaluation metrics.

use std::path::PathBuf;

use gn::deep::{Architecture, DeepGammaNet, EmbeddingKind, InitMode, InputSpec};
use gn::env::{Environment, FiniteMdp, FiniteMdpEnv, SquareWaveEnv};
use gn::eval::{self, InterpScale, SeriesStats};
use gn::experiment::{self, RunOptions};
use gn::features::{Featurizer, TileCoder, TileLayerSpec};
use gn::linear::{LinearGammaNet, StepSize};
use gn::timescale::{InputMode, TimescaleInputMode};
use gn::{config::ExperimentConfig, Timescale};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: gn::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn ts_of(g: f64) -> PyResult<Timescale> {
    Timescale::from_gamma(g).map_err(py_err)
}

fn input_mode(mode: &str, tau_max: f64) -> PyResult<TimescaleInputMode> {
    let m = match mode {
        "gamma" | "gamma_only" => InputMode::GammaOnly,
        "tau" | "tau_only" => InputMode::TauOnly,
        "both" => InputMode::Both,
        other => return Err(PyValueError::new_err(format!("unknown input mode {other:?}"))),
    };
    TimescaleInputMode::new(m, tau_max).map_err(py_err)
}

fn tile_layers(specs: Vec<(usize, f64)>) -> Vec<TileLayerSpec> {
    specs.into_iter().map(|(n, w)| TileLayerSpec::new(n, w)).collect()
}

#[pyfunction]
fn gamma_to_tau(gamma: f64) -> PyResult<f64> {
    gn::gamma_to_tau(gamma).map_err(py_err)
}

#[pyfunction]
fn tau_to_gamma(tau: f64) -> PyResult<f64> {
    gn::tau_to_gamma(tau).map_err(py_err)
}

/// Joint tile coder over a state vector followed by timescale inputs.
#[pyclass(name = "TileCoder", module = "gammanet")]
struct PyTileCoder {
    inner: TileCoder,
}

#[pymethods]
impl PyTileCoder {
    #[new]
    #[pyo3(signature = (layers, input_dim, index_space=None, bias=false, seed=0))]
    fn new(
        layers: Vec<(usize, f64)>,
        input_dim: usize,
        index_space: Option<usize>,
        bias: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = TileCoder::build(&tile_layers(layers), input_dim, index_space, bias, &mut rng)
            .map_err(py_err)?;
        Ok(PyTileCoder { inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn active_count(&self) -> usize {
        self.inner.active_count()
    }

    fn encode(&self, inputs: Vec<f64>) -> PyResult<Vec<usize>> {
        Ok(self.inner.encode(&inputs).map_err(py_err)?.indices)
    }
}

/// Tile-coded linear Γ-net trained by TD(0) over a set of discounts.
#[pyclass(name = "LinearGammaNet", module = "gammanet")]
struct PyLinearGammaNet {
    inner: LinearGammaNet<TileCoder>,
}

#[pymethods]
impl PyLinearGammaNet {
    #[new]
    #[pyo3(signature = (
        state_dim,
        layers=vec![(20, 1.0), (20, 0.5), (30, 0.1)],
        input="both",
        tau_max=100.0,
        step_size=0.1,
        divide_by_active=true,
        loss_scaling=true,
        index_space=None,
        bias=false,
        seed=0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        state_dim: usize,
        layers: Vec<(usize, f64)>,
        input: &str,
        tau_max: f64,
        step_size: f64,
        divide_by_active: bool,
        loss_scaling: bool,
        index_space: Option<usize>,
        bias: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let mode = input_mode(input, tau_max)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coder = TileCoder::build(
            &tile_layers(layers),
            state_dim + mode.width(),
            index_space,
            bias,
            &mut rng,
        )
        .map_err(py_err)?;
        let step = StepSize {
            alpha: step_size,
            divide_by_active,
            decay_over: None,
        };
        let inner = LinearGammaNet::new(coder, Some(mode), step, loss_scaling).map_err(py_err)?;
        Ok(PyLinearGammaNet { inner })
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    #[getter]
    fn updates(&self) -> u64 {
        self.inner.updates()
    }

    /// Value estimate at discount `gamma`.
    fn predict(&self, state: Vec<f64>, gamma: f64) -> PyResult<f64> {
        self.inner.predict(&state, ts_of(gamma)?).map_err(py_err)
    }

    /// One update over every discount in `gammas`; returns the TD errors.
    #[pyo3(signature = (state, next_state, cumulant, gammas, terminal=false))]
    fn td_update(
        &mut self,
        state: Vec<f64>,
        next_state: Vec<f64>,
        cumulant: f64,
        gammas: Vec<f64>,
        terminal: bool,
    ) -> PyResult<Vec<f64>> {
        let ts = gammas.into_iter().map(ts_of).collect::<PyResult<Vec<_>>>()?;
        self.inner
            .td_update(&state, &next_state, cumulant, &ts, terminal)
            .map_err(py_err)
    }
}

fn embedding(name: &str) -> PyResult<EmbeddingKind> {
    EmbeddingKind::all()
        .into_iter()
        .find(|e| e.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown embedding {name:?}")))
}

/// Fully connected Γ-net.
#[pyclass(name = "DeepGammaNet", module = "gammanet")]
struct PyDeepGammaNet {
    inner: DeepGammaNet,
}

#[pymethods]
impl PyDeepGammaNet {
    #[new]
    #[pyo3(signature = (
        phi_dim,
        layer_sizes=Architecture::TOY_LAYERS.to_vec(),
        embedding="direct",
        input="both",
        tau_max=100.0,
        loss_scaling=true,
        seed=0,
    ))]
    fn new(
        phi_dim: usize,
        layer_sizes: Vec<usize>,
        embedding: &str,
        input: &str,
        tau_max: f64,
        loss_scaling: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let arch = Architecture {
            phi_dim,
            input: Some(InputSpec::from(input_mode(input, tau_max)?)),
            embedding: self::embedding(embedding)?,
            layer_sizes,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner =
            DeepGammaNet::new(arch, loss_scaling, InitMode::Standard, &mut rng).map_err(py_err)?;
        Ok(PyDeepGammaNet { inner })
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    fn forward(&self, phi: Vec<f64>, gamma: f64) -> PyResult<f64> {
        self.inner.forward(&phi, ts_of(gamma)?).map_err(py_err)
    }
}

/// Square wave of the given period; `step()` returns
/// `(state, cumulant, next_state, terminal)`.
#[pyclass(name = "SquareWave", module = "gammanet")]
struct PySquareWave {
    inner: SquareWaveEnv,
}

#[pymethods]
impl PySquareWave {
    #[new]
    #[pyo3(signature = (period=100))]
    fn new(period: usize) -> PyResult<Self> {
        Ok(PySquareWave {
            inner: SquareWaveEnv::new(period).map_err(py_err)?,
        })
    }

    fn step(&mut self) -> PyResult<(Vec<f64>, f64, Vec<f64>, bool)> {
        let t = self.inner.step().map_err(py_err)?.expect("square wave never ends");
        Ok((t.state, t.cumulant, t.next_state, t.terminal))
    }

    fn signal(&self) -> Vec<f64> {
        self.inner.signal_sequence()
    }
}

fn mdp(
    transitions: Vec<Vec<f64>>,
    cumulants: Vec<Vec<f64>>,
    terminals: Vec<usize>,
    start: usize,
) -> PyResult<FiniteMdp> {
    FiniteMdp::new(transitions, cumulants, terminals, start).map_err(py_err)
}

#[pyfunction]
fn true_return_periodic(signal: Vec<f64>, phase: usize, gamma: f64) -> PyResult<f64> {
    eval::true_return_periodic(&signal, phase, gamma).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (transitions, cumulants, gamma, terminals=vec![], start=0))]
fn analytic_mdp_values(
    transitions: Vec<Vec<f64>>,
    cumulants: Vec<Vec<f64>>,
    gamma: f64,
    terminals: Vec<usize>,
    start: usize,
) -> PyResult<Vec<f64>> {
    let m = mdp(transitions, cumulants, terminals, start)?;
    eval::analytic_mdp_values(&m, gamma).map_err(py_err)
}

/// Returns `(mean, standard_error)` of discounted rollouts from `state`.
#[pyfunction]
#[pyo3(signature = (transitions, cumulants, state, gamma, n_rollouts, horizon, terminals=vec![], seed=0))]
#[allow(clippy::too_many_arguments)]
fn monte_carlo_mdp(
    transitions: Vec<Vec<f64>>,
    cumulants: Vec<Vec<f64>>,
    state: usize,
    gamma: f64,
    n_rollouts: usize,
    horizon: usize,
    terminals: Vec<usize>,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let env = FiniteMdpEnv::new(mdp(transitions, cumulants, terminals, 0)?, seed);
    let est = eval::monte_carlo_mdp(&env, state, gamma, n_rollouts, horizon, seed).map_err(py_err)?;
    Ok((est.mean, est.std_err))
}

#[pyfunction]
fn prediction_correlation(expected: Vec<f64>, predicted: Vec<f64>) -> PyResult<f64> {
    eval::prediction_correlation(&expected, &predicted).map_err(py_err)
}

/// Interpolates `(tau, value)` probes at `query_tau`; returns
/// `(value, lambda)`.
#[pyfunction]
#[pyo3(signature = (probes, query_tau, scale="gamma"))]
fn interpolate_prediction(probes: Vec<(f64, f64)>, query_tau: f64, scale: &str) -> PyResult<(f64, f64)> {
    let scale = match scale {
        "gamma" => InterpScale::Gamma,
        "tau" => InterpScale::Tau,
        other => return Err(PyValueError::new_err(format!("unknown scale {other:?}"))),
    };
    let probes = probes
        .into_iter()
        .map(|(t, v)| Ok((Timescale::from_tau(t).map_err(py_err)?, v)))
        .collect::<PyResult<Vec<_>>>()?;
    let query = Timescale::from_tau(query_tau).map_err(py_err)?;
    let r = eval::interpolate_prediction(&probes, query, scale).map_err(py_err)?;
    Ok((r.value, r.lambda))
}

#[pyfunction]
fn compose_difference_return(v_long: f64, gamma_long: f64, v_short: f64, gamma_short: f64) -> PyResult<f64> {
    eval::compose_difference_return(v_long, gamma_long, v_short, gamma_short).map_err(py_err)
}

/// Normalizes `(series, tau, mse_mean, mse_var)` rows across series.
/// Returns `(series, tau, norm_mse, norm_var)` rows.
#[pyfunction]
fn normalized_mse(rows: Vec<(String, f64, f64, f64)>) -> PyResult<Vec<(String, f64, f64, f64)>> {
    let stats: Vec<SeriesStats> = rows
        .into_iter()
        .map(|(series, tau, mse_mean, mse_var)| SeriesStats {
            series,
            tau,
            mse_mean,
            mse_var,
            corr: None,
        })
        .collect();
    let table = eval::normalized_mse(&stats).map_err(py_err)?;
    Ok(table
        .rows
        .into_iter()
        .map(|r| (r.series, r.tau, r.norm_mse, r.norm_var))
        .collect())
}

/// Validates a config file and returns its hash.
#[pyfunction]
fn config_hash(path: PathBuf) -> PyResult<String> {
    Ok(ExperimentConfig::load(path).map_err(py_err)?.hash())
}

/// Runs an experiment config and returns the paths it wrote.
#[pyfunction]
#[pyo3(signature = (path, seeds=None, out_dir=None))]
fn run_experiment(
    py: Python<'_>,
    path: PathBuf,
    seeds: Option<Vec<u64>>,
    out_dir: Option<PathBuf>,
) -> PyResult<Vec<PathBuf>> {
    let cfg = ExperimentConfig::load(path).map_err(py_err)?;
    let opts = RunOptions {
        seeds,
        out_dir,
        dry_run: false,
    };
    let out = py
        .detach(|| experiment::run_experiment(&cfg, &opts))
        .map_err(py_err)?;
    if let Some((seed, e)) = out.failures.first() {
        return Err(PyValueError::new_err(format!("seed {seed} failed: {e}")));
    }
    Ok(out.files)
}

#[pymodule]
#[pyo3(name = "gammanet")]
fn gammanet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTileCoder>()?;
    m.add_class::<PyLinearGammaNet>()?;
    m.add_class::<PyDeepGammaNet>()?;
    m.add_class::<PySquareWave>()?;
    m.add_function(wrap_pyfunction!(gamma_to_tau, m)?)?;
    m.add_function(wrap_pyfunction!(tau_to_gamma, m)?)?;
    m.add_function(wrap_pyfunction!(true_return_periodic, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_mdp_values, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo_mdp, m)?)?;
    m.add_function(wrap_pyfunction!(prediction_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(interpolate_prediction, m)?)?;
    m.add_function(wrap_pyfunction!(compose_difference_return, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_mse, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
