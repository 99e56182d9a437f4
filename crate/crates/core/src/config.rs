//! Declarative experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deep::DeepConfig;
use crate::env::{FiniteMdp, SquareWaveEnv};
use crate::error::{Error, Result};
use crate::eval::ProbeSet;
use crate::features::TileLayerSpec;
use crate::linear::StepSize;
use crate::timescale::{InputMode, Timescale, TimescaleInputMode, TimescaleSetSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Environment transitions per run.
    pub steps: usize,
    /// Steps between evaluations; zero means `steps / 100`.
    #[serde(default)]
    pub checkpoint_interval: usize,
    /// Fraction of the final checkpoints averaged into the metrics.
    #[serde(default = "default_eval_window")]
    pub eval_window: f64,
    #[serde(default)]
    pub probes: ProbeSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub loss_scaling: bool,
    pub environment: EnvConfig,
    #[serde(default)]
    pub timescales: TimescaleConfig,
    #[serde(default)]
    pub input: InputConfig,
    pub learner: LearnerConfig,
}

fn default_seeds() -> Vec<u64> {
    (0..6).collect()
}

fn default_eval_window() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    SquareWave {
        #[serde(default = "default_period")]
        period: usize,
    },
    Mdp {
        transitions: Vec<Vec<f64>>,
        cumulants: Vec<Vec<f64>>,
        #[serde(default)]
        terminals: Vec<usize>,
        #[serde(default)]
        start: usize,
    },
    Trace {
        path: PathBuf,
        /// Records between evaluation points.
        #[serde(default = "default_stride")]
        eval_stride: usize,
    },
}

fn default_period() -> usize {
    100
}

fn default_stride() -> usize {
    30
}

impl EnvConfig {
    pub fn mdp(&self) -> Result<FiniteMdp> {
        match self {
            EnvConfig::Mdp {
                transitions,
                cumulants,
                terminals,
                start,
            } => FiniteMdp::new(transitions.clone(), cumulants.clone(), terminals.clone(), *start)
                .map_err(|e| field("environment", e)),
            _ => Err(Error::Config("environment.kind: expected `mdp`".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimescaleConfig {
    pub always_tau: Vec<f64>,
    pub n_gamma: usize,
    pub n_tau: usize,
    pub gamma_range: [f64; 2],
    pub tau_range: [f64; 2],
    pub tau_integer: bool,
}

impl Default for TimescaleConfig {
    fn default() -> Self {
        TimescaleConfig {
            always_tau: vec![1.0, 100.0],
            n_gamma: 3,
            n_tau: 3,
            gamma_range: [0.0, 0.99],
            tau_range: [1.0, 100.0],
            tau_integer: true,
        }
    }
}

impl TimescaleConfig {
    pub fn spec(&self) -> Result<TimescaleSetSpec> {
        let always_include = self
            .always_tau
            .iter()
            .map(|&t| Timescale::from_tau(t))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| field("timescales.always_tau", e))?;
        let spec = TimescaleSetSpec {
            always_include,
            n_gamma_uniform: self.n_gamma,
            n_tau_uniform: self.n_tau,
            gamma_range: (self.gamma_range[0], self.gamma_range[1]),
            tau_range: (self.tau_range[0], self.tau_range[1]),
            tau_integer: self.tau_integer,
        };
        spec.validate().map_err(|e| field("timescales", e))?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    pub mode: InputMode,
    pub tau_max: f64,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            mode: InputMode::Both,
            tau_max: 100.0,
        }
    }
}

impl InputConfig {
    pub fn mode(&self) -> Result<TimescaleInputMode> {
        TimescaleInputMode::new(self.mode, self.tau_max).map_err(|e| field("input.tau_max", e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LearnerConfig {
    Linear(LinearConfig),
    Deep(DeepConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Tile coding of the joint (state, timescale) input.
    Tile,
    /// One-hot over (state, timescale) pairs; needs one-hot states and a
    /// timescale set without sampling.
    Tabular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearConfig {
    pub features: FeatureKind,
    pub tilings: Vec<(usize, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index_space: Option<usize>,
    pub bias: bool,
    pub step_size: f64,
    pub divide_by_active: bool,
    /// Decay the step size linearly to zero over the run.
    pub decay: bool,
}

impl Default for LinearConfig {
    /// The square-wave tiling with the robot-arm step size.
    fn default() -> Self {
        LinearConfig {
            features: FeatureKind::Tile,
            tilings: vec![(20, 1.0), (20, 0.5), (30, 0.1)],
            index_space: None,
            bias: false,
            step_size: 0.1,
            divide_by_active: true,
            decay: false,
        }
    }
}

impl LinearConfig {
    pub fn layers(&self) -> Vec<TileLayerSpec> {
        self.tilings
            .iter()
            .map(|&(n, w)| TileLayerSpec::new(n, w))
            .collect()
    }

    pub fn step(&self, steps: usize) -> StepSize {
        StepSize {
            alpha: self.step_size,
            divide_by_active: self.divide_by_active,
            decay_over: self.decay.then_some(steps as u64),
        }
    }
}

fn field(name: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) | Error::Domain(msg) | Error::Range(msg) => {
            Error::Config(format!("{name}: {msg}"))
        }
        other => Error::Config(format!("{name}: {other}")),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        // relative trace paths are resolved against the config file
        if let EnvConfig::Trace { path: trace, .. } = &mut cfg.environment {
            if trace.is_relative() {
                if let Some(dir) = path.parent() {
                    *trace = dir.join(&*trace);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every fragment, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config("name: must be non-empty without path separators".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed required".into()));
        }
        if !(self.eval_window > 0.0 && self.eval_window <= 1.0) {
            return Err(Error::Config("eval_window: must be in (0, 1]".into()));
        }
        match &self.environment {
            EnvConfig::SquareWave { period } => {
                SquareWaveEnv::new(*period).map_err(|e| field("environment.period", e))?;
            }
            EnvConfig::Mdp { .. } => {
                self.environment.mdp()?;
            }
            EnvConfig::Trace { eval_stride, .. } => {
                if *eval_stride == 0 {
                    return Err(Error::Config("environment.eval_stride: must be >= 1".into()));
                }
            }
        }
        let spec = self.timescales.spec()?;
        let mode = self.input.mode()?;
        if mode.mode != InputMode::GammaOnly {
            let max_tau = spec
                .always_include
                .iter()
                .map(|t| t.tau())
                .chain((spec.n_tau_uniform > 0).then_some(spec.tau_range.1))
                .chain(self.probes.taus().last().copied())
                .fold(1.0, f64::max);
            if max_tau > mode.tau_max {
                return Err(Error::Config(format!(
                    "input.tau_max: {} is below the largest tau used ({max_tau})",
                    mode.tau_max
                )));
            }
        }
        match &self.learner {
            LearnerConfig::Linear(l) => {
                if !(l.step_size > 0.0) {
                    return Err(Error::Config("learner.step_size: must be > 0".into()));
                }
                match l.features {
                    FeatureKind::Tile => {
                        if l.tilings.is_empty() {
                            return Err(Error::Config("learner.tilings: at least one layer".into()));
                        }
                        if l.tilings.iter().any(|&(n, w)| n == 0 || !(w > 0.0)) {
                            return Err(Error::Config(
                                "learner.tilings: counts and widths must be positive".into(),
                            ));
                        }
                    }
                    FeatureKind::Tabular => {
                        if !matches!(self.environment, EnvConfig::Mdp { .. }) {
                            return Err(Error::Config(
                                "learner.features: tabular features need an mdp environment".into(),
                            ));
                        }
                        if spec.n_gamma_uniform + spec.n_tau_uniform > 0 {
                            return Err(Error::Config(
                                "learner.features: tabular features need n_gamma = n_tau = 0".into(),
                            ));
                        }
                    }
                }
            }
            LearnerConfig::Deep(d) => d.validate().map_err(|e| field("learner", e))?,
        }
        Ok(())
    }

    /// Short content hash of everything except seeds and output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.output_dir = None;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn checkpoint_every(&self) -> usize {
        if self.checkpoint_interval > 0 {
            self.checkpoint_interval
        } else {
            (self.steps / 100).max(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
steps = 100
[environment]
kind = "square_wave"
[learner]
family = "linear"
"#;

    #[test]
    fn minimal_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.seeds, (0..6).collect::<Vec<_>>());
        assert_eq!(c.probes, ProbeSet::default());
        assert!(c.loss_scaling);
        assert_eq!(c.timescales.spec().unwrap().len(), 8);
        assert_eq!(c.environment, EnvConfig::SquareWave { period: 100 });
    }

    #[test]
    fn roundtrip() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let again = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
        let mut d = c.clone();
        d.seeds = vec![9];
        assert_eq!(c.hash(), d.hash());
        d.steps = 7;
        assert_ne!(c.hash(), d.hash());

        let deep = MINIMAL.replace("family = \"linear\"", "family = \"deep\"\nembedding = { kind = \"hadamard\" }");
        let c = ExperimentConfig::from_toml(&deep).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_fields_are_named() {
        for (text, name) in [
            (format!("{MINIMAL}bogus = 1\n"), "bogus"),
            (MINIMAL.replace("steps = 100", "steps = 100\nstepz = 3"), "stepz"),
            (MINIMAL.replace("kind = \"square_wave\"", "kind = \"square_wave\"\nperiodd = 3"), "periodd"),
            (format!("{MINIMAL}[timescales]\nn_gama = 2\n"), "n_gama"),
        ] {
            let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
            assert!(err.contains(name), "{err}");
        }
        let deep = MINIMAL.replace("family = \"linear\"", "family = \"deep\"\nlayer_sizez = [1]");
        let err = ExperimentConfig::from_toml(&deep).unwrap_err().to_string();
        assert!(err.contains("layer_sizez"), "{err}");
    }

    #[test]
    fn field_level_diagnostics() {
        let bad = MINIMAL.replace("family = \"linear\"", "family = \"linear\"\nstep_size = -1.0");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("learner.step_size"), "{err}");
        let bad = format!("{MINIMAL}[input]\ntau_max = 50.0\n");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("input.tau_max"), "{err}");
        let bad = format!("{MINIMAL}[timescales]\ngamma_range = [0.5, 0.5]\n");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("timescales"), "{err}");
    }
}
