//! Timescales as paired discount / expected-horizon values.
//!
//! A discount `gamma` read as a continuation probability gives an expected
//! horizon `tau = 1 / (1 - gamma)` timesteps. Either form is accepted anywhere
//! a [`Timescale`] is built; both are kept so that neither has to be
//! recomputed on hot paths.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Converts a discount into its expected horizon in timesteps.
pub fn gamma_to_tau(gamma: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Domain(format!("gamma {gamma} outside [0, 1)")));
    }
    Ok(1.0 / (1.0 - gamma))
}

/// Converts an expected horizon back into a discount.
pub fn tau_to_gamma(tau: f64) -> Result<f64> {
    if !(tau >= 1.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("tau {tau} must be finite and >= 1")));
    }
    Ok(1.0 - 1.0 / tau)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTimescale", into = "RawTimescale")]
pub struct Timescale {
    gamma: f64,
    tau: f64,
}

impl Timescale {
    pub fn from_gamma(gamma: f64) -> Result<Self> {
        let tau = gamma_to_tau(gamma)?;
        Ok(Timescale { gamma, tau })
    }

    pub fn from_tau(tau: f64) -> Result<Self> {
        let gamma = tau_to_gamma(tau)?;
        if gamma >= 1.0 {
            return Err(Error::Domain(format!("tau {tau} too large to represent")));
        }
        Ok(Timescale { gamma, tau })
    }

    #[inline]
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    #[inline]
    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// `1 - gamma`, the factor applied by loss scaling.
    #[inline]
    pub fn scale(&self) -> f64 {
        1.0 - self.gamma
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawTimescale {
    Tau { tau: f64 },
    Gamma { gamma: f64 },
}

impl TryFrom<RawTimescale> for Timescale {
    type Error = Error;

    fn try_from(raw: RawTimescale) -> Result<Self> {
        match raw {
            RawTimescale::Tau { tau } => Timescale::from_tau(tau),
            RawTimescale::Gamma { gamma } => Timescale::from_gamma(gamma),
        }
    }
}

impl From<Timescale> for RawTimescale {
    fn from(ts: Timescale) -> Self {
        RawTimescale::Tau { tau: ts.tau }
    }
}

/// Describes how a training set of timescales is drawn on each step.
#[derive(Clone, Debug, PartialEq)]
pub struct TimescaleSetSpec {
    pub always_include: Vec<Timescale>,
    pub n_gamma_uniform: usize,
    pub n_tau_uniform: usize,
    pub gamma_range: (f64, f64),
    pub tau_range: (f64, f64),
    pub tau_integer: bool,
}

impl Default for TimescaleSetSpec {
    /// Eight timescales: the bounds `tau = 1` and `tau = 100` plus three
    /// drawn from each scale.
    fn default() -> Self {
        TimescaleSetSpec {
            always_include: vec![
                Timescale::from_tau(1.0).unwrap(),
                Timescale::from_tau(100.0).unwrap(),
            ],
            n_gamma_uniform: 3,
            n_tau_uniform: 3,
            gamma_range: (0.0, 0.99),
            tau_range: (1.0, 100.0),
            tau_integer: true,
        }
    }
}

impl TimescaleSetSpec {
    /// A set containing only the given timescale, with no sampling.
    pub fn fixed(ts: Timescale) -> Self {
        TimescaleSetSpec {
            always_include: vec![ts],
            n_gamma_uniform: 0,
            n_tau_uniform: 0,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.always_include.len() + self.n_gamma_uniform + self.n_tau_uniform
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config("timescale set is empty".into()));
        }
        if self.n_gamma_uniform > 0 {
            let (lo, hi) = self.gamma_range;
            if !(lo >= 0.0 && lo < hi && hi <= 1.0) {
                return Err(Error::Config(format!(
                    "gamma_range [{lo}, {hi}) must be a non-empty subrange of [0, 1)"
                )));
            }
        }
        if self.n_tau_uniform > 0 {
            let (lo, hi) = self.tau_range;
            if !(lo >= 1.0 && lo < hi && hi.is_finite()) {
                return Err(Error::Config(format!(
                    "tau_range [{lo}, {hi}) must be a non-empty subrange of [1, inf)"
                )));
            }
            if self.tau_integer && lo.ceil() >= hi {
                return Err(Error::Config(format!(
                    "tau_range [{lo}, {hi}) contains no integer"
                )));
            }
        }
        Ok(())
    }

    /// Draws one training set. The fixed members come first, followed by the
    /// gamma-uniform draws and then the tau-uniform draws.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<Timescale>> {
        let mut out = Vec::with_capacity(self.len());
        self.sample_into(rng, &mut out)?;
        Ok(out)
    }

    pub fn sample_into<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        out: &mut Vec<Timescale>,
    ) -> Result<()> {
        self.validate()?;
        out.clear();
        out.extend_from_slice(&self.always_include);
        let (glo, ghi) = self.gamma_range;
        for _ in 0..self.n_gamma_uniform {
            out.push(Timescale::from_gamma(rng.gen_range(glo..ghi))?);
        }
        let (tlo, thi) = self.tau_range;
        for _ in 0..self.n_tau_uniform {
            let tau = if self.tau_integer {
                // integers in [ceil(lo), hi)
                let lo = tlo.ceil() as u64;
                let hi = thi.ceil() as u64;
                rng.gen_range(lo..hi) as f64
            } else {
                rng.gen_range(tlo..thi)
            };
            out.push(Timescale::from_tau(tau)?);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    GammaOnly,
    TauOnly,
    Both,
}

impl InputMode {
    pub fn width(self) -> usize {
        match self {
            InputMode::GammaOnly | InputMode::TauOnly => 1,
            InputMode::Both => 2,
        }
    }
}

/// How a timescale is presented to a learner as input scalars.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimescaleInputMode {
    pub mode: InputMode,
    /// Normalizer for tau inputs, in timesteps.
    pub tau_max: f64,
}

impl Default for TimescaleInputMode {
    fn default() -> Self {
        TimescaleInputMode {
            mode: InputMode::Both,
            tau_max: 100.0,
        }
    }
}

impl TimescaleInputMode {
    pub fn new(mode: InputMode, tau_max: f64) -> Result<Self> {
        if !(tau_max >= 1.0) {
            return Err(Error::Config(format!("tau_max {tau_max} must be >= 1")));
        }
        Ok(TimescaleInputMode { mode, tau_max })
    }

    pub fn width(&self) -> usize {
        self.mode.width()
    }

    pub fn encode(&self, ts: Timescale) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(2);
        self.encode_into(ts, &mut out)?;
        Ok(out)
    }

    /// Appends the encoded inputs to `out`.
    pub fn encode_into(&self, ts: Timescale, out: &mut Vec<f64>) -> Result<()> {
        let needs_tau = self.mode != InputMode::GammaOnly;
        // small slack for taus computed through a gamma round trip
        if needs_tau && ts.tau() > self.tau_max * (1.0 + 1e-9) {
            return Err(Error::Range(format!(
                "tau {} exceeds tau_max {}",
                ts.tau(),
                self.tau_max
            )));
        }
        let tau_in = (ts.tau() / self.tau_max).min(1.0);
        match self.mode {
            InputMode::GammaOnly => out.push(ts.gamma()),
            InputMode::TauOnly => out.push(tau_in),
            InputMode::Both => {
                out.push(ts.gamma());
                out.push(tau_in);
            }
        }
        Ok(())
    }
}
