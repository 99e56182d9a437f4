//! Transition streams: a periodic square wave, finite Markov chains with
//! known dynamics, and replay of recorded traces.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One observed transition. `cumulant` is the signal received on arrival in
/// the next state.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub cumulant: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

pub trait Environment {
    /// Length of the observation vectors.
    fn state_dim(&self) -> usize;

    /// Advances by one transition. `Ok(None)` means the stream is exhausted.
    fn step(&mut self) -> Result<Option<Transition>>;
}

/// Environments whose current state can be copied into an independent
/// instance with its own random stream.
pub trait Restorable: Environment + Sized {
    fn fork(&self, seed: u64) -> Self;
}

/// A square wave of magnitude one: `+1` on the first half-period of phases
/// and `-1` on the second.
#[derive(Clone, Debug)]
pub struct SquareWaveEnv {
    period: usize,
    phase: usize,
}

impl SquareWaveEnv {
    pub fn new(period: usize) -> Result<Self> {
        if period < 2 {
            return Err(Error::Config(format!("square wave period {period} < 2")));
        }
        Ok(SquareWaveEnv { period, phase: 0 })
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn phase(&self) -> usize {
        self.phase
    }

    pub fn set_phase(&mut self, phase: usize) {
        self.phase = phase % self.period;
    }

    pub fn signal(&self, phase: usize) -> f64 {
        if phase % self.period < self.period / 2 {
            1.0
        } else {
            -1.0
        }
    }

    /// The signal over one period, indexed by phase.
    pub fn signal_sequence(&self) -> Vec<f64> {
        (0..self.period).map(|p| self.signal(p)).collect()
    }

    pub fn observe(&self, phase: usize) -> Vec<f64> {
        vec![(phase % self.period) as f64 / self.period as f64]
    }
}

impl Environment for SquareWaveEnv {
    fn state_dim(&self) -> usize {
        1
    }

    fn step(&mut self) -> Result<Option<Transition>> {
        let next = (self.phase + 1) % self.period;
        let t = Transition {
            state: self.observe(self.phase),
            cumulant: self.signal(next),
            next_state: self.observe(next),
            terminal: false,
        };
        self.phase = next;
        Ok(Some(t))
    }
}

impl Restorable for SquareWaveEnv {
    fn fork(&self, _seed: u64) -> Self {
        self.clone()
    }
}

/// Dynamics of a finite Markov chain with the policy already folded in.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteMdp {
    transitions: Vec<Vec<f64>>,
    cumulants: Vec<Vec<f64>>,
    terminals: Vec<bool>,
    start: usize,
}

impl FiniteMdp {
    /// `transitions[s][s']` is `P(s' | s)`; `cumulants[s][s']` the expected
    /// cumulant on that transition. Rows of terminal states are ignored.
    pub fn new(
        transitions: Vec<Vec<f64>>,
        cumulants: Vec<Vec<f64>>,
        terminals: Vec<usize>,
        start: usize,
    ) -> Result<Self> {
        let n = transitions.len();
        if n == 0 {
            return Err(Error::Config("MDP has no states".into()));
        }
        if cumulants.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: cumulants.len(),
            });
        }
        let mut is_terminal = vec![false; n];
        for t in terminals {
            if t >= n {
                return Err(Error::Config(format!("terminal state {t} out of range")));
            }
            is_terminal[t] = true;
        }
        for (s, (row, crow)) in transitions.iter().zip(&cumulants).enumerate() {
            if row.len() != n || crow.len() != n {
                return Err(Error::Config(format!("row {s} does not have {n} entries")));
            }
            if is_terminal[s] {
                continue;
            }
            if row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::Config(format!("row {s} has a negative probability")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("row {s} sums to {sum}, not 1")));
            }
        }
        if start >= n || is_terminal[start] {
            return Err(Error::Config(format!("invalid start state {start}")));
        }
        Ok(FiniteMdp {
            transitions,
            cumulants,
            terminals: is_terminal,
            start,
        })
    }

    /// Deterministic two-state cycle paying `c01` on `0 -> 1` and `c10` on
    /// `1 -> 0`.
    pub fn two_state_cycle(c01: f64, c10: f64) -> Self {
        FiniteMdp::new(
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![vec![0.0, c01], vec![c10, 0.0]],
            vec![],
            0,
        )
        .expect("valid cycle")
    }

    pub fn n_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminals[s]
    }

    pub fn transitions(&self) -> &[Vec<f64>] {
        &self.transitions
    }

    pub fn cumulants(&self) -> &[Vec<f64>] {
        &self.cumulants
    }

    pub fn prob(&self, s: usize, next: usize) -> f64 {
        self.transitions[s][next]
    }

    pub fn cumulant(&self, s: usize, next: usize) -> f64 {
        self.cumulants[s][next]
    }

    /// Expected one-step cumulant from each state; zero for terminals.
    pub fn expected_cumulants(&self) -> Vec<f64> {
        (0..self.n_states())
            .map(|s| {
                if self.terminals[s] {
                    0.0
                } else {
                    (0..self.n_states())
                        .map(|n| self.transitions[s][n] * self.cumulants[s][n])
                        .sum()
                }
            })
            .collect()
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states()];
        v[s] = 1.0;
        v
    }

    fn sample_next<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let row = &self.transitions[s];
        let mut acc = 0.0;
        for (n, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return n;
            }
        }
        // rounding left u above the last cumulative sum
        row.iter().rposition(|p| *p > 0.0).unwrap_or(s)
    }
}

/// A running [`FiniteMdp`]. Observations are one-hot state vectors; after a
/// terminal transition the chain restarts from its start state.
#[derive(Clone, Debug)]
pub struct FiniteMdpEnv {
    mdp: Arc<FiniteMdp>,
    state: usize,
    rng: ChaCha8Rng,
}

impl FiniteMdpEnv {
    pub fn new(mdp: FiniteMdp, seed: u64) -> Self {
        let state = mdp.start;
        FiniteMdpEnv {
            mdp: Arc::new(mdp),
            state,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mdp(&self) -> &FiniteMdp {
        &self.mdp
    }

    pub fn state(&self) -> usize {
        self.state
    }

    /// Copy positioned at `state`, with its own random stream.
    pub fn at_state(&self, state: usize, seed: u64) -> Result<Self> {
        if state >= self.mdp.n_states() || self.mdp.is_terminal(state) {
            return Err(Error::Domain(format!("cannot restore to state {state}")));
        }
        Ok(FiniteMdpEnv {
            mdp: Arc::clone(&self.mdp),
            state,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl Environment for FiniteMdpEnv {
    fn state_dim(&self) -> usize {
        self.mdp.n_states()
    }

    fn step(&mut self) -> Result<Option<Transition>> {
        let s = self.state;
        let next = self.mdp.sample_next(s, &mut self.rng);
        let terminal = self.mdp.is_terminal(next);
        let t = Transition {
            state: self.mdp.one_hot(s),
            cumulant: self.mdp.cumulant(s, next),
            next_state: self.mdp.one_hot(next),
            terminal,
        };
        self.state = if terminal { self.mdp.start } else { next };
        Ok(Some(t))
    }
}

impl Restorable for FiniteMdpEnv {
    fn fork(&self, seed: u64) -> Self {
        FiniteMdpEnv {
            mdp: Arc::clone(&self.mdp),
            state: self.state,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub obs: Vec<f64>,
    pub cumulant: f64,
    pub terminal: bool,
}

/// Column names of a trace file. Observation columns are `{obs_prefix}0`,
/// `{obs_prefix}1`, ... and must be contiguous.
#[derive(Clone, Debug)]
pub struct TraceSchema {
    pub obs_prefix: String,
    pub cumulant: String,
    pub terminal: String,
}

impl Default for TraceSchema {
    fn default() -> Self {
        TraceSchema {
            obs_prefix: "obs_".into(),
            cumulant: "cumulant".into(),
            terminal: "terminal".into(),
        }
    }
}

/// Replays recorded transitions in file order.
///
/// Row `i` holds the observation of `S_i`, the cumulant received on leaving
/// it, and whether that transition ended the episode. The next state of a
/// non-terminal row is the observation of row `i + 1`, so a trailing
/// non-terminal row yields no transition.
#[derive(Clone, Debug)]
pub struct TraceReplay {
    records: Arc<Vec<TraceRecord>>,
    obs_dim: usize,
    cursor: usize,
}

impl TraceReplay {
    pub fn from_records(records: Vec<TraceRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Config("trace has no records".into()))?;
        let obs_dim = first.obs.len();
        if let Some(i) = records.iter().position(|r| r.obs.len() != obs_dim) {
            return Err(Error::Dimension {
                expected: obs_dim,
                got: records[i].obs.len(),
            });
        }
        Ok(TraceReplay {
            records: Arc::new(records),
            obs_dim,
            cursor: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    /// Discounted return from every row, following the trace to the end of
    /// its episode. Returns that run off the end of the file are truncated
    /// there.
    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        let n = self.records.len();
        let mut out = vec![0.0; n];
        let mut acc = 0.0;
        for i in (0..n).rev() {
            let r = &self.records[i];
            acc = if r.terminal {
                r.cumulant
            } else if i + 1 == n {
                0.0
            } else {
                r.cumulant + gamma * acc
            };
            out[i] = acc;
        }
        out
    }
}

impl Environment for TraceReplay {
    fn state_dim(&self) -> usize {
        self.obs_dim
    }

    fn step(&mut self) -> Result<Option<Transition>> {
        let i = self.cursor;
        let Some(rec) = self.records.get(i) else {
            return Ok(None);
        };
        let next_state = if rec.terminal {
            rec.obs.clone()
        } else {
            match self.records.get(i + 1) {
                Some(next) => next.obs.clone(),
                None => return Ok(None),
            }
        };
        self.cursor += 1;
        Ok(Some(Transition {
            state: rec.obs.clone(),
            cumulant: rec.cumulant,
            next_state,
            terminal: rec.terminal,
        }))
    }
}

/// Loads a trace CSV. Errors name the offending line.
pub fn load_trace(path: impl AsRef<Path>, schema: &TraceSchema) -> Result<TraceReplay> {
    let path = path.as_ref();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.is_empty() {
        return Err(parse_err(1, "missing header row".into()));
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))
    };
    let c_col = find(&schema.cumulant)?;
    let t_col = find(&schema.terminal)?;
    let mut obs_cols = Vec::new();
    while let Some(p) = headers
        .iter()
        .position(|h| h == format!("{}{}", schema.obs_prefix, obs_cols.len()))
    {
        obs_cols.push(p);
    }
    if obs_cols.is_empty() {
        return Err(parse_err(1, format!("no `{}0` column", schema.obs_prefix)));
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let num = |col: usize| -> Result<f64> {
            let raw = &row[col];
            raw.parse::<f64>()
                .map_err(|_| parse_err(line, format!("`{}` is not a number: {raw:?}", &headers[col])))
        };
        let obs = obs_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
        let cumulant = num(c_col)?;
        let terminal = match &row[t_col] {
            "0" => false,
            "1" => true,
            other => {
                return Err(parse_err(line, format!("terminal must be 0 or 1, got {other:?}")))
            }
        };
        records.push(TraceRecord {
            obs,
            cumulant,
            terminal,
        });
    }
    if records.is_empty() {
        return Err(parse_err(1, "trace has no records".into()));
    }
    TraceReplay::from_records(records)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("expected {expected_len} fields, found {len}"),
        },
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn square_wave_halves() {
        let mut env = SquareWaveEnv::new(100).unwrap();
        let t = env.step().unwrap().unwrap();
        assert_eq!(t.cumulant, 1.0);
        assert_eq!(t.state, vec![0.0]);
        env.set_phase(50);
        assert_eq!(env.step().unwrap().unwrap().cumulant, -1.0);
        env.set_phase(49);
        assert_eq!(env.step().unwrap().unwrap().cumulant, -1.0);
        env.set_phase(99);
        let t = env.step().unwrap().unwrap();
        assert_eq!((t.cumulant, t.next_state[0]), (1.0, 0.0));
    }

    #[test]
    fn square_wave_periodic() {
        let mut env = SquareWaveEnv::new(100).unwrap();
        let first: Vec<_> = (0..100).map(|_| env.step().unwrap().unwrap()).collect();
        for lap in 0..3 {
            for (i, t) in first.iter().enumerate() {
                let again = env.step().unwrap().unwrap();
                assert_eq!(&again, t, "lap {lap} step {i}");
                assert!(!again.terminal);
            }
        }
    }

    #[test]
    fn deterministic_cycle() {
        let mut env = FiniteMdpEnv::new(FiniteMdp::two_state_cycle(1.0, 1.0), 0);
        for i in 0..10 {
            let t = env.step().unwrap().unwrap();
            assert_eq!(t.state[i % 2], 1.0);
            assert_eq!(t.next_state[(i + 1) % 2], 1.0);
            assert_eq!(t.cumulant, 1.0);
        }
    }

    #[test]
    fn mdp_validation() {
        let bad_row = FiniteMdp::new(vec![vec![0.5, 0.4], vec![1.0, 0.0]], vec![vec![0.0; 2]; 2], vec![], 0);
        assert!(matches!(bad_row, Err(Error::Config(_))));
        let bad_start = FiniteMdp::new(vec![vec![0.0, 1.0], vec![0.0, 0.0]], vec![vec![0.0; 2]; 2], vec![1], 1);
        assert!(bad_start.is_err());
        let ok = FiniteMdp::new(vec![vec![0.0, 1.0], vec![0.0, 0.0]], vec![vec![0.0; 2]; 2], vec![1], 0);
        assert!(ok.is_ok());
    }

    #[test]
    fn terminal_restarts() {
        let mdp = FiniteMdp::new(
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0; 3]],
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 2.0], vec![0.0; 3]],
            vec![2],
            0,
        )
        .unwrap();
        let mut env = FiniteMdpEnv::new(mdp, 0);
        env.step().unwrap();
        let t = env.step().unwrap().unwrap();
        assert!(t.terminal);
        assert_eq!(t.cumulant, 2.0);
        assert_eq!(env.state(), 0);
    }

    #[test]
    fn empirical_frequencies_match_p() {
        let p = vec![
            vec![0.1, 0.6, 0.3],
            vec![0.5, 0.25, 0.25],
            vec![0.2, 0.2, 0.6],
        ];
        let mdp = FiniteMdp::new(p.clone(), vec![vec![0.0; 3]; 3], vec![], 0).unwrap();
        let mut env = FiniteMdpEnv::new(mdp, 42);
        let mut counts = vec![vec![0usize; 3]; 3];
        for _ in 0..150_000 {
            let t = env.step().unwrap().unwrap();
            let s = t.state.iter().position(|&x| x == 1.0).unwrap();
            let n = t.next_state.iter().position(|&x| x == 1.0).unwrap();
            counts[s][n] += 1;
        }
        // chi-squared per row, 2 degrees of freedom; 13.8 is the 0.999 quantile
        for s in 0..3 {
            let total: usize = counts[s].iter().sum();
            let chi2: f64 = (0..3)
                .map(|n| {
                    let e = p[s][n] * total as f64;
                    (counts[s][n] as f64 - e).powi(2) / e
                })
                .sum();
            assert!(chi2 < 13.8, "row {s}: chi2 {chi2}");
        }
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_well_formed_trace() {
        let f = write("obs_0,obs_1,cumulant,terminal\n0.1,0.2,1.0,0\n0.3,0.4,2.0,1\n0.5,0.6,3.0,0\n");
        let mut tr = load_trace(f.path(), &TraceSchema::default()).unwrap();
        assert_eq!(tr.len(), 3);
        assert_eq!(tr.state_dim(), 2);
        let a = tr.step().unwrap().unwrap();
        assert_eq!((a.state.clone(), a.next_state.clone()), (vec![0.1, 0.2], vec![0.3, 0.4]));
        let b = tr.step().unwrap().unwrap();
        assert!(b.terminal);
        // last row is not terminal and has no successor
        assert!(tr.step().unwrap().is_none());
    }

    #[test]
    fn trace_errors() {
        let f = write("obs_0,cumulant,terminal\n0.1,1.0,0\n0.2,abc,0\n");
        match load_trace(f.path(), &TraceSchema::default()) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("cumulant"));
            }
            other => panic!("{other:?}"),
        }
        let f = write("obs_0,cumulant,terminal\n");
        assert!(matches!(load_trace(f.path(), &TraceSchema::default()), Err(Error::Parse { .. })));
        let f = write("");
        assert!(load_trace(f.path(), &TraceSchema::default()).is_err());
        let f = write("obs_0,cumulant,terminal\n0.1,1.0,0\n0.2,0.3,1.0,0\n");
        assert!(matches!(
            load_trace(f.path(), &TraceSchema::default()),
            Err(Error::Parse { line: 3, .. })
        ));
        let f = write("obs_0,cumulant,terminal\n0.1,1.0,2\n");
        assert!(load_trace(f.path(), &TraceSchema::default()).is_err());
    }

    #[test]
    fn trace_reload_identical() {
        let f = write("obs_0,cumulant,terminal\n0.1,0.30000000000000004,0\n0.2,1e-3,1\n");
        let a = load_trace(f.path(), &TraceSchema::default()).unwrap();
        let b = load_trace(f.path(), &TraceSchema::default()).unwrap();
        assert_eq!(a.records(), b.records());
        assert_eq!(a.records()[0].cumulant.to_bits(), 0.30000000000000004f64.to_bits());
    }

    #[test]
    fn trace_returns_respect_episodes() {
        let recs = [(1.0, false), (2.0, true), (4.0, false), (8.0, false)]
            .iter()
            .map(|&(c, t)| TraceRecord { obs: vec![0.0], cumulant: c, terminal: t })
            .collect();
        let tr = TraceReplay::from_records(recs).unwrap();
        let g = tr.returns(0.5);
        assert_eq!(g, vec![2.0, 2.0, 4.0, 0.0]);
    }
}
