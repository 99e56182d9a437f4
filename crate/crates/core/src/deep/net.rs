use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timescale::{Timescale, TimescaleInputMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Linear,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    fn grad(self, pre: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// How timescale inputs are combined with the feature vector `phi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingKind {
    /// `[phi, ts]`
    Direct,
    /// `[phi, xi(ts)]` with `xi` a learned map to `size` outputs.
    LearnedConcat {
        #[serde(default = "default_embed_size")]
        size: usize,
        #[serde(default)]
        activation: Activation,
    },
    /// `phi * xi(ts)` element-wise, `xi` of the same length as `phi`.
    Hadamard {
        #[serde(default)]
        activation: Activation,
    },
    /// `phi^T Xi(ts)` with `Xi` a learned square matrix.
    Matrix {
        #[serde(default)]
        activation: Activation,
    },
}

fn default_embed_size() -> usize {
    16
}

impl EmbeddingKind {
    pub fn learned_concat() -> Self {
        EmbeddingKind::LearnedConcat {
            size: 16,
            activation: Activation::Linear,
        }
    }

    pub fn hadamard() -> Self {
        EmbeddingKind::Hadamard {
            activation: Activation::Linear,
        }
    }

    pub fn matrix() -> Self {
        EmbeddingKind::Matrix {
            activation: Activation::Linear,
        }
    }

    pub fn all() -> [EmbeddingKind; 4] {
        [
            EmbeddingKind::Direct,
            Self::learned_concat(),
            Self::hadamard(),
            Self::matrix(),
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            EmbeddingKind::Direct => "direct",
            EmbeddingKind::LearnedConcat { .. } => "l_embed",
            EmbeddingKind::Hadamard { .. } => "h_l_embed",
            EmbeddingKind::Matrix { .. } => "matrix",
        }
    }

    fn activation(&self) -> Activation {
        match *self {
            EmbeddingKind::Direct => Activation::Linear,
            EmbeddingKind::LearnedConcat { activation, .. }
            | EmbeddingKind::Hadamard { activation }
            | EmbeddingKind::Matrix { activation } => activation,
        }
    }

    /// Width of the learned `xi` vector for features of length `phi_dim`.
    fn xi_dim(&self, phi_dim: usize) -> usize {
        match *self {
            EmbeddingKind::Direct => 0,
            EmbeddingKind::LearnedConcat { size, .. } => size,
            EmbeddingKind::Hadamard { .. } => phi_dim,
            EmbeddingKind::Matrix { .. } => phi_dim * phi_dim,
        }
    }

    fn output_dim(&self, phi_dim: usize, ts_dim: usize) -> usize {
        match *self {
            EmbeddingKind::Direct => phi_dim + ts_dim,
            EmbeddingKind::LearnedConcat { size, .. } => phi_dim + size,
            EmbeddingKind::Hadamard { .. } | EmbeddingKind::Matrix { .. } => phi_dim,
        }
    }
}

/// Shape of a [`DeepGammaNet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub phi_dim: usize,
    /// `None` for a fixed-timescale network that sees no timescale input.
    pub input: Option<InputSpec>,
    pub embedding: EmbeddingKind,
    /// Output sizes of the fully connected layers; the last must be 1.
    pub layer_sizes: Vec<usize>,
}

/// Serializable form of [`TimescaleInputMode`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub mode: crate::timescale::InputMode,
    pub tau_max: f64,
}

impl From<TimescaleInputMode> for InputSpec {
    fn from(m: TimescaleInputMode) -> Self {
        InputSpec {
            mode: m.mode,
            tau_max: m.tau_max,
        }
    }
}

impl InputSpec {
    pub fn mode(&self) -> Result<TimescaleInputMode> {
        TimescaleInputMode::new(self.mode, self.tau_max)
    }
}

impl Architecture {
    /// Layer sizes used for desk-scale runs.
    pub const TOY_LAYERS: [usize; 5] = [32, 16, 8, 4, 1];
    /// Layer sizes of the full-scale network.
    pub const FULL_LAYERS: [usize; 5] = [512, 256, 128, 16, 1];

    pub fn ts_dim(&self) -> usize {
        self.input.map_or(0, |i| i.mode.width())
    }

    fn validate(&self) -> Result<()> {
        if self.phi_dim == 0 {
            return Err(Error::Config("phi_dim must be >= 1".into()));
        }
        match self.layer_sizes.last() {
            Some(1) => {}
            _ => return Err(Error::Config("final layer must have one output".into())),
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.input.is_none() && self.embedding != EmbeddingKind::Direct {
            return Err(Error::Config(
                "a network without timescale input needs the direct embedding".into(),
            ));
        }
        if let EmbeddingKind::LearnedConcat { size: 0, .. } = self.embedding {
            return Err(Error::Config("embedding size must be >= 1".into()));
        }
        if let Some(i) = self.input {
            i.mode()?;
        }
        Ok(())
    }
}

/// Offsets of every parameter block inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    embed_w: usize,
    embed_b: usize,
    xi_dim: usize,
    /// (weights offset, bias offset, in, out) per dense layer
    layers: Vec<(usize, usize, usize, usize)>,
    total: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let ts_dim = arch.ts_dim();
        let xi_dim = arch.embedding.xi_dim(arch.phi_dim);
        let embed_w = 0;
        let embed_b = xi_dim * ts_dim;
        let mut off = embed_b + xi_dim;
        let mut input = arch.embedding.output_dim(arch.phi_dim, ts_dim);
        let mut layers = Vec::with_capacity(arch.layer_sizes.len());
        for &out in &arch.layer_sizes {
            let w = off;
            let b = w + out * input;
            layers.push((w, b, input, out));
            off = b + out;
            input = out;
        }
        Layout {
            embed_w,
            embed_b,
            xi_dim,
            layers,
            total: off,
        }
    }
}

/// Initial parameter scheme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitMode {
    #[default]
    Standard,
    /// Standard initialization with the output layer multiplied by
    /// `1 - reference_gamma`, so the rescaled predictions start out at the
    /// magnitude an unscaled head would have.
    Scaled { reference_gamma: f64 },
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(InitMode::Standard),
            "scaled" => Ok(InitMode::Scaled {
                reference_gamma: 0.99,
            }),
            other => Err(Error::Config(format!("unknown init mode `{other}`"))),
        }
    }
}

/// Scratch space for one forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Cache {
    ts: Vec<f64>,
    xi_pre: Vec<f64>,
    xi: Vec<f64>,
    /// inputs to each dense layer; `acts[0]` is the embedding output
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    d_cur: Vec<f64>,
    d_prev: Vec<f64>,
}

/// Initial bias of every hidden ReLU unit. Keeps narrow layers from
/// starting out dead on sparse inputs.
pub const HIDDEN_BIAS: f64 = 0.5;

/// A fully connected Γ-net over `(phi, timescale)`.
///
/// All parameters live in one flat vector: the embedding's affine map
/// (row-major weights, then bias), followed by each dense layer's row-major
/// `out x in` weights and its bias. Hidden layers use ReLU; the output layer
/// is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepGammaNet {
    arch: Architecture,
    loss_scaling: bool,
    layout: Layout,
    params: Vec<f64>,
}

impl DeepGammaNet {
    pub fn new<R: Rng + ?Sized>(
        arch: Architecture,
        loss_scaling: bool,
        init: InitMode,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut net = DeepGammaNet {
            params: vec![0.0; layout.total],
            arch,
            loss_scaling,
            layout,
        };
        net.init_standard(rng);
        net.init_scaled_weights(init)?;
        Ok(net)
    }

    /// Builds a network around existing parameters.
    pub fn from_params(arch: Architecture, loss_scaling: bool, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.total {
            return Err(Error::Dimension {
                expected: layout.total,
                got: params.len(),
            });
        }
        Ok(DeepGammaNet {
            arch,
            loss_scaling,
            layout,
            params,
        })
    }

    fn init_standard<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let ts_dim = self.arch.ts_dim();
        let l = &self.layout;
        if l.xi_dim > 0 {
            let lim = 1.0 / (ts_dim.max(1) as f64).sqrt();
            for w in &mut self.params[l.embed_w..l.embed_b] {
                *w = rng.gen_range(-lim..lim);
            }
            let bias = &mut self.params[l.embed_b..l.embed_b + l.xi_dim];
            match self.arch.embedding {
                EmbeddingKind::Hadamard { .. } => bias.fill(1.0),
                EmbeddingKind::Matrix { .. } => {
                    let d = self.arch.phi_dim;
                    for i in 0..d {
                        bias[i * d + i] = 1.0;
                    }
                }
                _ => {}
            }
        }
        let n = l.layers.len();
        for (k, &(w, b, input, out)) in l.layers.iter().enumerate() {
            // He-uniform for ReLU layers, LeCun-uniform for the output
            let gain = if k + 1 == n { 3.0 } else { 6.0 };
            let lim = (gain / input as f64).sqrt();
            for p in &mut self.params[w..w + input * out] {
                *p = rng.gen_range(-lim..lim);
            }
            let bias = if k + 1 == n { 0.0 } else { HIDDEN_BIAS };
            self.params[b..b + out].fill(bias);
        }
    }

    /// Applies `mode` on top of the current parameters. `Scaled` shrinks
    /// the output layer by `1 - reference_gamma` and requires loss scaling.
    pub fn init_scaled_weights(&mut self, mode: InitMode) -> Result<()> {
        match mode {
            InitMode::Standard => Ok(()),
            InitMode::Scaled { reference_gamma } => {
                if !self.loss_scaling {
                    return Err(Error::Config("scaled init requires loss scaling".into()));
                }
                let factor = Timescale::from_gamma(reference_gamma)?.scale();
                let &(w, _, input, out) = self.layout.layers.last().expect("output layer");
                for p in &mut self.params[w..w + input * out + out] {
                    *p *= factor;
                }
                Ok(())
            }
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn loss_scaling(&self) -> bool {
        self.loss_scaling
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Copies all parameters from `other`, which must share the architecture.
    pub fn copy_from(&mut self, other: &DeepGammaNet) {
        assert_eq!(self.arch, other.arch, "architecture mismatch");
        self.params.copy_from_slice(&other.params);
    }

    fn encode_ts(&self, ts: Timescale, out: &mut Vec<f64>) -> Result<()> {
        out.clear();
        if let Some(spec) = self.arch.input {
            spec.mode()?.encode_into(ts, out)?;
        }
        Ok(())
    }

    /// Embedding of `phi` and the timescale, as fed to the first dense layer.
    pub fn embed(&self, phi: &[f64], ts: Timescale) -> Result<Vec<f64>> {
        let mut cache = Cache::default();
        self.forward_cached(phi, ts, &mut cache)?;
        Ok(cache.acts.swap_remove(0))
    }

    /// Raw network output: `f` under loss scaling, `V` otherwise.
    pub fn output(&self, phi: &[f64], ts: Timescale) -> Result<f64> {
        self.forward_cached(phi, ts, &mut Cache::default())
    }

    /// Value estimate at `ts`.
    pub fn forward(&self, phi: &[f64], ts: Timescale) -> Result<f64> {
        let out = self.output(phi, ts)?;
        Ok(self.to_value(out, ts))
    }

    #[inline]
    pub fn to_value(&self, output: f64, ts: Timescale) -> f64 {
        if self.loss_scaling {
            output / ts.scale()
        } else {
            output
        }
    }

    /// Forward pass keeping the intermediates needed by [`backward`](Self::backward).
    pub fn forward_cached(&self, phi: &[f64], ts: Timescale, c: &mut Cache) -> Result<f64> {
        let d = self.arch.phi_dim;
        if phi.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: phi.len(),
            });
        }
        self.encode_ts(ts, &mut c.ts)?;
        let l = &self.layout;
        let p = &self.params;
        let act = self.arch.embedding.activation();
        let m = c.ts.len();

        c.xi_pre.clear();
        for j in 0..l.xi_dim {
            let row = &p[l.embed_w + j * m..l.embed_w + (j + 1) * m];
            let s: f64 = row.iter().zip(&c.ts).map(|(a, b)| a * b).sum();
            c.xi_pre.push(s + p[l.embed_b + j]);
        }
        c.xi.clear();
        c.xi.extend(c.xi_pre.iter().map(|&x| act.apply(x)));

        c.acts.resize_with(l.layers.len() + 1, Vec::new);
        c.pre.resize_with(l.layers.len(), Vec::new);
        let nu = &mut c.acts[0];
        nu.clear();
        match self.arch.embedding {
            EmbeddingKind::Direct => {
                nu.extend_from_slice(phi);
                nu.extend_from_slice(&c.ts);
            }
            EmbeddingKind::LearnedConcat { .. } => {
                nu.extend_from_slice(phi);
                nu.extend_from_slice(&c.xi);
            }
            EmbeddingKind::Hadamard { .. } => {
                nu.extend(phi.iter().zip(&c.xi).map(|(a, b)| a * b));
            }
            EmbeddingKind::Matrix { .. } => {
                nu.resize(d, 0.0);
                nu.fill(0.0);
                for (i, &phi_i) in phi.iter().enumerate() {
                    if phi_i == 0.0 {
                        continue;
                    }
                    let row = &c.xi[i * d..(i + 1) * d];
                    for (n, x) in nu.iter_mut().zip(row) {
                        *n += phi_i * x;
                    }
                }
            }
        }

        let n_layers = l.layers.len();
        for (k, &(w, b, input, out)) in l.layers.iter().enumerate() {
            let (head, tail) = c.acts.split_at_mut(k + 1);
            let x = &head[k];
            let pre = &mut c.pre[k];
            pre.clear();
            for o in 0..out {
                let row = &p[w + o * input..w + (o + 1) * input];
                let s: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                pre.push(s + p[b + o]);
            }
            let y = &mut tail[0];
            y.clear();
            if k + 1 == n_layers {
                y.extend_from_slice(pre);
            } else {
                y.extend(pre.iter().map(|&v| v.max(0.0)));
            }
        }
        Ok(c.acts[n_layers][0])
    }

    /// Accumulates `d_out * d(output)/d(params)` into `grad`, using the
    /// intermediates from the last [`forward_cached`](Self::forward_cached)
    /// call on `c` with the same `phi`.
    pub fn backward(&self, phi: &[f64], d_out: f64, c: &mut Cache, grad: &mut [f64]) {
        let l = &self.layout;
        let p = &self.params;
        let n_layers = l.layers.len();
        c.d_cur.clear();
        c.d_cur.push(d_out);
        for k in (0..n_layers).rev() {
            let (w, b, input, out) = l.layers[k];
            if k + 1 != n_layers {
                for (g, &pre) in c.d_cur.iter_mut().zip(&c.pre[k]) {
                    if pre <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let x = &c.acts[k];
            c.d_prev.clear();
            c.d_prev.resize(input, 0.0);
            for o in 0..out {
                let g = c.d_cur[o];
                if g == 0.0 {
                    continue;
                }
                grad[b + o] += g;
                let row = w + o * input;
                for i in 0..input {
                    grad[row + i] += g * x[i];
                    c.d_prev[i] += g * p[row + i];
                }
            }
            std::mem::swap(&mut c.d_cur, &mut c.d_prev);
        }

        // c.d_cur now holds d/d(nu)
        if l.xi_dim == 0 {
            return;
        }
        let d = self.arch.phi_dim;
        let mut d_xi = vec![0.0; l.xi_dim];
        match self.arch.embedding {
            EmbeddingKind::Direct => unreachable!(),
            EmbeddingKind::LearnedConcat { .. } => d_xi.copy_from_slice(&c.d_cur[d..]),
            EmbeddingKind::Hadamard { .. } => {
                for ((dx, g), f) in d_xi.iter_mut().zip(&c.d_cur).zip(phi) {
                    *dx = g * f;
                }
            }
            EmbeddingKind::Matrix { .. } => {
                for (i, &phi_i) in phi.iter().enumerate() {
                    for j in 0..d {
                        d_xi[i * d + j] = phi_i * c.d_cur[j];
                    }
                }
            }
        }
        let act = self.arch.embedding.activation();
        let m = c.ts.len();
        for j in 0..l.xi_dim {
            let g = d_xi[j] * act.grad(c.xi_pre[j]);
            if g == 0.0 {
                continue;
            }
            grad[l.embed_b + j] += g;
            for t in 0..m {
                grad[l.embed_w + j * m + t] += g * c.ts[t];
            }
        }
    }

    /// Smallest `|pre-activation|` over the rectified units at `(phi, ts)`.
    /// Finite differences are only reliable when it is well above the step.
    pub fn activation_margin(&self, phi: &[f64], ts: Timescale) -> Result<f64> {
        let mut c = Cache::default();
        self.forward_cached(phi, ts, &mut c)?;
        let n = c.pre.len();
        let mut margin = c.pre[..n - 1]
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, x| m.min(x.abs()));
        if self.arch.embedding.activation() == Activation::Relu {
            margin = c.xi_pre.iter().fold(margin, |m, x| m.min(x.abs()));
        }
        Ok(margin)
    }

    /// Mutable view of the embedding's affine map `(weights, bias)`.
    pub fn embedding_params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let l = &self.layout;
        let (w, rest) = self.params[l.embed_w..].split_at_mut(l.embed_b - l.embed_w);
        (w, &mut rest[..l.xi_dim])
    }
}
