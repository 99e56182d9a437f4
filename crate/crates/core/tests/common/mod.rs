#![allow(dead_code)]

use std::path::PathBuf;

use gammanet::deep::{
    batch_loss, Activation, Architecture, DeepConfig, DeepGammaNet, EmbeddingKind, InitMode,
    InputSpec, NStepSample, ReplayConfig,
};
use gammanet::env::FiniteMdp;
use gammanet::features::TabularCoder;
use gammanet::linear::{LinearGammaNet, Outcome, StepSize};
use gammanet::timescale::{InputMode, TimescaleInputMode};
use gammanet::Timescale;
use rand::Rng;

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn input_both() -> TimescaleInputMode {
    TimescaleInputMode::new(InputMode::Both, 100.0).unwrap()
}

pub fn gammas(gs: &[f64]) -> Vec<Timescale> {
    gs.iter().map(|&g| Timescale::from_gamma(g).unwrap()).collect()
}

/// Five-state ring with drift and state-dependent cumulants.
pub fn ring5() -> FiniteMdp {
    let p = [0.2, 0.5, 0.0, 0.0, 0.3];
    let transitions = (0..5)
        .map(|s| (0..5).map(|j| p[(j + 5 - s) % 5]).collect())
        .collect();
    let cumulants = vec![
        vec![0.0, 1.0, 0.0, 0.0, -1.0],
        vec![-0.5, 0.5, 2.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, -1.0, 0.0],
        vec![0.0, 0.0, 0.5, 1.5, 3.0],
        vec![-2.0, 0.0, 0.0, 1.0, 0.0],
    ];
    FiniteMdp::new(transitions, cumulants, vec![], 0).unwrap()
}

/// Cumulant 1 leaving state 0 and 2 leaving state 1.
pub fn two_state() -> FiniteMdp {
    FiniteMdp::two_state_cycle(1.0, 2.0)
}

/// Tabular Γ-net over the states of `mdp` and the given timescales.
pub fn tabular_net(
    mdp: &FiniteMdp,
    timescales: &[Timescale],
    scaling: bool,
    step: StepSize,
) -> LinearGammaNet<TabularCoder> {
    let input = input_both();
    let keys = timescales.iter().map(|&ts| input.encode(ts).unwrap()).collect();
    let coder = TabularCoder::new(mdp.n_states(), keys).unwrap();
    LinearGammaNet::new(coder, Some(input), step, scaling).unwrap()
}

pub fn outcomes(mdp: &FiniteMdp, s: usize) -> Vec<Outcome> {
    (0..mdp.n_states())
        .map(|j| Outcome {
            next_state: mdp.one_hot(j),
            prob: mdp.prob(s, j),
            cumulant: mdp.cumulant(s, j),
            terminal: mdp.is_terminal(j),
        })
        .collect()
}

/// Expected TD(0) updates over every state, repeated `sweeps` times.
pub fn expected_sweeps(
    net: &mut LinearGammaNet<TabularCoder>,
    mdp: &FiniteMdp,
    timescales: &[Timescale],
    sweeps: usize,
) {
    for _ in 0..sweeps {
        for s in 0..mdp.n_states() {
            net.expected_td_update(&mdp.one_hot(s), &outcomes(mdp, s), timescales)
                .unwrap();
        }
    }
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-12))
        .fold(0.0, f64::max)
}

/// Every embedding kind, each learned one with both activations.
pub fn embedding_variants() -> Vec<EmbeddingKind> {
    let mut out = vec![EmbeddingKind::Direct];
    for activation in [Activation::Linear, Activation::Relu] {
        out.push(EmbeddingKind::LearnedConcat {
            size: 4,
            activation,
        });
        out.push(EmbeddingKind::Hadamard { activation });
        out.push(EmbeddingKind::Matrix { activation });
    }
    out
}

pub fn toy_arch(phi_dim: usize, embedding: EmbeddingKind) -> Architecture {
    Architecture {
        phi_dim,
        input: Some(InputSpec::from(input_both())),
        embedding,
        layer_sizes: Architecture::TOY_LAYERS.to_vec(),
    }
}

pub fn random_net<R: Rng>(arch: Architecture, scaling: bool, rng: &mut R) -> DeepGammaNet {
    DeepGammaNet::new(arch, scaling, InitMode::Standard, rng).unwrap()
}

/// Dense random features with occasional terminal windows.
pub fn random_samples<R: Rng>(phi_dim: usize, n: usize, n_step: usize, rng: &mut R) -> Vec<NStepSample> {
    (0..n)
        .map(|slot| {
            let m = rng.gen_range(1..=n_step);
            let terminal = rng.gen_bool(0.25);
            NStepSample {
                slot,
                phi: (0..phi_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                cumulants: (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                bootstrap: (!terminal)
                    .then(|| (0..phi_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            }
        })
        .collect()
}

/// Relative error, in norm, between the backpropagated gradient of the
/// batch loss and central finite differences with step `h`.
pub fn gradient_check(
    online: &DeepGammaNet,
    target: &DeepGammaNet,
    samples: &[NStepSample],
    timescales: &[Timescale],
    h: f64,
) -> f64 {
    let mut grad = vec![0.0; online.n_params()];
    batch_loss(online, target, samples, timescales, Some(&mut grad)).unwrap();
    let mut net = online.clone();
    let mut num = vec![0.0; grad.len()];
    for i in 0..grad.len() {
        let p0 = net.params()[i];
        net.params_mut()[i] = p0 + h;
        let up = batch_loss(&net, target, samples, timescales, None).unwrap().mean;
        net.params_mut()[i] = p0 - h;
        let down = batch_loss(&net, target, samples, timescales, None).unwrap().mean;
        net.params_mut()[i] = p0;
        num[i] = (up - down) / (2.0 * h);
    }
    let diff: f64 = grad.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = grad.iter().map(|a| a * a).sum::<f64>().sqrt().max(num.iter().map(|b| b * b).sum::<f64>().sqrt());
    if norm == 0.0 {
        0.0
    } else {
        diff / norm
    }
}

/// Replay, schedule and initialization used for desk-scale deep training on
/// small chains.
pub fn toy_deep_config(embedding: EmbeddingKind) -> DeepConfig {
    DeepConfig {
        embedding,
        init: InitMode::Scaled {
            reference_gamma: 0.99,
        },
        learning_rate: 1e-3,
        sync_interval: 100,
        update_period: 1,
        replay: ReplayConfig {
            capacity: 10_000,
            min_history: 500,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Smallest distance to a ReLU kink over every forward pass of the batch loss.
pub fn batch_margin(
    online: &DeepGammaNet,
    target: &DeepGammaNet,
    samples: &[NStepSample],
    timescales: &[Timescale],
) -> f64 {
    let mut m = f64::INFINITY;
    for s in samples {
        for &ts in timescales {
            m = m.min(online.activation_margin(&s.phi, ts).unwrap());
            if let Some(next) = &s.bootstrap {
                m = m.min(target.activation_margin(next, ts).unwrap());
            }
        }
    }
    m
}

/// Random online and target networks with a batch whose forward passes all
/// stay at least `margin` away from a ReLU kink.
pub fn smooth_case<R: Rng>(
    arch: &Architecture,
    scaling: bool,
    timescales: &[Timescale],
    margin: f64,
    rng: &mut R,
) -> (DeepGammaNet, DeepGammaNet, Vec<NStepSample>) {
    loop {
        let online = random_net(arch.clone(), scaling, rng);
        let target = random_net(arch.clone(), scaling, rng);
        let samples = random_samples(arch.phi_dim, 4, 3, rng);
        if batch_margin(&online, &target, &samples, timescales) >= margin {
            return (online, target, samples);
        }
    }
}
