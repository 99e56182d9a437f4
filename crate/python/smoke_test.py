"""Smoke test for the gammanet extension module.

Build and install with `maturin develop --release -m crates/py/Cargo.toml`
(or `pip install ./crates/py`), then run `python python/smoke_test.py`.
"""

import math
import sys
import tempfile
from pathlib import Path

import gammanet as gn

ROOT = Path(__file__).resolve().parent.parent


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    assert close(gn.gamma_to_tau(0.9), 10.0)
    assert close(gn.tau_to_gamma(40.0), 0.975)

    coder = gn.TileCoder([(20, 1.0), (20, 0.5), (30, 0.1)], input_dim=3, seed=1)
    assert coder.active_count == 70
    assert len(coder.encode([0.3, 0.5, 0.2])) == 70

    net = gn.LinearGammaNet(state_dim=1, seed=0)
    env = gn.SquareWave(100)
    gammas = [0.0, 0.5, 0.9, 0.99]
    for _ in range(20000):
        s, c, s2, term = env.step()
        net.td_update(s, s2, c, gammas, term)
    signal = env.signal()
    truth = [gn.true_return_periodic(signal, p, 0.9) for p in range(100)]
    preds = [net.predict([p / 100.0], 0.9) for p in range(100)]
    corr = gn.prediction_correlation(truth, preds)
    assert corr > 0.95, corr

    P = [[0.0, 1.0], [1.0, 0.0]]
    C = [[0.0, 1.0], [2.0, 0.0]]
    v = gn.analytic_mdp_values(P, C, 0.5)
    assert close(v[0], (1.0 + 2.0 * 0.5) / (1.0 - 0.25))
    mean, se = gn.monte_carlo_mdp(P, C, 0, 0.5, 100, 200)
    assert se < 1e-12 and close(mean, v[0], 1e-9)

    value, lam = gn.interpolate_prediction([(20.0, 1.0), (40.0, 3.0)], 30.0, "gamma")
    assert abs(lam - 2.0 / 3.0) < 1e-4 and close(value, 1.0 + 2.0 * lam)
    _, lam = gn.interpolate_prediction([(20.0, 1.0), (40.0, 3.0)], 30.0, "tau")
    assert close(lam, 0.5)

    band = gn.compose_difference_return(1 / (1 - 0.95), 0.95, 1 / (1 - 0.5), 0.5)
    assert close(band, 18.0)
    rows = gn.normalized_mse([("a", 1.0, 2.0, 0.0), ("b", 1.0, 4.0, 0.0)])
    assert [r[2] for r in rows] == [0.5, 1.0]

    deep = gn.DeepGammaNet(phi_dim=2, embedding="h_l_embed", seed=3)
    assert math.isfinite(deep.forward([1.0, 0.0], 0.9))

    cfg = ROOT / "configs" / "mdp_oracle.toml"
    assert len(gn.config_hash(str(cfg))) == 12
    with tempfile.TemporaryDirectory() as out:
        files = gn.run_experiment(str(cfg), seeds=[0], out_dir=out)
        assert any(str(f).endswith(".metrics.csv") for f in files)

    print("gammanet smoke test: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
