"""Acceptance gate: every criterion at its stated tolerance, one verdict line each.

Criteria 6 to 9 share one four-mode, ten-seed ablation on the default profile
(module-scoped fixture, a few minutes on one core).
"""

import itertools
import time

import numpy as np
import pytest

from acceptance_log import record
from practinv import autodiff as ad
from practinv import harness
from practinv.autodiff import Tensor
from practinv.config import ExperimentConfig
from practinv.metrics import auroc, brier, ece
from practinv.models import ArchConfig, _mlp, classify_env, encode, init
from practinv.objectives import (
    EnvBatch,
    fit_probe,
    invariant_risk_penalty,
    objective_gradient_error,
    probe_residual,
)


def random_problem(rng):
    k = int(rng.integers(2, 5))
    arch = ArchConfig(
        input_dim=int(rng.integers(2, 6)),
        embed_dim=int(rng.integers(2, 5)),
        encoder_hidden=tuple(int(w) for w in rng.integers(2, 6, size=rng.integers(0, 3))),
        env_head_hidden=tuple(int(w) for w in rng.integers(2, 5, size=rng.integers(0, 2))),
        activation=str(rng.choice(["tanh", "sigmoid"])),
        init_seed=int(rng.integers(2**31)),
        num_envs=k,
    )
    n = int(rng.integers(2, 17 // k + 1)) if k > 2 else int(rng.integers(2, 9))
    batches = [
        EnvBatch(rng.standard_normal((n, arch.input_dim)), np.r_[0, 1, rng.integers(0, 2, n - 2)], e) for e in range(k)
    ]
    return init(arch), batches, float(rng.uniform(0, 3)), float(rng.uniform(0, 3))


def test_c01_gradient_correctness():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        params, batches, lam, gamma = random_problem(rng)
        assert sum(len(b.x) for b in batches) <= 16
        worst = max(worst, objective_gradient_error(params, batches, lam, gamma))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 60
    record(1, ok, f"100 random configs, worst rel. error {worst:.2e} (<= 1e-4), {elapsed:.1f}s (< 60s)")
    assert ok


def _theta_env_grad(params, x, env, lam, reverse=True):
    """theta gradient of the env loss with the reversal layer, or with it replaced by identity."""
    ad.zero_grad(params.theta() + params.psi())
    h = encode(params, x)
    logits = classify_env(params, h, lam) if reverse else _mlp(params.env_head, h, params.activation, activate_last=False)
    loss = ad.softmax_ce(logits, env)
    if not reverse:
        loss = lam * loss
    ad.backward(loss)
    grads = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in params.theta()]
    ad.zero_grad(params.theta() + params.psi())
    return grads


def test_c02_grl_contract():
    rng = np.random.default_rng(7)
    params = init(ArchConfig(input_dim=5, embed_dim=4, encoder_hidden=(6,), env_head_hidden=(5,), num_envs=3, init_seed=1))
    x = rng.standard_normal((12, 5))
    env = np.repeat(np.arange(3), 4)
    worst = 0.0
    for lam in (0.0, 0.5, 1.0, 10.0):
        rev = _theta_env_grad(params, x, env, lam)
        ident = _theta_env_grad(params, x, env, lam, reverse=False)  # gradient of lam * L_env, no reversal
        worst = max(worst, max(np.abs(r + i).max() for r, i in zip(rev, ident)))
    ok = worst <= 1e-10
    record(2, ok, f"reversed theta-grad = -(lambda x identity grad) for lambda in {{0,0.5,1,10}}, max |diff| {worst:.1e}")
    assert ok


def ridge_descent_oracle(H, y, ridge, tol=1e-13, max_iter=2_000_000):
    A = np.hstack([H, np.ones((len(H), 1))])
    t = 2.0 * y - 1.0
    G, b = A.T @ A + ridge * np.eye(A.shape[1]), A.T @ t
    lr = 1.0 / np.linalg.eigvalsh(G).max()
    w = np.zeros(A.shape[1])
    for _ in range(max_iter):
        g = G @ w - b  # half the gradient of ||Aw - t||^2 + ridge ||w||^2
        if np.abs(g).max() < tol:
            break
        w -= lr * g
    return w


def test_c03_probe_optimality():
    rng = np.random.default_rng(3)
    worst_res, worst_diff = 0.0, 0.0
    for _ in range(50):
        n, d = int(rng.integers(8, 40)), int(rng.integers(1, 7))
        H = rng.standard_normal((n, d))
        y = rng.integers(0, 2, n)
        ridge = 0.1
        w = fit_probe(Tensor(H), y, ridge).values
        worst_res = max(worst_res, probe_residual(H, y, w, ridge))
        worst_diff = max(worst_diff, np.abs(w - ridge_descent_oracle(H, y, ridge)).max())
    ok = worst_res <= 1e-8 and worst_diff <= 1e-5
    record(3, ok, f"50 probes, max residual {worst_res:.1e} (<= 1e-8), max |w - descent| {worst_diff:.1e} (<= 1e-5)")
    assert ok


def test_c04_penalty_properties():
    rng = np.random.default_rng(4)
    same = rng.standard_normal(5)
    zero = invariant_risk_penalty([same] * 4).item()
    worst_oracle, worst_perm = 0.0, 0.0
    for _ in range(50):
        k, d = int(rng.integers(2, 7)), int(rng.integers(1, 8))
        ws = list(rng.standard_normal((k, d)))
        value = invariant_risk_penalty(ws).item()
        oracle = sum(float(np.sum((a - b) ** 2)) for a, b in itertools.permutations(ws, 2))
        worst_oracle = max(worst_oracle, abs(value - oracle))
        perm = rng.permutation(k)
        worst_perm = max(worst_perm, abs(invariant_risk_penalty([ws[i] for i in perm]).item() - value))
    ok = zero == 0.0 and worst_oracle <= 1e-12 and worst_perm <= 1e-12
    record(4, ok, f"identical probes -> {zero}, |R - pair oracle| {worst_oracle:.1e}, permutation |diff| {worst_perm:.1e}")
    assert ok


def test_c05_metric_units():
    a = auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    b = brier(np.full(8, 0.5), np.arange(8) % 2)
    e = ece([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1], bins=1)
    rng = np.random.default_rng(5)
    invariant = True
    for _ in range(20):
        s = rng.standard_normal(30)
        y = np.r_[0, 1, rng.integers(0, 2, 28)]
        invariant &= auroc(s, y) == auroc(np.exp(2 * s) + 3, y) == auroc(np.arctan(s), y)
    ok = a == 0.75 and b == 0.25 and e == 0.0 and invariant
    record(5, ok, f"AUROC example {a}, Brier(0.5) {b}, single-bin ECE {e}, monotone invariance on 20 draws: {invariant}")
    assert ok


# --- directional reproductions on the default profile ----------------------------


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    cfg = ExperimentConfig()
    assert (cfg.num_envs, cfg.n_per_env, cfg.epochs, cfg.seeds) == (4, 2000, 30, 10)
    out = tmp_path_factory.mktemp("acceptance_ablation")
    start = time.perf_counter()
    records = harness.ablation_suite(cfg, out)
    elapsed = time.perf_counter() - start
    assert all(r.status == "ok" for r in records), [r.error for r in records if r.status != "ok"]
    by_mode = {m: sorted((r for r in records if r.mode == m), key=lambda r: r.seed) for m in harness.MODES}
    return by_mode, elapsed


def _mean(records, attr):
    return float(np.mean([attr(r) for r in records]))


def test_c06_held_out_gain(ablation):
    by_mode, elapsed = ablation
    full, erm = by_mode["full"], by_mode["erm"]
    gain = _mean(full, lambda r: r.held_out.auroc) - _mean(erm, lambda r: r.held_out.auroc)
    ece_full = _mean(full, lambda r: r.held_out.ece)
    ece_erm = _mean(erm, lambda r: r.held_out.ece)
    ok = gain >= 0.05 and ece_full <= ece_erm and elapsed <= 15 * 60
    record(
        6,
        ok,
        f"held-out AUROC full - erm = {gain:+.4f} (>= 0.05); ECE full {ece_full:.4f} <= erm {ece_erm:.4f}; "
        f"40 runs in {elapsed:.0f}s (<= 900s)",
    )
    assert ok


def test_c07_in_distribution_parity(ablation):
    by_mode, _ = ablation
    diff = _mean(by_mode["full"], lambda r: r.in_distribution.auroc) - _mean(by_mode["erm"], lambda r: r.in_distribution.auroc)
    ok = abs(diff) <= 0.02
    record(7, ok, f"in-distribution AUROC full - erm = {diff:+.4f} (|.| <= 0.02)")
    assert ok


def test_c08_leakage_drop(ablation):
    by_mode, _ = ablation
    leak_full = _mean(by_mode["full"], lambda r: r.leakage.env_accuracy)
    leak_erm = _mean(by_mode["erm"], lambda r: r.leakage.env_accuracy)
    chance = by_mode["erm"][0].leakage.chance_level
    ok = leak_erm - leak_full >= 0.20 and leak_erm - chance >= 0.25
    record(
        8,
        ok,
        f"env accuracy erm {leak_erm:.3f}, full {leak_full:.3f} (drop {leak_erm - leak_full:.3f} >= 0.20); "
        f"erm - chance {leak_erm - chance:.3f} (>= 0.25)",
    )
    assert ok


def test_c09_combination_wins(ablation):
    by_mode, _ = ablation
    wins = 0
    for f, a, i in zip(by_mode["full"], by_mode["adversarial_only"], by_mode["irm_only"]):
        assert f.seed == a.seed == i.seed
        wins += f.held_out.auroc >= max(a.held_out.auroc, i.held_out.auroc)
    ok = wins >= 7
    record(9, ok, f"full >= max(adversarial_only, irm_only) held-out AUROC in {wins}/10 seeds (>= 7)")
    assert ok


def test_c10_determinism(tmp_path):
    cfg = ExperimentConfig(n_per_env=300, epochs=3, batch_per_env=50, seeds=2)
    text = cfg.to_text()
    (tmp_path / "exp.txt").write_text(text)
    harness.run_experiment(tmp_path / "exp.txt", tmp_path / "first")
    harness.run_experiment(tmp_path / "exp.txt", tmp_path / "second")
    a = (tmp_path / "first" / "metrics.csv").read_bytes()
    b = (tmp_path / "second" / "metrics.csv").read_bytes()
    ok = a == b and len(a.splitlines()) == 1 + 2 * 4 * 2
    record(10, ok, f"two run_experiment calls from identical config bytes: metrics.csv identical = {a == b}")
    assert ok
