"""Acceptance criteria, one test each, each printing a PASS/FAIL line.

Criteria 7-9 share one run of the default grid (five seeds). It takes several
minutes on one core. Set ``BAYESATTACK_ACCEPTANCE_RUN`` to a finished run
directory made with the default config to reuse it instead.
"""
import json
import os
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesattack import attack as atk
from bayesattack import config as cf
from bayesattack import data, zoo
from bayesattack import finetune as ft
from bayesattack import harness as hn
from bayesattack import numcore as nc
from bayesattack import posterior as post
from bayesattack.numcore import RngStream

from conftest import quad_bilinear_toy, rel_err

REUSE_ENV = "BAYESATTACK_ACCEPTANCE_RUN"


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


def _gap_line(avg, a, b):
    gap, se = hn.paired_gap(avg, a, b)
    return gap, se, f"{a} - {b} = {gap:+.4f} ± {se:.4f}"


# -- 1 ---------------------------------------------------------------------

FD_ARCHES = [
    zoo.ArchSpec("mlp", (7,), (6,), 3, "relu"),
    zoo.ArchSpec("mlp", (5, 4), (6,), 3, "gelu"),
    zoo.ArchSpec("convnet", (2, 3), (1, 6, 6), 3, "relu"),
    zoo.ArchSpec("convnet", (2,), (2, 5, 5), 4, "gelu"),
]


def test_criterion_1_autodiff_matches_central_differences(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    for pair in range(100):
        arch = FD_ARCHES[pair % len(FD_ARCHES)]
        r = RngStream(pair, "c1")
        m = zoo.init_model(arch, r.child("init"), 0.3 + 0.4 * r.uniform((arch.channels,)),
                           0.4 + 0.6 * r.uniform((arch.channels,)))
        # zero-initialised biases leave dead patches exactly on a ReLU kink
        m = m.with_params(m.params + 0.05 * r.normal(m.params.shape))
        x = r.uniform((2,) + arch.input_shape)
        y = r.integers(arch.classes, 2)
        _, gx = zoo.loss_and_input_grad(m, x, y)
        _, gw = zoo.loss_and_param_grad(m, x, y)
        fx = nc.finite_diff_gradient(lambda v: zoo.loss_ce(zoo.forward(m, v), y).data, x, 1e-5)
        fw = nc.finite_diff_gradient(lambda w: zoo.loss_ce(zoo.forward(m, x, w), y).data, m.params, 1e-5)
        worst = max(worst, rel_err(gx, fx), rel_err(gw, fw))
    elapsed = time.perf_counter() - t0
    verdict(capsys, 1, worst < 1e-5 and elapsed < 60,
            f"worst relative error {worst:.2e} over 100 pairs, {elapsed:.1f} s")


# -- 2 ---------------------------------------------------------------------

def test_criterion_2_finite_difference_hvps(capsys):
    t0 = time.perf_counter()
    errs = []
    for gamma in (0.1, 0.01):
        obj, w, x = quad_bilinear_toy(5, bilinear=False)
        u = RngStream(6, "u").normal(w.shape)
        errs.append(rel_err(ft.hvp_ww_fd(obj, w, x, u, gamma), obj.A @ u))
    obj, w, x = quad_bilinear_toy(7)
    e = RngStream(8, "e").normal(x.shape)
    wx = rel_err(ft.hvp_wx_fd(obj, w, x, e, 1e-3), obj.B.T @ e.mean(axis=0))
    elapsed = time.perf_counter() - t0
    verdict(capsys, 2, max(errs) < 1e-10 and wx < 1e-6 and elapsed < 10,
            f"H_ww errors {errs[0]:.1e}/{errs[1]:.1e}, H_wx error {wx:.1e}, {elapsed:.2f} s")


# -- 3 ---------------------------------------------------------------------

def test_criterion_3_degenerate_attack_is_plain_ifgsm(capsys):
    ds = data.synth_generate("bars-image", 100, 4, 0.2, 3)
    arch = zoo.ArchSpec("convnet", (4, 8), ds.input_shape, 4)
    m = zoo.init_model(arch, RngStream(3, "c3"), *zoo.fit_normalization(arch, ds.inputs))
    spec = atk.BayesSpec(post.isotropic_posterior(m.params, 0.0), atk.input_noise_posterior(0.0), 1, 1)
    budget = atk.AttackBudget(8 / 255, 1 / 255, 20)
    ours = atk.attack_run(m, spec, budget, ds.inputs, ds.labels, "ifgsm", RngStream(0, "a")).x_adv
    reference = atk.plain_ifgsm(m, ds.inputs, ds.labels, budget)
    diff = int(np.count_nonzero(ours != reference))
    verdict(capsys, 3, np.array_equal(ours, reference), f"{diff} differing pixels over 100 x 20 iterations")


# -- 4 ---------------------------------------------------------------------

_BUDGET_WORST = []


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([4 / 255, 8 / 255]), st.sampled_from(["fgsm", "ifgsm", "mifgsm"]),
       st.floats(0.0, 0.5), st.floats(0.0, 0.5), st.integers(1, 3), st.integers(0, 10_000),
       st.floats(0.5 / 255, 4 / 255))
def _budget_case(eps, method, sigma, sigma_e, n, seed, step):
    r = RngStream(seed, "c4")
    arch = zoo.ArchSpec("mlp", (6,), (3, 4, 4), 3)
    m = zoo.init_model(arch, r.child("m"))
    x = np.clip(r.uniform((4, 3, 4, 4)) * 1.2 - 0.1, 0.0, 1.0)  # include exact 0/1 pixels
    y = r.integers(3, 4)
    spec = atk.BayesSpec(post.isotropic_posterior(m.params, sigma), atk.input_noise_posterior(sigma_e), n, n)
    out = atk.attack_run(m, spec, atk.AttackBudget(eps, step, 6), x, y, method, r.child("atk")).x_adv
    excess = float(np.max(np.abs(out - x)) - eps)
    _BUDGET_WORST.append(excess)
    assert excess <= 1e-12 and out.min() >= 0.0 and out.max() <= 1.0


def test_criterion_4_budget_fuzz(capsys):
    _BUDGET_WORST.clear()
    try:
        _budget_case()
        ok = True
    except AssertionError:
        ok = False
    verdict(capsys, 4, ok, f"{len(_BUDGET_WORST)} cases, max overshoot {max(_BUDGET_WORST):.1e}")


# -- 5 ---------------------------------------------------------------------

def test_criterion_5_swag_moments(capsys):
    snaps = RngStream(11, "snap").normal((100, 50)) * 3.0 - 2.0
    c = post.MomentCollector()
    for s in snaps:
        c.update(s)
    mean = snaps.mean(axis=0)
    var = ((snaps - mean) ** 2).mean(axis=0)
    moment_err = max(np.max(np.abs(c.mean - mean)), np.max(np.abs(c.variance - var)))
    diag = 0.5 + RngStream(12, "d").uniform((20,))
    alpha, beta = 0.7, 0.05
    p = post.GaussianPosterior("swag", np.zeros(20), diag_variance=diag, alpha=alpha, beta=beta)
    draws = post.sample(p, RngStream(13, "draws"), 100_000)
    var_err = float(np.max(np.abs(draws.var(axis=0) / (alpha * diag + beta) - 1)))
    verdict(capsys, 5, moment_err < 1e-10 and var_err < 0.02,
            f"moment error {moment_err:.1e}, worst relative variance error {var_err:.4f}")


# -- 6 ---------------------------------------------------------------------

def test_criterion_6_zero_lambda_is_plain_gradient(capsys):
    ds = data.synth_generate("bars-image", 800, 4, 0.2, 6)
    arch = zoo.ArchSpec("convnet", (4, 8), ds.input_shape, 4)
    m = zoo.init_model(arch, RngStream(6, "c6"), *zoo.fit_normalization(arch, ds.inputs))
    cfg = ft.FinetuneConfig(lambda_w=0.0, lambda_e=0.0)
    equal = 0
    for b, idx in enumerate(np.array_split(RngStream(6, "perm").permutation(800), 100)):
        w = m.params + 0.01 * b
        obj = ft.ModelObjective(m, ds.labels[idx])
        _, g = ft.finetune_gradient(obj, w, ds.inputs[idx], cfg)
        _, plain = zoo.loss_and_param_grad(m, ds.inputs[idx], ds.labels[idx], w)
        equal += bool(np.array_equal(g, plain))
    verdict(capsys, 6, equal == 100, f"{equal}/100 batches bitwise equal")


# -- 7, 8, 9: default grid -------------------------------------------------

@pytest.fixture(scope="module")
def default_grid(tmp_path_factory):
    reuse = os.environ.get(REUSE_ENV)
    cfg = cf.load_config(None, {"out": reuse or str(tmp_path_factory.mktemp("default-grid"))})
    if reuse:
        saved = json.loads((cfg.out_dir() / "results.json").read_text())["fingerprint"]
        assert saved == cfg.fingerprint(), f"{reuse} was not made with the default config"
        return cfg.out_dir()
    return hn.run_experiment(cfg)


def test_criterion_7_joint_beats_plain_and_single_sources(default_grid, capsys):
    rows = hn.read_csv(default_grid / "results.csv")
    avg = hn.per_seed_average(rows)
    seconds = json.loads((default_grid / "timing.json").read_text())["seconds"]
    victims = {r["victim"] for r in rows}
    pool = min(int(r["pool_size"]) for r in rows)
    gap, _, line = _gap_line(avg, "joint", "plain")
    lines = [line]
    ok = gap >= 0.05 and len(avg["joint"]) >= 5 and len(victims) == 4 and pool >= 200
    for single in ("param", "input"):
        g, se, line = _gap_line(avg, "joint", single)
        lines.append(line)
        ok &= g >= -se
    ok &= seconds < 30 * 60
    lines.append(f"{seconds / 60:.1f} min on {os.cpu_count()} core(s)")
    verdict(capsys, 7, ok, "; ".join(lines))


def test_criterion_8_finetuning_does_not_hurt(default_grid, capsys):
    avg = hn.per_seed_average(hn.read_csv(default_grid / "results.csv"))
    ok, lines = True, []
    for variant in ("param", "input", "joint"):
        g, se, line = _gap_line(avg, f"{variant}-ft", variant)
        lines.append(line)
        ok &= g >= -se
    verdict(capsys, 8, ok, "; ".join(lines))


def test_criterion_9_more_samples_do_not_hurt(default_grid, capsys):
    rows = hn.read_csv(default_grid / "sampling.csv")
    counts = sorted({int(r["M"]) for r in rows})
    ok, worst = counts == [1, 2, 5], []
    for key in ("avg_success", "avg_victim_loss", "avg_attack_loss"):
        table = hn.sampling_table(rows, key)
        for lo, hi in zip(counts, counts[1:]):
            for other in counts:
                for a, b in (((hi, other), (lo, other)), ((other, hi), (other, lo))):
                    g, se = hn.paired_gap({"a": table[a], "b": table[b]}, "a", "b")
                    if g < -se:
                        ok = False
                        worst.append(f"{key} (M,S)={a} vs {b}: {g:+.4f} ± {se:.4f}")
    verdict(capsys, 9, ok, "; ".join(worst) or "every step up in M or S is non-decreasing within one SE")


# -- 10 --------------------------------------------------------------------

def test_criterion_10_run_is_reproducible(tmp_path, capsys):
    small = {"seeds": "0", "attack.pool_size": "60", "attack.iterations": "10", "train.epochs": "5",
             "data.n": "1200", "grid.sampling_counts": "1,2"}
    first = hn.run_experiment(cf.load_config(None, {**small, "out": str(tmp_path / "one")}))
    second = hn.run_experiment(cf.load_config(None, {**small, "out": str(tmp_path / "two")}))
    names = ("results.csv", "sampling.csv", "summary.csv", "results.json")
    same = [n for n in names if (first / n).read_bytes() == (second / n).read_bytes()]
    verdict(capsys, 10, len(same) == len(names), f"identical: {', '.join(same)}")
