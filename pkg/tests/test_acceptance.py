"""Acceptance criteria 1-9, each at its stated tolerance and time budget.

Every test records a one-line PASS/FAIL verdict (see ``conftest.py``); the
lines are repeated in the terminal summary. Criteria 6-8 train real agents
and take several minutes each.
"""

import csv
import dataclasses
import io
import math
import time
import warnings

import numpy as np
import pytest

from sauna.agent import METRICS_COLUMNS, train
from sauna.approximator import ActorCritic, l1_norm
from sauna.config import ExperimentConfig
from sauna.harness import (
    COMPARE_COLUMNS,
    final_performance,
    run_experiment,
    run_suite,
    sample_std,
    suite_config,
    write_table,
    _run_paired_random,
)
from sauna.ppo import (
    Minibatch,
    PpoHyperparams,
    make_optimizers,
    param_groups,
    sauna_loss,
    update,
)
from sauna.returns import discounted_returns, gae_advantages
from sauna.vex import MedianTracker, accept_transition, vex_of_batch

from test_approximator import assert_grads_close, central_diff
from test_harness import GOLDEN
from test_returns import brute_force_gae, random_segment

SEEDS = tuple(range(6))
LEARNING_THRESHOLD = -250.0


def two_pass_vex(R, V):
    n = len(R)
    mean = math.fsum(R) / n
    sse = math.fsum((r - v) ** 2 for r, v in zip(R, V))
    sst = math.fsum((r - mean) ** 2 for r in R)
    return 1.0 - sse / sst


def test_criterion_1_vex_oracle(acceptance_report):
    rng = np.random.default_rng(2024)
    batches = []
    for _ in range(1000):
        n = int(rng.integers(2, 513))
        R = rng.normal(rng.normal(), rng.uniform(0.1, 10), size=n)
        V = R + rng.normal(size=n) * rng.uniform(0.01, 3) * R.std()
        batches.append((R, V))
    start = time.perf_counter()
    ours = [vex_of_batch(R, V).vex_batch for R, V in batches]
    elapsed = time.perf_counter() - start
    worst = max(abs(o - two_pass_vex(R.tolist(), V.tolist())) / abs(two_pass_vex(R.tolist(), V.tolist()))
                for o, (R, V) in zip(ours, batches))
    anchors = (
        vex_of_batch([1.0, 5.0, -2.0], [1.0, 5.0, -2.0]).vex_batch == 1.0
        and vex_of_batch([1.0, 2.0, 6.0], [3.0, 3.0, 3.0]).vex_batch == 0.0
        and vex_of_batch([1.0, 2.0, 3.0], [0.0, 0.0, 0.0]).vex_batch == -6.0
    )
    ok = worst <= 1e-10 and anchors and elapsed < 1.0
    acceptance_report(1, ok, f"max rel err {worst:.2e} (<=1e-10), anchors exact={anchors}, "
                             f"{elapsed:.3f}s (<1s)")
    assert ok


def test_criterion_2_gradient_integrity(acceptance_report):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    worst = 0.0
    for k in range(100):
        shared = bool(k % 2)
        into_trunk = bool((k // 2) % 2)
        nets = ActorCritic(3, 2, hidden=(4, 4), vex_hidden=4, shared_trunk=shared, rng=rng)
        for arr in nets.named_arrays().values():
            arr += rng.normal(scale=0.3, size=arr.shape)
        obs = rng.normal(size=(3, 3))
        actions = rng.normal(size=(3, 2))
        feats = nets.critic.trunk.forward(obs, cache=False) if shared else obs
        logp, _ = nets.policy.log_prob_and_entropy(feats, actions)
        mb = Minibatch(obs, actions, logp + rng.normal(scale=0.1, size=3), rng.normal(size=3),
                       rng.normal(size=3), float(rng.normal()))
        hyper = PpoHyperparams(horizon=64, ent_coef=0.01, vex_into_trunk=into_trunk)
        _, grads, _ = sauna_loss(nets, mb, hyper)
        # a detached V^ex head sees the trunk through a stop-gradient, so the
        # other groups are checked against the loss without the V^ex term
        no_vex = dataclasses.replace(hyper, vex_coef=0.0)
        for name, params in param_groups(nets, True, into_trunk).items():
            target = hyper if (into_trunk or name == "vex") else no_vex
            numeric = central_diff(lambda: sauna_loss(nets, mb, target)[0], params)
            for a, n in zip(grads[name], numeric):
                scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
                worst = max(worst, float(np.max(np.abs(a - n) / scale)))
            assert_grads_close(grads[name], numeric, rtol=1e-4)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 30
    acceptance_report(2, ok, f"100 batches, max rel err {worst:.2e} (<1e-4), {elapsed:.1f}s (<30s)")
    assert ok


def test_criterion_3_reduction_to_ppo(acceptance_report):
    base_cfg = suite_config("pendulum", "ppo_baseline", "unused")
    steps = 20 * base_cfg.horizon
    common = dict(total_steps=steps, vex_into_trunk=False, shared_policy_trunk=False,
                  eval_every=1000)
    base = train(base_cfg.replace(**common), 0, record_policy=True)
    sauna = train(suite_config("pendulum", "sauna", "unused").replace(rho=0.0, **common), 0,
                  record_policy=True)
    same = (len(base.policy_history) == len(sauna.policy_history) == 20 and
            all(a.tobytes() == b.tobytes() for a, b in zip(base.policy_history, sauna.policy_history)))
    acceptance_report(3, same, f"{len(base.policy_history)} updates, policy parameters "
                               f"bitwise identical={same}")
    assert same


def test_criterion_4_filter_predicate(acceptance_report):
    rng = np.random.default_rng(11)
    all_accept = all(
        accept_transition(p, MedianTracker(rng.normal(size=int(rng.integers(0, 30)))), rho=0.0)
        for p in rng.standard_cauchy(2000))
    monotone = True
    rhos = np.linspace(0.0, 3.0, 31)
    for _ in range(300):
        tracker = MedianTracker(rng.normal(size=int(rng.integers(0, 20))))
        pred = float(rng.normal())
        accepted = [accept_transition(pred, tracker, rho=r) for r in rhos]
        # once rejected at some rho, rejected at every larger rho
        monotone &= all(a >= b for a, b in zip(accepted, accepted[1:]))
    values = rng.standard_cauchy(10_000)
    tracker = MedianTracker()
    median_exact = True
    for i, v in enumerate(values):
        tracker.add(v)
        median_exact &= tracker.median() == np.median(values[:i + 1])
    cfg, hyper = ExperimentConfig(), PpoHyperparams()
    defaults = cfg.rho == hyper.rho == 0.3 and cfg.eps0 == hyper.eps0 == 1e-8
    ok = all_accept and monotone and median_exact and defaults
    acceptance_report(4, ok, f"rho=0 accepts all={all_accept}, monotone={monotone}, "
                             f"median exact on 1e4 prefixes={median_exact}, defaults={defaults}")
    assert ok


def test_criterion_5_estimator_identities(acceptance_report):
    rng = np.random.default_rng(5)
    worst_tel, worst_bf = 0.0, 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 80))
        r, v, b, term, trunc, ends = random_segment(rng, n)
        gamma = float(rng.uniform(0.8, 0.999))
        lam = float(rng.uniform(0.0, 1.0))
        adv1 = gae_advantages(r, v, b, gamma, 1.0, term, trunc)
        R = discounted_returns(r, b, gamma, term, trunc)
        worst_tel = max(worst_tel, float(np.max(np.abs(adv1 + v - R))))
        adv = gae_advantages(r, v, b, gamma, lam, term, trunc)
        oracle = brute_force_gae(r, v, gamma, lam, ends, b)
        rel = np.abs(adv - oracle) / np.maximum(np.abs(oracle), 1e-12)
        worst_bf = max(worst_bf, float(np.max(np.where(np.abs(oracle) > 1e-9, rel, 0.0))))
    ok = worst_tel <= 1e-8 and worst_bf <= 1e-10
    acceptance_report(5, ok, f"GAE(1)+V vs returns max abs {worst_tel:.1e} (<=1e-8); "
                             f"GAE vs brute force max rel {worst_bf:.1e} (<=1e-10)")
    assert ok


def test_criterion_6_determinism(acceptance_report, tmp_path):
    start = time.perf_counter()
    dirs = []
    for name in ("first", "second"):
        run_suite(tmp_path / name, envs=("pendulum",), overrides=["total_steps=50000"])
        dirs.append(tmp_path / name / "pendulum")
    elapsed = time.perf_counter() - start
    compared, mismatched = 0, []
    for path in sorted(dirs[0].rglob("*.csv")):
        if path.stem.endswith("_timing"):
            continue
        twin = dirs[1] / path.relative_to(dirs[0])
        compared += 1
        if path.read_bytes() != twin.read_bytes():
            mismatched.append(str(path.relative_to(dirs[0])))
    expected_seed_files = 4 * len(SEEDS)
    seed_files = len([p for p in dirs[0].rglob("seed_*.csv") if not p.stem.endswith("_timing")])
    ok = not mismatched and seed_files == expected_seed_files and elapsed < 600
    acceptance_report(6, ok, f"{compared} CSVs byte-identical={not mismatched} "
                             f"({seed_files} seed files), two suites in {elapsed:.0f}s (<600s)")
    assert not mismatched, mismatched
    assert seed_files == expected_seed_files
    assert elapsed < 600


@pytest.fixture(scope="module")
def pendulum_150k(tmp_path_factory):
    """sauna, then ppo_baseline and paired random_filter, 6 seeds at the suite preset."""
    root = tmp_path_factory.mktemp("pendulum_150k")
    timings = {}
    for variant in ("sauna", "ppo_baseline"):
        start = time.perf_counter()
        run_experiment(suite_config("pendulum", variant, root))
        timings[variant] = time.perf_counter() - start
    start = time.perf_counter()
    cfg = suite_config("pendulum", "random_filter", root)
    _run_paired_random(cfg, root / "pendulum" / "sauna", workers=1)
    timings["random_filter"] = time.perf_counter() - start
    return root / "pendulum", timings


def test_criterion_7_desk_scale_learning(acceptance_report, pendulum_150k):
    root, timings = pendulum_150k
    cfg = suite_config("pendulum", "sauna", "unused")
    perf = final_performance(root / "sauna", window=10)
    passing = sum(v >= LEARNING_THRESHOLD for v in perf.values())
    ok = (cfg.total_steps == 150_000 and len(perf) == 6 and passing >= 5
          and timings["sauna"] < 1800)
    scores = ", ".join(f"{perf[s]:.1f}" for s in sorted(perf))
    acceptance_report(7, ok, f"last-10-eval means [{scores}]; {passing}/6 >= "
                             f"{LEARNING_THRESHOLD:.0f} (need 5); {timings['sauna']:.0f}s (<1800s)")
    assert len(perf) == 6
    assert passing >= 5
    assert timings["sauna"] < 1800


def test_criterion_8_ablation_trend(acceptance_report, pendulum_150k):
    root, _ = pendulum_150k
    perf = {v: np.array(list(final_performance(root / v, window=10).values()))
            for v in ("ppo_baseline", "sauna", "random_filter")}
    rows = []
    for a, b in (("ppo_baseline", "sauna"), ("ppo_baseline", "random_filter"),
                 ("random_filter", "sauna")):
        ma, mb = float(perf[a].mean()), float(perf[b].mean())
        rows.append({"env": "pendulum", "variant_a": a, "variant_b": b,
                     "n_a": perf[a].size, "n_b": perf[b].size,
                     "mean_a": ma, "std_a": sample_std(perf[a]),
                     "mean_b": mb, "std_b": sample_std(perf[b]),
                     "improvement_pct": 100.0 * (mb - ma) / abs(ma)})
    buf = io.StringIO()
    write_table(rows, COMPARE_COLUMNS, buf)
    table = buf.getvalue().replace("\r\n", "\n")
    sauna_m, rand_m, base_m = (perf[v].mean() for v in ("sauna", "random_filter", "ppo_baseline"))
    # "noise": two standard errors of the difference between seed means
    noise = 2.0 * math.sqrt(perf["random_filter"].var(ddof=1) / perf["random_filter"].size
                            + perf["ppo_baseline"].var(ddof=1) / perf["ppo_baseline"].size)
    ordering = sauna_m >= rand_m
    bounded = rand_m <= base_m + noise
    ok = ordering and bounded
    detail = (f"sauna {sauna_m:.1f} >= random_filter {rand_m:.1f}: {ordering}; random_filter "
              f"<= ppo_baseline {base_m:.1f} + noise {noise:.1f}: {bounded}")
    acceptance_report(8, ok, detail, soft=True, table=table)
    if not ok:
        warnings.warn(f"ablation ordering not observed: {detail}")


def test_criterion_9_instrumentation(acceptance_report, tmp_path):
    cfg = suite_config("pendulum", "sauna", tmp_path).replace(
        seeds=(0,), total_steps=8 * 1024, horizon=1024, eval_every=4)
    run_experiment(cfg, tmp_path)
    raw = (tmp_path / "seed_0.csv").read_bytes()
    header_ok = raw.split(b"\r\n", 1)[0] + b"\r\n" == (GOLDEN / "metrics_header.csv").read_bytes()
    rows = list(csv.DictReader(io.StringIO(raw.decode())))
    needed = ("rejection_fraction", "vex_batch", "grad_l1_first_layer", "grad_l1_last_layer")
    per_update = len(rows) >= 8 and all(
        r[c] != "" and math.isfinite(float(r[c])) for r in rows for c in needed)

    # reported gradient norms are taken before global-norm clipping
    rng = np.random.default_rng(0)
    nets = ActorCritic(3, 1, rng=rng)
    obs, actions = rng.normal(size=(64, 3)), rng.normal(size=(64, 1))
    logp, _ = nets.policy.log_prob_and_entropy(obs, actions)
    batch = Minibatch(obs, actions, logp, rng.normal(size=64), rng.normal(size=64) * 50, 0.5)
    hyper = PpoHyperparams(horizon=64, epochs=1, max_grad_norm=1e-3, normalize_advantages=False)
    _, grads, _ = sauna_loss(nets, batch, hyper)
    expected = [l1_norm(grads["policy"][0:2]), l1_norm(grads["policy"][-3:-1])]
    report = update(nets, batch, make_optimizers(param_groups(nets), hyper), hyper, rng)
    unclipped = np.allclose([report.grad_l1_first_layer, report.grad_l1_last_layer], expected,
                            rtol=1e-12) and expected[0] > 1e-3
    ok = header_ok and per_update and unclipped and set(needed) <= set(METRICS_COLUMNS)
    acceptance_report(9, ok, f"golden schema={header_ok}, per-update rejection/V^ex_B/grad L1 "
                             f"present={per_update}, norms unclipped={unclipped}")
    assert ok
