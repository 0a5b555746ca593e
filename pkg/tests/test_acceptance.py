"""Acceptance suite. Each test prints a single PASS/FAIL line with its evidence."""
import time
import warnings
from itertools import product

import numpy as np
import pytest

from dle import cli
from dle.attention import AttentionParams, attention_weights
from dle.benchmark import distractor_benchmark
from dle.metrics import coverage_rate, precision_rate
from dle.numerics import make_rng
from dle.pipeline import Config, run_pipeline
from dle.pointcloud import save_episode
from dle.sampling import farthest_point_sampling, kmeans
from dle.sem import expand, expansion_scores, nearest_neighbors, run_sem, self_loss, target_prototype
from dle.slm import localize, run_slm
from dle.synthetic import SynthSpec, generate_synthetic_episode
from dle.transduction import build_graph, propagate, propagate_closed_form, seed_matrix
from oracles import fps_oracle, nearest_neighbor_oracle

GRID = (0.5, 0.6, 0.7, 0.8, 0.9)


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{name} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def test_a1_fps_oracle(verdict):
    t0 = time.perf_counter()
    rng = make_rng(101)
    mismatches = 0
    for _ in range(200):
        m, d = int(rng.integers(1, 65)), int(rng.integers(1, 9))
        k = int(rng.integers(1, min(8, m) + 1))
        F = rng.standard_normal((m, d))
        # coarse values make exact distance ties common
        if rng.random() < 0.3:
            F = np.round(F)
        seed = int(rng.integers(2**32))
        got = farthest_point_sampling(F, k, make_rng(seed)).tolist()
        mismatches += got != fps_oracle(F, k, int(make_rng(seed).integers(m)))
    dt = time.perf_counter() - t0
    verdict("A1", mismatches == 0 and dt < 5, f"{mismatches} mismatches over 200 instances in {dt:.2f}s")


def test_a2_kmeans_monotone(verdict):
    t0 = time.perf_counter()
    bad = 0
    for seed in range(100):
        rng = make_rng(seed)
        m, k = int(rng.integers(10, 501)), int(rng.integers(1, 11))
        F = rng.standard_normal((m, int(rng.integers(1, 9))))
        h = kmeans(F, k, max_iters=100, rng=rng).history
        bad += any(b > a * (1 + 1e-12) for a, b in zip(h, h[1:]))
    dt = time.perf_counter() - t0
    verdict("A2", bad == 0 and dt < 10, f"{bad} of 100 runs with an inertia increase, {dt:.2f}s")


def test_a3_attention_contracts(verdict):
    t0 = time.perf_counter()
    rng = make_rng(303)
    worst_sum = worst_mask = 0.0
    for i in range(100):
        d, n, m = (int(x) for x in rng.integers(1, [9, 9, 65]))
        scale = [1e-3, 1.0, 1e2, 1e4][i % 4]
        p = AttentionParams.random(d, rng)
        q, ctx = rng.standard_normal((n, d)) * scale, rng.standard_normal((m, d)) * scale
        allowed = rng.random(m) < 0.5
        allowed[rng.integers(m)] = True
        w = attention_weights(q, ctx, p, allowed=allowed).astype(np.float64)
        worst_sum = max(worst_sum, float(np.abs(w.sum(axis=1) - 1).max()))
        worst_mask = max(worst_mask, float(w[:, ~allowed].sum(axis=1).max(initial=0.0)))
    dt = time.perf_counter() - t0
    ok = worst_sum <= 1e-6 and worst_mask < 1e-6 and dt < 5
    verdict("A3", ok, f"max |row sum - 1| = {worst_sum:.2e}, max masked mass = {worst_mask:.2e}, {dt:.2f}s")


def test_a4_distractor_benchmark(verdict):
    t0 = time.perf_counter()
    rows = distractor_benchmark(100, seed=0)
    dt = time.perf_counter() - t0
    wins = sum(r.slm_precision >= r.baseline_precision for r in rows)
    gap = float(np.mean([r.gap for r in rows]))
    verdict("A4", wins >= 90 and gap >= 0.05 and dt < 60,
            f"SLM >= baseline precision in {wins}/100 episodes, mean gap {gap:.3f}, {dt:.1f}s")


def test_a5_cyclic_filter_soundness(verdict):
    t0 = time.perf_counter()
    checked = violations = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for i in range(100):
            n_way = 1 + i % 2
            spec = SynthSpec(n_way=n_way, n_points=512, part_spread=0.8, part_dims=4, noise=0.05,
                             shift=0.5, distractor_count=20)
            ep = generate_synthetic_episode(spec, make_rng(i))
            F = ep.query_features
            conf = run_slm(ep.support_features, ep.support_masks, F, n_agents=30, tau=0.9,
                           rng=make_rng(i)).confident
            r = run_sem(F, conf, n_way, theta=0.6)
            new = np.flatnonzero((r.filtered > 0) & (r.filtered != conf))
            nn = nearest_neighbors(F, new)
            violations += int(np.sum(conf[nn] != r.filtered[new]))
            # spot-check the vectorised search against the brute-force oracle
            for j in new[:3]:
                violations += conf[nearest_neighbor_oracle(F, j)] != r.filtered[j]
            checked += new.size
    dt = time.perf_counter() - t0
    verdict("A5", violations == 0 and checked > 0 and dt < 30,
            f"{checked} retained new points checked, {violations} violations, {dt:.1f}s")


def test_a6_self_loss_boundaries(verdict):
    gt = np.array([1, 1, 0, 0, 0, 0, 0])
    subset = self_loss(np.array([1, 0, 0, 0, 0, 0, 0]), gt)
    everything = self_loss(np.ones(7, int), gt)
    hand = self_loss(np.array([1, 1, 1, 0, 0, 0, 0]), gt)
    verdict("A6", subset == 0.0 and everything == 1.0 and hand == 0.2,
            f"subset {subset}, all-fg {everything}, hand case {hand}")


def test_a7_end_to_end_separable(verdict):
    spec = SynthSpec(n_points=2048)
    ep = generate_synthetic_episode(spec, make_rng(7))
    F, gt = ep.query_features.astype(np.float64), ep.query_gt
    fg, bg = F[gt == 1], F[gt == 0]
    margin = min(np.sqrt(((bg - f) ** 2).sum(axis=1)).min() for f in fg)
    t0 = time.perf_counter()
    res = run_pipeline(ep, Config(), seed=7)
    dt = time.perf_counter() - t0
    miou = res.report["miou"]
    verdict("A7", margin > 2 * spec.noise and miou >= 0.95 and dt < 10,
            f"margin {margin:.3f} vs 2 sigma {2 * spec.noise:.3f}, mIoU {miou:.4f}, {dt:.2f}s")


def test_a8_transduction_oracle(verdict):
    t0 = time.perf_counter()
    rng = make_rng(808)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(10, 201))
        g = build_graph(rng.standard_normal((n, int(rng.integers(2, 8)))), k=int(rng.integers(2, 11)))
        c = int(rng.integers(1, 4))
        rows = rng.choice(n, size=int(rng.integers(1, min(n, 20))), replace=False)
        Y = seed_matrix(n, rows, rng.integers(0, c + 1, rows.size), c)
        it = propagate(g, Y, alpha=0.99, iters=20000, tol=1e-13)
        worst = max(worst, float(np.abs(it - propagate_closed_form(g, Y, alpha=0.99)).max()))
    dt = time.perf_counter() - t0
    verdict("A8", worst <= 1e-5 and dt < 10, f"max |iterative - closed form| = {worst:.2e}, {dt:.2f}s")


def test_a9_threshold_monotonicity(verdict):
    broken = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for i in range(20):
            n_way = 1 + i % 2
            spec = SynthSpec(n_way=n_way, n_points=512, part_spread=0.6, shift=0.4, distractor_count=20)
            ep = generate_synthetic_episode(spec, make_rng(i))
            F = ep.query_features
            out = run_slm(ep.support_features, ep.support_masks, F, n_agents=30, rng=make_rng(i))
            labels = [localize(out.scores, t) for t in GRID]
            conf = [l > 0 for l in labels]
            broken += sum(np.any(b & ~a) for a, b in zip(conf, conf[1:]))
            for l in labels:
                protos = [target_prototype(F, l, n + 1) for n in range(n_way)]
                w3 = expansion_scores(protos, F)
                exp = [expand(w3, t) > 0 for t in GRID]
                broken += sum(np.any(b & ~a) for a, b in zip(exp, exp[1:]))
    verdict("A9", broken == 0, f"{broken} nesting violations over 20 episodes and the 5-point tau/theta grids")


def test_a10_sweep_harness(verdict, tmp_path):
    spec = SynthSpec(n_points=600, fg_fraction=0.35, distractor_count=20, shift=0.5)
    manifest = save_episode(generate_synthetic_episode(spec, make_rng(10)), tmp_path / "ep", "ep")
    outs = []
    for run in ("a", "b"):
        assert cli.main(["sweep", "--episode", str(manifest), "--seed", "5", "--out", str(tmp_path / run)]) == 0
        outs.append((tmp_path / run / "sweep.csv").read_bytes())
    lines = outs[0].decode().splitlines()
    header, body = lines[0], [l.split(",") for l in lines[1:]]
    keys = {(float(r[0]), float(r[1]), int(r[2])) for r in body}
    expected = set(product(GRID, GRID, (50, 100, 150, 200)))
    ok = (outs[0] == outs[1] and keys == expected and len(body) == 100
          and header == "tau,theta,N_a,seed,miou,coverage,precision,self_loss")
    verdict("A10", ok, f"{len(body)} rows, grid complete {keys == expected}, reruns identical {outs[0] == outs[1]}")


def test_a11_coverage_precision_arithmetic(verdict):
    cases = [
        # (pred fg, gt fg, coverage, precision)
        ({0, 1, 2, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, 0.4, 1.0),
        ({0, 1, 2, 7, 8}, {0, 1, 2, 3}, 0.75, 0.6),
        ({5, 6}, {0, 1, 2}, 0.0, 0.0),
    ]
    got = [(coverage_rate(p, g), precision_rate(p, g)) for p, g, _, _ in cases]
    ok = all(c == cov and p == prec for (c, p), (_, _, cov, prec) in zip(got, cases))
    verdict("A11", ok, f"(coverage, precision) per case: {got}")
