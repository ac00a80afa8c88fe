"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test prints a PASS line on success (run with ``pytest -s`` to see them
live).  The rate experiment (criterion 7) dominates the runtime; everything
else completes in seconds.
"""

import subprocess
import sys

import numpy as np
import pytest
from scipy.stats import chisquare

from efmom import schedules
from efmom.compressors import CompressorSpec, contraction_gap, spec_from_fraction
from efmom.core import client_oracle_streams, derive_stream, norm
from efmom.engine import (
    ProblemConfig,
    RunConfig,
    Simulation,
    select_output_index,
)
from efmom.harness import audit_descent, compare_methods, weighted_grad_average
from efmom.momentum import ORACLE_BUDGET, MomentumState, update_momentum
from efmom.problems import make_hetero_quadratics, make_label_sorted_logreg
from efmom.reference import run_centralized_reference

KINDS = schedules.KINDS


def _pass(num, text):
    print(f"\nACCEPTANCE {num} PASS: {text}")


def test_01_centralized_equivalence():
    worst = 0.0
    for kind in KINDS:
        for sigma_g in (0.0, 0.1):
            cfg = RunConfig(
                kind=kind, schedule=schedules.for_kind(kind),
                compressor=CompressorSpec("identity", 16),
                problem=ProblemConfig(family="quadratic", n=1, d=16, seed=101,
                                      sigma_g=sigma_g, sigma_h=0.1, condition=8.0),
                iterations=100, master_seed=7,
            )
            sim = Simulation(cfg)
            xs = np.empty((101, 16))
            xs[0] = sim.server.x
            for t in range(100):
                sim.step()
                xs[t + 1] = sim.server.x
            ref = run_centralized_reference(cfg)
            dev = np.abs(xs - ref).max()
            worst = max(worst, dev)
            assert dev <= 1e-12, (kind, sigma_g, dev)
    _pass(1, f"engine reduces to centralized normalized momentum "
             f"(max per-coordinate deviation {worst:.2e} over 100 steps, "
             f"all 5 kinds, sigma_g in {{0, 0.1}})")


def test_02_compressor_contraction():
    checked = 0
    for d, k in [(10, 1), (10, 5), (10, 10), (50, 5), (50, 25), (200, 20), (200, 1)]:
        spec = CompressorSpec("topk", d, k)
        bound = 1.0 - k / d
        for rep in range(1000):
            v = derive_stream(rep, ("c2", d, k)).normal(d)
            assert contraction_gap(spec, v) <= bound + 1e-15
            checked += 1
    d, k, reps = 40, 8, 10_000
    spec = CompressorSpec("randk", d, k)
    v = derive_stream(5, ("c2-randk",)).normal(d)
    gaps = np.array([
        contraction_gap(spec, v, derive_stream(5, ("c2-mc", r))) for r in range(reps)
    ])
    expected = 1.0 - k / d
    stderr = gaps.std(ddof=1) / np.sqrt(reps)
    assert abs(gaps.mean() - expected) <= 3 * stderr
    _pass(2, f"top-k contraction bound exact on {checked} vectors across the "
             f"(d, k) grid; rand-k Monte-Carlo gap {gaps.mean():.4f} vs "
             f"{expected:.4f} within 3 stderr ({stderr:.1e})")


def test_03_momentum_fidelity():
    # eta = 1 collapse, exact
    p = make_hetero_quadratics(2, 8, seed=103, sigma_g=0.5, sigma_h=0.3)
    rng0 = derive_stream(103, ())
    for kind in KINDS:
        v = rng0.normal(8)
        x_prev = rng0.normal(8)
        x_next = rng0.normal(8)
        new = update_momentum(kind, MomentumState(v.copy()), p, 0, x_prev, x_next,
                              1.0, client_oracle_streams(31, 0, t=2))
        expected = p.stoch_grad(0, x_next, client_oracle_streams(31, 0, t=2).grad())
        assert np.array_equal(new.v, expected), kind

    # noiseless quadratic: corrected estimators track the exact gradient
    worst = 0.0
    for kind in ("hm", "rhm", "mvr"):
        cfg = RunConfig(
            kind=kind, schedule=schedules.for_kind(kind),
            compressor=spec_from_fraction("topk", 12, 0.25),
            problem=ProblemConfig(family="quadratic", n=3, d=12, seed=104,
                                  sigma_g=0.0, sigma_h=0.0),
            iterations=100, master_seed=9,
        )
        sim = Simulation(cfg)
        for _ in range(100):
            sim.step()
            for i in range(3):
                err = norm(sim.clients[i].mom.v - sim.problem.grad(i, sim.server.x))
                worst = max(worst, err)
                assert err <= 1e-12, (kind, err)

    # Hessian-vector products against central finite differences
    quad = make_hetero_quadratics(2, 10, seed=105, condition=6.0)
    logreg = make_label_sorted_logreg(2, 10, samples_per_client=40, seed=105)
    eps = 1e-5
    for trial in range(100):
        problem = quad if trial % 2 == 0 else logreg
        rng = derive_stream(trial, ("c3-fd",))
        x = rng.normal(10)
        u = rng.normal(10)
        i = trial % 2
        fd = (problem.grad(i, x + eps * u) - problem.grad(i, x - eps * u)) / (2 * eps)
        hv = problem.hvp(i, x, u)
        assert np.linalg.norm(fd - hv) <= 1e-5 * max(1.0, np.linalg.norm(hv))
    _pass(3, f"eta=1 collapse exact for all kinds; hm/rhm/mvr track exact "
             f"gradients on noiseless quadratics (worst {worst:.2e} over 100 "
             f"steps); HVP matches finite differences on 100 probes")


def test_04_ef21_bookkeeping():
    cfg = RunConfig(
        kind="sgdm", schedule=schedules.for_kind("sgdm"),
        compressor=spec_from_fraction("topk", 60, 0.1),
        problem=ProblemConfig(family="quadratic", n=10, d=60, seed=106, sigma_g=0.5),
        iterations=10_000, master_seed=11, record_stride=1000,
    )
    sim = Simulation(cfg)
    worst = 0.0
    for _ in range(10_000):
        sim._advance()
        mean_g = np.mean([c.g for c in sim.clients], axis=0)
        drift = norm(sim.server.g - mean_g)
        rel = drift / (1.0 + norm(sim.server.g))
        worst = max(worst, rel)
        assert rel <= 1e-9

    cfg_id = RunConfig(
        kind="mvr", schedule=schedules.for_kind("mvr"),
        compressor=CompressorSpec("identity", 20),
        problem=ProblemConfig(family="quadratic", n=5, d=20, seed=107, sigma_g=0.5),
        iterations=1000, master_seed=12,
    )
    sim = Simulation(cfg_id)
    for _ in range(1000):
        sim._advance()
        V = np.mean([norm(c.g - c.mom.v) for c in sim.clients])
        assert V == 0.0
    _pass(4, f"server mirrors the mean client memory over 10^4 top-k steps "
             f"(worst relative drift {worst:.2e}); identity compressor keeps "
             f"V_t = 0 exactly for 10^3 steps")


def test_05_descent_lemma_audit():
    for kind in ("sgdm", "mvr"):
        cfg = RunConfig(
            kind=kind, schedule=schedules.for_kind(kind),
            compressor=spec_from_fraction("topk", 20, 0.2),
            problem=ProblemConfig(family="quadratic", n=4, d=20, seed=108,
                                  sigma_g=0.0, sigma_h=0.0),
            iterations=1000, master_seed=13,
        )
        result = Simulation(cfg).run()
        violations = audit_descent(result, eps_num=1e-8)
        assert violations == 0, (kind, violations)
    _pass(5, "descent inequality audited with exact L: 0 violations over "
             "10^3 deterministic steps, sgdm and mvr")


def test_06_output_rule_distribution():
    T, reps = 32, 10_000
    for label, gammas in [
        ("constant", np.ones(T)),
        ("decreasing p=3/4", (2.0 / (np.arange(T) + 2.0)) ** 0.75),
    ]:
        probs = gammas / gammas.sum()
        counts = np.zeros(T)
        for rep in range(reps):
            idx = select_output_index(gammas, derive_stream(17, ("c6", label, rep)))
            counts[idx] += 1
        pvalue = chisquare(counts, f_exp=probs * reps).pvalue
        assert pvalue > 0.01, (label, pvalue)
    _pass(6, "output-iterate selection matches gamma_t / sum(gamma) by "
             "chi-square at the 1% level (T=32, 10^4 draws, constant and "
             "decreasing schedules)")


def test_07_rate_exponents():
    base = RunConfig(
        kind="sgdm", schedule=schedules.for_kind("sgdm"),
        compressor=spec_from_fraction("topk", 200, 0.1),
        problem=ProblemConfig(family="quadratic", n=10, d=200, seed=2025,
                              sigma_g=1.0, heterogeneity=1.0, condition=10.0,
                              structure="diagonal"),
        iterations=100_000, master_seed=0, record_stride=1000,
    )
    report = compare_methods(base, list(KINDS), [1, 2, 3, 4, 5])
    bands = {
        "sgdm": (-0.35, -0.15),
        "igt": (-0.40, -0.18),
        "mvr": (-0.45, -0.22),
        "hm": (-0.45, -0.22),
        "rhm": (-0.45, -0.22),
    }
    summary = report.summary()
    for kind, (lo, hi) in bands.items():
        mean_slope = summary[kind][0]
        assert lo <= mean_slope <= hi, (kind, mean_slope, (lo, hi))
    assert summary["mvr"][0] <= summary["sgdm"][0]
    assert summary["hm"][0] <= summary["sgdm"][0]
    slopes = {kind: round(summary[kind][0], 3) for kind in KINDS}
    _pass(7, f"fitted rate exponents within the theorem bands: {slopes}; "
             f"mvr and hm decay at least as fast as sgdm")


def test_08_oracle_accounting():
    n, T = 10, 25
    for kind in KINDS:
        cfg = RunConfig(
            kind=kind, schedule=schedules.for_kind(kind),
            compressor=spec_from_fraction("topk", 15, 0.2),
            problem=ProblemConfig(family="quadratic", n=n, d=15, seed=109,
                                  sigma_g=0.4, sigma_h=0.2),
            iterations=T, master_seed=3,
        )
        result = Simulation(cfg).run()
        g_per, h_per = ORACLE_BUDGET[kind]
        assert result.oracle_counts == {"grad": g_per * n * T, "hvp": h_per * n * T}, kind
        assert list(result.counters.grad) == [g_per * T] * n
        assert list(result.counters.hvp) == [h_per * T] * n
    _pass(8, "instrumented oracle counters match the per-iteration budgets "
             "{sgdm: 1g, igt: 1g, mvr: 2g, hm: 1g+1hvp, rhm: 1g+1hvp}")


def test_09_cross_process_determinism(tmp_path):
    variants = {
        "serial": "false",
        "client-parallel": "true",
    }
    for label, parallel in variants.items():
        outputs = []
        for attempt in ("a", "b"):
            out = tmp_path / f"{label}-{attempt}.csv"
            argv = [
                sys.executable, "-m", "efmom.cli", "run",
                "--method", "mvr", "--clients", "6", "--dim", "24",
                "--iters", "120", "--compressor", "topk:0.25",
                "--sigma-g", "0.7", "--seed", "21",
                "--parallel-clients", parallel,
                "--out", str(out),
            ]
            proc = subprocess.run(argv, capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1], f"{label} runs differ across processes"
    _pass(9, "two processes with identical configs write byte-identical CSVs, "
             "serial and client-parallel")
