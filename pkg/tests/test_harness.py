import copy

import numpy as np
import pytest

from efmom import schedules
from efmom.compressors import spec_from_fraction
from efmom.core import derive_stream
from efmom.engine import (
    MetricsRecord,
    ProblemConfig,
    RunConfig,
    Simulation,
    select_output_index,
)
from efmom.harness import (
    DegenerateFitError,
    audit_descent,
    compare_methods,
    fit_rate,
    weighted_grad_average,
)


def synthetic_records(grad_norms, gammas=None):
    T = len(grad_norms)
    if gammas is None:
        gammas = np.ones(T)
    return [
        MetricsRecord(t=t, grad_norm=float(grad_norms[t]), f_value=0.0, V_t=0.0,
                      U_t=0.0, gamma_t=float(gammas[t]), eta_t=1.0, cum_bits=0)
        for t in range(T)
    ]


def test_fit_exact_power_law_running_min():
    t = np.arange(20000)
    records = synthetic_records((t + 1.0) ** -0.25)
    fit = fit_rate(records, aggregation="running-min")
    assert abs(fit.slope - (-0.25)) <= 1e-6
    assert fit.r_squared > 0.999999


def test_fit_constant_metric():
    records = synthetic_records(np.full(5000, 3.7))
    for agg in ("running-min", "gamma-weighted-mean"):
        fit = fit_rate(records, aggregation=agg)
        assert abs(fit.slope) <= 1e-12


def test_fit_noisy_power_law_weighted_mean():
    t = np.arange(100_000)
    noise = derive_stream(55, ("fitnoise",)).normal(len(t))
    gn = (t + 1.0) ** (-1.0 / 3.0) * (1.0 + 0.01 * noise)
    for agg in ("gamma-weighted-mean", "running-min"):
        fit = fit_rate(synthetic_records(gn), aggregation=agg)
        assert abs(fit.slope - (-1.0 / 3.0)) <= 0.01


def test_fit_window_and_validation():
    records = synthetic_records((np.arange(1000) + 1.0) ** -0.5)
    fit = fit_rate(records, aggregation="running-min", window=(100, 1000))
    assert fit.window == (100, 1000)
    with pytest.raises(ValueError):
        fit_rate(records, window=(500, 400))
    with pytest.raises(ValueError):
        fit_rate(records, window=(995, 1000))  # too few distinct prefixes
    with pytest.raises(ValueError):
        fit_rate(records, aggregation="median")
    with pytest.raises(DegenerateFitError):
        fit_rate(synthetic_records(np.zeros(100)))


def test_weighted_grad_average_examples():
    assert weighted_grad_average(synthetic_records([3.0, 1.0, 2.0])) == 2.0
    assert weighted_grad_average(synthetic_records([0.7])) == 0.7
    rec = synthetic_records([1.0, 2.0, 2.0], gammas=[2.0, 1.0, 1.0])
    assert weighted_grad_average(rec) == pytest.approx(1.5, abs=1e-15)
    with pytest.raises(ValueError):
        weighted_grad_average([])


def test_selection_frequency_matches_weighted_average():
    # the weighted average is the expectation of grad_norm at the sampled index
    T = 64
    gn = derive_stream(56, ("gn",)).normal(T) ** 2 + 0.1
    gammas = (2.0 / (np.arange(T) + 2.0)) ** 0.75
    records = synthetic_records(gn, gammas)
    target = weighted_grad_average(records)
    reps = 10_000
    picks = np.empty(reps)
    for rep in range(reps):
        idx = select_output_index(gammas, derive_stream(56, ("sel", rep)))
        picks[rep] = gn[idx]
    stderr = picks.std(ddof=1) / np.sqrt(reps)
    assert abs(picks.mean() - target) <= 3 * stderr


def _deterministic_run(kind="sgdm", T=200, n=3, d=10):
    cfg = RunConfig(
        kind=kind, schedule=schedules.for_kind(kind),
        compressor=spec_from_fraction("topk", d, 0.3),
        problem=ProblemConfig(family="quadratic", n=n, d=d, seed=61,
                              sigma_g=0.0, sigma_h=0.0),
        iterations=T, master_seed=62,
    )
    return Simulation(cfg).run()


def test_audit_clean_run_has_no_violations():
    res = _deterministic_run()
    assert audit_descent(res) == 0


def test_audit_flags_injected_fault():
    res = _deterministic_run(T=100)
    records = copy.deepcopy(res.records)
    records[40].f_value += 0.5
    violations = audit_descent(records, L=res.problem.L, f_inf=res.problem.f_inf)
    assert violations >= 1


def test_audit_empty_trajectory():
    res = _deterministic_run(T=5)
    assert audit_descent(res.records[:1], L=1.0, f_inf=0.0) == 0


def test_audit_rejects_stochastic_runs():
    cfg = RunConfig(
        kind="sgdm", schedule=schedules.for_kind("sgdm"),
        compressor=spec_from_fraction("topk", 8, 0.5),
        problem=ProblemConfig(family="quadratic", n=2, d=8, seed=63, sigma_g=0.5),
        iterations=5, master_seed=1,
    )
    res = Simulation(cfg).run()
    with pytest.raises(ValueError):
        audit_descent(res)


def test_audit_rejects_strided_records():
    res = _deterministic_run(T=20)
    with pytest.raises(ValueError):
        audit_descent(res.records[::2], L=1.0, f_inf=0.0)


def _base_config(T=4000):
    return RunConfig(
        kind="sgdm", schedule=schedules.for_kind("sgdm"),
        compressor=spec_from_fraction("topk", 20, 0.2),
        problem=ProblemConfig(family="quadratic", n=4, d=20, seed=64, sigma_g=0.5,
                              structure="diagonal"),
        iterations=T, master_seed=0, record_stride=50,
    )


def test_compare_single_row():
    report = compare_methods(_base_config(), ["sgdm"], [3])
    assert len(report.rows) == 1
    row = report.rows[0]
    assert row.kind == "sgdm" and row.seed == 3
    mean, stderr, count = report.summary()["sgdm"]
    assert stderr is None and count == 1


def test_compare_duplicate_kinds_are_identical():
    report = compare_methods(_base_config(), ["mvr", "mvr"], [1])
    assert report.rows[0] == report.rows[1]


def test_compare_multiple_kinds_and_seeds(tmp_path):
    report = compare_methods(_base_config(), ["sgdm", "mvr"], [1, 2, 3],
                             epsilon=0.05)
    assert len(report.rows) == 6
    summary = report.summary()
    assert set(summary) == {"sgdm", "mvr"}
    for kind, (mean, stderr, count) in summary.items():
        assert count == 3
        assert stderr is not None
    out = tmp_path / "report.csv"
    report.to_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0] == "kind,seed,slope,r2,iters_to_eps,bits_to_eps"
    assert len(lines) == 7
    table = report.format_table()
    assert "sgdm" in table and "mvr" in table


def test_threshold_accounting_consistency():
    report = compare_methods(_base_config(T=2000), ["sgdm"], [5], epsilon=1e9)
    row = report.rows[0]
    # absurdly loose threshold is crossed at the first step
    assert row.iters_to_eps == 1
    assert row.bits_to_eps == 4 * 4 * (32 + 64)  # n messages, k=4 coordinates each
