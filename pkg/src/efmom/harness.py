"""Empirical verification tools: rate fitting, descent audits, method comparison.

The convergence guarantees bound the stepsize-weighted average of the gradient
norm over the first T iterations, so rate fitting works on prefix evaluations
of that average: for a geometric grid of horizons T' the aggregate metric is
recomputed over [0, T') and a least-squares line through (log T', log metric)
estimates the rate exponent.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import schedules
from .engine import RunConfig, RunResult, run


class DegenerateFitError(ValueError):
    """No usable points for a rate fit (e.g. all-zero metric)."""


@dataclass
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    window: tuple[int, int]


def _extract(trajectory) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(t, grad_norm, gamma) arrays from a RunResult or a record sequence."""
    if isinstance(trajectory, RunResult):
        T = len(trajectory.grad_norms)
        return np.arange(T), trajectory.grad_norms, trajectory.gammas
    t = np.array([r.t for r in trajectory])
    gn = np.array([r.grad_norm for r in trajectory])
    gamma = np.array([r.gamma_t for r in trajectory])
    return t, gn, gamma


def weighted_grad_average(trajectory) -> float:
    """Stepsize-weighted mean gradient norm, the quantity the output rule targets."""
    _, gn, gamma = _extract(trajectory)
    if len(gn) == 0:
        raise ValueError("empty trajectory")
    return float((gamma * gn).sum() / gamma.sum())


def fit_rate(trajectory, aggregation: str = "gamma-weighted-mean",
             window: tuple[int, int] | None = None, grid_points: int = 25) -> RateFit:
    """Estimate the decay exponent of the aggregated gradient norm.

    ``aggregation`` is "gamma-weighted-mean" (prefix weighted averages) or
    "running-min" (prefix minima).  ``window`` bounds the prefix horizons used
    as fit points; by default the first 10% are excluded as transient.
    """
    if aggregation not in ("gamma-weighted-mean", "running-min"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    t, gn, gamma = _extract(trajectory)
    valid = gn > 0
    if not valid.any():
        raise DegenerateFitError("gradient norms are identically zero")
    t, gn, gamma = t[valid], gn[valid], gamma[valid]

    horizon = int(t[-1]) + 1
    if window is None:
        window = (max(2, int(np.ceil(0.1 * horizon))), horizon)
    lo, hi = window
    if not 0 < lo < hi <= horizon:
        raise ValueError(f"window {window} not within (0, {horizon}]")
    prefixes = np.unique(np.geomspace(lo, hi, grid_points).astype(int))
    if len(prefixes) < 10:
        raise ValueError(
            f"window {window} yields only {len(prefixes)} distinct prefixes; need >= 10"
        )

    if aggregation == "gamma-weighted-mean":
        cum_wgn = np.cumsum(gamma * gn)
        cum_w = np.cumsum(gamma)
        pos = np.searchsorted(t, prefixes, side="left") - 1
        if np.any(pos < 0):
            raise DegenerateFitError("no points before the first prefix horizon")
        metric = cum_wgn[pos] / cum_w[pos]
    else:
        running = np.minimum.accumulate(gn)
        pos = np.searchsorted(t, prefixes, side="left") - 1
        if np.any(pos < 0):
            raise DegenerateFitError("no points before the first prefix horizon")
        metric = running[pos]

    logx = np.log(prefixes.astype(float))
    logy = np.log(metric)
    slope, intercept = np.polyfit(logx, logy, 1)
    fitted = slope * logx + intercept
    ss_res = float(((logy - fitted) ** 2).sum())
    ss_tot = float(((logy - logy.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return RateFit(float(slope), float(intercept), r2, (int(lo), int(hi)))


def audit_descent(trajectory, L: float | None = None, f_inf: float | None = None,
                  eps_num: float = 1e-8) -> int:
    """Count violations of the per-step descent inequality on a noiseless run.

    For consecutive states the smoothness of f forces

        D_{t+1} + gamma_t ||grad f(x^t)||
            <= D_t + 2 gamma_t ||vbar^t - grad f(x^t)||
               + 2 gamma_t V_t + gamma_t^2 L / 2

    with D_t = f(x^t) - f_inf.  Holds pathwise only without oracle noise, so
    stochastic runs are rejected.  Needs stride-1 records.
    """
    if isinstance(trajectory, RunResult):
        pcfg = trajectory.config.problem
        if pcfg.sigma_g > 0 or pcfg.sigma_h > 0:
            raise ValueError("descent audit needs a noiseless run (sigma_g = sigma_h = 0)")
        if L is None:
            L = trajectory.problem.L
        if f_inf is None:
            f_inf = trajectory.problem.f_inf
        records = trajectory.records
    else:
        records = list(trajectory)
        if L is None or f_inf is None:
            raise ValueError("record-level audit needs explicit L and f_inf")
    for prev, nxt in zip(records, records[1:]):
        if nxt.t != prev.t + 1:
            raise ValueError("descent audit needs consecutive records (record_stride=1)")

    violations = 0
    for prev, nxt in zip(records, records[1:]):
        gamma = prev.gamma_t
        lhs = (nxt.f_value - f_inf) + gamma * prev.grad_norm
        rhs = (
            (prev.f_value - f_inf)
            + 2.0 * gamma * prev.v_gap
            + 2.0 * gamma * prev.V_t
            + 0.5 * gamma * gamma * L
        )
        if lhs > rhs + eps_num:
            violations += 1
    return violations


@dataclass
class MethodRow:
    kind: str
    seed: int
    slope: float
    r_squared: float
    iters_to_eps: int | None = None
    bits_to_eps: int | None = None


@dataclass
class ComparisonReport:
    rows: list

    def slopes(self, kind: str) -> np.ndarray:
        return np.array([r.slope for r in self.rows if r.kind == kind])

    def summary(self) -> dict:
        """kind -> (mean slope, stderr or None, run count)."""
        out = {}
        for kind in dict.fromkeys(r.kind for r in self.rows):
            s = self.slopes(kind)
            stderr = float(s.std(ddof=1) / np.sqrt(len(s))) if len(s) > 1 else None
            out[kind] = (float(s.mean()), stderr, len(s))
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("kind,seed,slope,r2,iters_to_eps,bits_to_eps\n")
            for r in self.rows:
                iters = "" if r.iters_to_eps is None else r.iters_to_eps
                bits = "" if r.bits_to_eps is None else r.bits_to_eps
                fh.write(f"{r.kind},{r.seed},{r.slope!r},{r.r_squared!r},{iters},{bits}\n")

    def format_table(self) -> str:
        lines = [f"{'kind':<6} {'mean slope':>12} {'stderr':>10} {'runs':>5}"]
        for kind, (mean, stderr, count) in self.summary().items():
            se = f"{stderr:10.4f}" if stderr is not None else " " * 10
            lines.append(f"{kind:<6} {mean:12.4f} {se} {count:5d}")
        return "\n".join(lines)


def _threshold_crossing(result: RunResult, epsilon: float) -> tuple[int | None, int | None]:
    avg = np.cumsum(result.gammas * result.grad_norms) / np.cumsum(result.gammas)
    hits = np.flatnonzero(avg <= epsilon)
    if len(hits) == 0:
        return None, None
    iters = int(hits[0]) + 1
    bits_per_step = result.total_bits // len(result.gammas)
    return iters, iters * bits_per_step


def _compare_worker(args) -> MethodRow:
    config, epsilon = args
    result = run(config)
    fit = fit_rate(result)
    iters, bits = (None, None) if epsilon is None else _threshold_crossing(result, epsilon)
    return MethodRow(config.kind, config.master_seed, fit.slope, fit.r_squared, iters, bits)


def compare_methods(base_config: RunConfig, kinds, seeds, epsilon: float | None = None,
                    workers: int = 1) -> ComparisonReport:
    """Run every kind (with its default schedule exponents) on every seed.

    The problem instance is pinned by ``base_config.problem.seed``, so all
    methods see identical data; only the run seed varies.
    """
    tasks = []
    for kind in kinds:
        schedule = schedules.for_kind(
            kind,
            gamma0=base_config.schedule.gamma0,
            epoch_length=base_config.schedule.epoch_length,
        )
        for seed in seeds:
            cfg = replace(base_config, kind=kind, schedule=schedule, master_seed=seed)
            tasks.append((cfg, epsilon))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_compare_worker, tasks))
    else:
        rows = [_compare_worker(task) for task in tasks]
    return ComparisonReport(rows)
