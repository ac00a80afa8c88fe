"""Straight-line centralized normalized momentum, used as an equivalence oracle.

With one client and no compression the distributed loop should reduce to a
plain normalized stochastic momentum method.  This module implements that
method directly (no error-feedback state, no message objects, recursions
written out inline) against the same oracle streams, so a trajectory
comparison exercises the engine's bookkeeping end to end.
"""

from __future__ import annotations

import numpy as np

from .core import client_oracle_streams, derive_stream, norm
from .engine import RunConfig, make_problem
from .problems import Problem
from .schedules import gamma_eta_arrays


def run_centralized_reference(config: RunConfig, problem: Problem | None = None) -> np.ndarray:
    """Return the (T+1, d) iterate history of the centralized method.

    Requires ``n == 1`` and the identity compressor; raises ValueError
    otherwise.
    """
    if config.problem.n != 1:
        raise ValueError("the centralized reference needs a single client")
    if config.compressor.kind != "identity":
        raise ValueError("the centralized reference needs the identity compressor")
    if problem is None:
        problem = make_problem(config.problem)

    T = config.iterations
    d = config.d
    ms = config.master_seed
    gammas, etas = gamma_eta_arrays(config.schedule, T)

    x = derive_stream(ms, ("x0",)).normal(d)
    x *= config.x0_scale / np.sqrt(d)
    v = problem.grad(0, x)
    rng = client_oracle_streams(ms, 0)

    history = np.empty((T + 1, d))
    history[0] = x
    kind = config.kind
    for t in range(T):
        gamma = gammas[t]
        eta = etas[t]
        v_norm = norm(v)
        if config.normalized:
            x_next = x - (gamma / v_norm) * v if v_norm > 0.0 else x.copy()
        else:
            x_next = x - gamma * v
        rng.t = t
        if kind == "sgdm":
            v = (1.0 - eta) * v + eta * problem.stoch_grad(0, x_next, rng.grad())
        elif kind == "igt":
            y = x_next + ((1.0 - eta) / eta) * (x_next - x)
            v = (1.0 - eta) * v + eta * problem.stoch_grad(0, y, rng.grad())
        elif kind == "mvr":
            g_new = problem.stoch_grad(0, x_next, rng.grad())
            g_old = problem.stoch_grad(0, x, rng.grad())
            v = (1.0 - eta) * (v + g_new - g_old) + eta * g_new
        elif kind == "hm":
            h = problem.stoch_hvp(0, x_next, x_next - x, rng.hvp())
            v = (1.0 - eta) * (v + h) + eta * problem.stoch_grad(0, x_next, rng.grad())
        elif kind == "rhm":
            q = rng.q().uniform()
            x_hat = q * x_next + (1.0 - q) * x
            h = problem.stoch_hvp(0, x_hat, x_next - x, rng.hvp())
            if config.rhm_independent_batch:
                g = problem.stoch_grad(0, x_hat, rng.indep_grad())
            else:
                g = problem.stoch_grad(0, x_next, rng.grad())
            v = (1.0 - eta) * (v + h) + eta * g
        else:
            raise ValueError(f"unknown momentum kind {kind!r}")
        x = x_next
        history[t + 1] = x
    return history
