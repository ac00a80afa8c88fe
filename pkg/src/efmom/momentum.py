"""Per-client momentum estimators.

Five variants of the recursion producing v_i^{t+1} from local state, the
broadcast points (x^t, x^{t+1}), and fresh stochastic oracle calls:

- sgdm: exponential moving average of gradients at the new point
- igt:  gradients taken at the extrapolated point y = x1 + ((1-eta)/eta)(x1-x0)
- mvr:  same-minibatch gradient-difference correction (STORM-style)
- hm:   Hessian-vector correction evaluated at the new point
- rhm:  Hessian-vector correction at a uniformly random interpolation of the
        two points

All corrections use the same minibatch as the gradient term, realized by
rewinding the per-(client, iteration) streams between oracle calls (see
:class:`efmom.core.OracleStreams`).  With eta = 1 every variant reduces to the
fresh stochastic gradient, so the initial state never matters under the
decreasing schedules (which start at eta_0 = 1).

``rhm`` follows the main algorithm statement: gradient at the new point with
the shared minibatch.  ``rhm_independent_batch=True`` switches to the
alternative found in implementation notes: gradient at the interpolated point
with an independent minibatch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import OracleStreams
from .schedules import KINDS

# stochastic oracle calls per update: (gradients, hvps)
ORACLE_BUDGET = {
    "sgdm": (1, 0),
    "igt": (1, 0),
    "mvr": (2, 0),
    "hm": (1, 1),
    "rhm": (1, 1),
}


class ReplayMismatchError(ValueError):
    """Recorded oracle stream does not match the update pattern."""


@dataclass
class MomentumState:
    """Current estimator vector v_i for one client."""

    v: np.ndarray


def init_state(problem, client: int, x0: np.ndarray) -> MomentumState:
    """Start from the exact local gradient so the estimation error is zero at t=0."""
    return MomentumState(problem.grad(client, x0))


def update_momentum(kind: str, state: MomentumState, problem, client: int,
                    x_prev: np.ndarray, x_next: np.ndarray, eta: float,
                    rng: OracleStreams,
                    rhm_independent_batch: bool = False) -> MomentumState:
    """One momentum step; returns the new state.

    ``problem`` may be any object exposing ``stoch_grad``/``stoch_hvp``
    (e.g. a counting or recording wrapper).
    """
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    v = state.v
    if kind == "sgdm":
        g = problem.stoch_grad(client, x_next, rng.grad())
        v_new = (1.0 - eta) * v + eta * g
    elif kind == "igt":
        y = x_next + ((1.0 - eta) / eta) * (x_next - x_prev)
        g = problem.stoch_grad(client, y, rng.grad())
        v_new = (1.0 - eta) * v + eta * g
    elif kind == "mvr":
        g_next = problem.stoch_grad(client, x_next, rng.grad())
        g_prev = problem.stoch_grad(client, x_prev, rng.grad())
        v_tilde = v + g_next - g_prev
        v_new = (1.0 - eta) * v_tilde + eta * g_next
    elif kind == "hm":
        h = problem.stoch_hvp(client, x_next, x_next - x_prev, rng.hvp())
        g = problem.stoch_grad(client, x_next, rng.grad())
        v_tilde = v + h
        v_new = (1.0 - eta) * v_tilde + eta * g
    elif kind == "rhm":
        q = rng.q().uniform()
        x_hat = q * x_next + (1.0 - q) * x_prev
        h = problem.stoch_hvp(client, x_hat, x_next - x_prev, rng.hvp())
        if rhm_independent_batch:
            g = problem.stoch_grad(client, x_hat, rng.indep_grad())
        else:
            g = problem.stoch_grad(client, x_next, rng.grad())
        v_tilde = v + h
        v_new = (1.0 - eta) * v_tilde + eta * g
    else:
        raise ValueError(f"unknown momentum kind {kind!r}; choose from {KINDS}")
    return MomentumState(v_new)


def replay_oracle(kind: str, records: list, etas, v0: np.ndarray,
                  client: int = 0) -> np.ndarray:
    """Recompute the momentum recursion from recorded oracle outputs.

    ``records`` is the log of a :class:`efmom.problems.RecordingOracles`
    wrapper; entries for other clients are ignored.  The result must match the
    engine-produced state bitwise, since the arithmetic mirrors
    :func:`update_momentum` operation for operation.
    """
    queue = [(op, out) for op, who, out in records if who == client]
    pos = 0

    def take(expected_op):
        nonlocal pos
        if pos >= len(queue) or queue[pos][0] != expected_op:
            raise ReplayMismatchError(
                f"expected a {expected_op!r} record at position {pos}"
            )
        out = queue[pos][1]
        pos += 1
        return out

    v = v0
    for eta in etas:
        if kind in ("sgdm", "igt"):
            g = take("grad")
            v = (1.0 - eta) * v + eta * g
        elif kind == "mvr":
            g_next = take("grad")
            g_prev = take("grad")
            v_tilde = v + g_next - g_prev
            v = (1.0 - eta) * v_tilde + eta * g_next
        elif kind in ("hm", "rhm"):
            h = take("hvp")
            g = take("grad")
            v_tilde = v + h
            v = (1.0 - eta) * v_tilde + eta * g
        else:
            raise ValueError(f"unknown momentum kind {kind!r}")
    if pos != len(queue):
        raise ReplayMismatchError(
            f"{len(queue) - pos} recorded oracle outputs left unconsumed"
        )
    return v
