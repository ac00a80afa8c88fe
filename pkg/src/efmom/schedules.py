"""Parameter-agnostic stepsize and momentum schedules.

Decreasing mode uses ``eta_t = (2/(t+2))^q`` and ``gamma_t = gamma0 * (2/(t+2))^p``
with method-specific exponents; both sequences are nonincreasing and eta_0 = 1.
Construction takes no problem constants, by design.  Constant mode covers the
non-normalized baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("sgdm", "igt", "rhm", "hm", "mvr")

# (gamma exponent p, eta exponent q) per momentum kind
_DEFAULT_EXPONENTS = {
    "sgdm": (3.0 / 4.0, 1.0 / 2.0),
    "igt": (5.0 / 7.0, 4.0 / 7.0),
    "rhm": (2.0 / 3.0, 2.0 / 3.0),
    "hm": (2.0 / 3.0, 2.0 / 3.0),
    "mvr": (2.0 / 3.0, 2.0 / 3.0),
}


def default_exponents(kind: str) -> tuple[float, float]:
    """The (p, q) exponent pair used by ``kind``'s convergence guarantee."""
    try:
        return _DEFAULT_EXPONENTS[kind]
    except KeyError:
        raise ValueError(f"unknown momentum kind {kind!r}; choose from {KINDS}") from None


@dataclass(frozen=True)
class Schedule:
    """Stepsize/momentum schedule.

    ``mode`` is "decreasing" (the default, parameter-agnostic rule) or
    "constant" with fixed ``(gamma_const, eta_const)``.  ``epoch_length``
    switches to per-epoch granularity: the schedule index advances every
    ``epoch_length`` iterations instead of every iteration.
    """

    mode: str = "decreasing"
    gamma0: float = 1.0
    gamma_exponent: float = 3.0 / 4.0
    eta_exponent: float = 1.0 / 2.0
    epoch_length: int | None = None
    gamma_const: float | None = None
    eta_const: float | None = None

    def __post_init__(self):
        if self.mode not in ("decreasing", "constant"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.epoch_length is not None and self.epoch_length < 1:
            raise ValueError("epoch_length must be a positive integer")
        if self.mode == "decreasing":
            if self.gamma0 <= 0:
                raise ValueError("gamma0 must be positive")
            if not 0.0 <= self.eta_exponent < 1.0:
                raise ValueError("eta exponent must lie in [0, 1)")
            if self.gamma_exponent < 0.0:
                raise ValueError("gamma exponent must be nonnegative")
        else:
            if self.gamma_const is None or self.gamma_const <= 0:
                raise ValueError("constant mode needs gamma_const > 0")
            if self.eta_const is None or not 0.0 < self.eta_const <= 1.0:
                raise ValueError("constant mode needs eta_const in (0, 1]")

    def _index(self, t: int):
        if self.epoch_length is not None:
            return t // self.epoch_length
        return t


def for_kind(kind: str, gamma0: float = 1.0, epoch_length: int | None = None) -> Schedule:
    """Decreasing schedule with ``kind``'s default exponents."""
    p, q = default_exponents(kind)
    return Schedule(
        mode="decreasing",
        gamma0=gamma0,
        gamma_exponent=p,
        eta_exponent=q,
        epoch_length=epoch_length,
    )


def constant(gamma: float, eta: float) -> Schedule:
    """Constant schedule for baseline runs."""
    return Schedule(mode="constant", gamma_const=gamma, eta_const=eta)


def eta_at(s: Schedule, t: int) -> float:
    """Momentum parameter at step ``t``; always in (0, 1]."""
    if s.mode == "constant":
        return s.eta_const
    return (2.0 / (s._index(t) + 2.0)) ** s.eta_exponent


def gamma_at(s: Schedule, t: int) -> float:
    """Stepsize at step ``t``; always positive."""
    if s.mode == "constant":
        return s.gamma_const
    return s.gamma0 * (2.0 / (s._index(t) + 2.0)) ** s.gamma_exponent


def gamma_eta_arrays(s: Schedule, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized (gamma_t, eta_t) for t = 0..T-1."""
    t = np.arange(T)
    if s.mode == "constant":
        return np.full(T, s.gamma_const), np.full(T, s.eta_const)
    if s.epoch_length is not None:
        t = t // s.epoch_length
    base = 2.0 / (t + 2.0)
    return s.gamma0 * base**s.gamma_exponent, base**s.eta_exponent
