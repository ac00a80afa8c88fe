"""Synthetic n-client objectives with exact oracles and controllable noise.

Two families: per-client quadratics (rotated dense or axis-aligned) and
ridge-regularized logistic regression on Gaussian blobs with a label-sorted
heterogeneous partition.  Smoothness constants are computed from the instance,
so the schedule theory's quantities are known exactly (quadratics) or as
certified upper bounds (logistic).

Stochastic oracles add isotropic Gaussian noise with exactly the configured
second moment: the gradient oracle returns ``grad + z`` with ``E||z||^2 =
sigma_g^2`` and the Hessian-vector oracle adds noise with ``E||z||^2 =
sigma_h^2 ||u||^2``.  The perturbation is independent of the query point, so
same-minibatch gradient differences are exact (the stochastic functions share
their Hessians with the mean function).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .core import RngStream, derive_stream

# max |sigmoid''| = 1/(6*sqrt(3)), attained at z = log(2 +/- sqrt(3))
_SIGMOID_D2_MAX = 1.0 / (6.0 * np.sqrt(3.0))


class Problem:
    """Base class: f(x) = (1/n) sum_i f_i(x) with first/second-order oracles.

    The row-batched variants (``grad_rows`` etc.) evaluate all clients at once
    and accept either one shared query point of shape (d,) or per-client
    points of shape (n, d); their arithmetic matches the per-client oracles
    bit for bit, so the engine may use whichever is faster.
    """

    n: int
    d: int
    sigma_g: float
    sigma_h: float
    L: float
    L_i: np.ndarray
    L_bar: float
    L_h: float
    L_h_i: np.ndarray
    f_inf: float
    f_inf_exact: bool

    def _init_noise(self, sigma_g: float, sigma_h: float) -> None:
        self.sigma_g = float(sigma_g)
        self.sigma_h = float(sigma_h)
        self._sqrt_d = np.sqrt(self.d)
        self._grad_noise_scale = self.sigma_g / self._sqrt_d
        self._noise_rows = None  # scratch for the row-batched oracles

    def _draw_noise_rows(self, rngs) -> np.ndarray:
        # single-threaded scratch; the batched oracles are not reentrant
        Z = self._noise_rows
        if Z is None:
            Z = self._noise_rows = np.empty((self.n, self.d))
        for i, rng in enumerate(rngs):
            rng.normal_into(Z[i])
        return Z

    def _check_client(self, i: int) -> None:
        if not 0 <= i < self.n:
            raise IndexError(f"client index {i} out of range [0, {self.n})")

    def f_value(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, i: int, x: np.ndarray) -> np.ndarray:
        """Exact client gradient."""
        raise NotImplementedError

    def mean_grad(self, x: np.ndarray) -> np.ndarray:
        """Exact full gradient (diagnostics only, never seen by the optimizer)."""
        raise NotImplementedError

    def hvp(self, i: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Exact client Hessian-vector product."""
        raise NotImplementedError

    def stoch_grad(self, i: int, x: np.ndarray, rng: RngStream) -> np.ndarray:
        """Unbiased gradient estimate; deterministic given (x, stream position)."""
        g = self.grad(i, x)
        if self.sigma_g > 0.0:
            z = rng.normal(self.d)
            z *= self._grad_noise_scale
            g += z
        return g

    def stoch_hvp(self, i: int, x: np.ndarray, u: np.ndarray, rng: RngStream) -> np.ndarray:
        """Unbiased HVP estimate with operator-level noise scaled by ||u||."""
        h = self.hvp(i, x, u)
        if self.sigma_h > 0.0:
            u_norm = np.linalg.norm(u)
            if u_norm > 0.0:
                z = rng.normal(self.d)
                z *= self.sigma_h * u_norm / self._sqrt_d
                h += z
        return h

    # row-batched oracles ------------------------------------------------

    def grad_rows(self, x: np.ndarray) -> np.ndarray:
        """(n, d) exact gradients; ``x`` is shared (d,) or per-client (n, d)."""
        if x.ndim == 1:
            return np.stack([self.grad(i, x) for i in range(self.n)])
        return np.stack([self.grad(i, x[i]) for i in range(self.n)])

    def hvp_rows(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """(n, d) exact HVPs in the shared direction ``u``."""
        if x.ndim == 1:
            return np.stack([self.hvp(i, x, u) for i in range(self.n)])
        return np.stack([self.hvp(i, x[i], u) for i in range(self.n)])

    def stoch_grad_rows(self, x: np.ndarray, rngs) -> np.ndarray:
        G = self.grad_rows(x)
        if self.sigma_g > 0.0:
            G += self._grad_noise_scale * self._draw_noise_rows(rngs)
        return G

    def stoch_hvp_rows(self, x: np.ndarray, u: np.ndarray, rngs) -> np.ndarray:
        H = self.hvp_rows(x, u)
        if self.sigma_h > 0.0:
            u_norm = np.linalg.norm(u)
            if u_norm > 0.0:
                scale = self.sigma_h * u_norm / self._sqrt_d
                H += scale * self._draw_noise_rows(rngs)
        return H


class QuadraticProblem(Problem):
    """f_i(x) = 0.5 x' A_i x - b_i' x with SPD A_i.

    ``A`` is either a dense (n, d, d) stack or, for axis-aligned instances,
    an (n, d) array of Hessian diagonals (``diagonal=True``).
    """

    def __init__(self, A: np.ndarray, b: np.ndarray, sigma_g: float = 0.0,
                 sigma_h: float = 0.0, diagonal: bool = False):
        if diagonal:
            if A.ndim != 2:
                raise ValueError("diagonal quadratic expects A of shape (n, d)")
        elif A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise ValueError("dense quadratic expects A of shape (n, d, d)")
        if b.shape != A.shape[:2]:
            raise ValueError(f"b has shape {b.shape}, expected {A.shape[:2]}")
        self.n, self.d = b.shape
        self.A = A
        self.b = b
        self.diagonal = diagonal
        self._init_noise(sigma_g, sigma_h)

        self._A_mean = A.mean(axis=0)
        self._b_mean = b.mean(axis=0)
        if diagonal:
            if np.any(A <= 0):
                raise ValueError("diagonal entries must be positive")
            self.L_i = A.max(axis=1)
            self.L = float(self._A_mean.max())
            x_star = self._b_mean / self._A_mean
        else:
            # tiny inflation keeps the reported constants valid upper bounds
            # under floating-point roundoff in the certification matvecs
            self.L_i = np.array(
                [float(np.linalg.eigvalsh(A[i])[-1]) * (1.0 + 1e-12) for i in range(self.n)]
            )
            self.L = float(np.linalg.eigvalsh(self._A_mean)[-1]) * (1.0 + 1e-12)
            x_star = np.linalg.solve(self._A_mean, self._b_mean)
        self.L_bar = float(self.L_i.mean())
        self.L_h = 0.0
        self.L_h_i = np.zeros(self.n)
        self.f_inf = self.f_value(x_star)
        self.f_inf_exact = True
        self.minimizer = x_star

    def f_value(self, x):
        if self.diagonal:
            return float(0.5 * (self._A_mean * x) @ x - self._b_mean @ x)
        return float(0.5 * x @ (self._A_mean @ x) - self._b_mean @ x)

    def grad(self, i, x):
        self._check_client(i)
        if self.diagonal:
            g = self.A[i] * x
        else:
            g = self.A[i] @ x
        g -= self.b[i]
        return g

    def mean_grad(self, x):
        if self.diagonal:
            g = self._A_mean * x
        else:
            g = self._A_mean @ x
        g -= self._b_mean
        return g

    def hvp(self, i, x, u):
        self._check_client(i)
        if u.shape != (self.d,):
            raise ValueError(f"direction has shape {u.shape}, expected ({self.d},)")
        if self.diagonal:
            return self.A[i] * u
        return self.A[i] @ u

    def grad_rows(self, x):
        if self.diagonal:
            G = self.A * x  # broadcasts for both shared (d,) and per-client (n, d)
            G -= self.b
            return G
        return super().grad_rows(x)

    def hvp_rows(self, x, u):
        # constant Hessians; the evaluation point is irrelevant
        if self.diagonal:
            return self.A * u
        return np.stack([self.A[i] @ u for i in range(self.n)])


class LogisticProblem(Problem):
    """Binary logistic regression with ridge term, one dataset shard per client."""

    def __init__(self, features: list[np.ndarray], labels: list[np.ndarray],
                 ridge: float = 0.0, sigma_g: float = 0.0, sigma_h: float = 0.0):
        if len(features) != len(labels) or not features:
            raise ValueError("need one (features, labels) pair per client")
        self.n = len(features)
        self.d = features[0].shape[1]
        for X, y in zip(features, labels):
            if X.ndim != 2 or X.shape[1] != self.d:
                raise ValueError("all feature matrices must share one dimension")
            if y.shape != (X.shape[0],) or not np.all(np.abs(y) == 1.0):
                raise ValueError("labels must be +/-1, one per sample row")
            if X.shape[0] == 0:
                raise ValueError("every client needs at least one sample")
        self.X = features
        self.y = labels
        self.ridge = float(ridge)
        self._init_noise(sigma_g, sigma_h)

        covs = [X.T @ X / X.shape[0] for X in self.X]
        self.L_i = np.array(
            [self.ridge + float(np.linalg.eigvalsh(C)[-1]) * (1.0 + 1e-12) / 4.0 for C in covs]
        )
        mean_cov = np.mean(covs, axis=0)
        self.L = self.ridge + float(np.linalg.eigvalsh(mean_cov)[-1]) * (1.0 + 1e-12) / 4.0
        self.L_bar = float(self.L_i.mean())
        self.L_h_i = np.array(
            [_SIGMOID_D2_MAX * float(np.mean(np.linalg.norm(X, axis=1) ** 3)) for X in self.X]
        )
        self.L_h = float(self.L_h_i.mean())
        self.f_inf = self._estimate_f_inf()
        self.f_inf_exact = False

    def _estimate_f_inf(self) -> float:
        res = minimize(
            lambda x: self.f_value(x),
            np.zeros(self.d),
            jac=lambda x: self.mean_grad(x),
            method="L-BFGS-B",
            options={"maxiter": 2000, "ftol": 1e-15, "gtol": 1e-12},
        )
        return float(res.fun)

    def _client_f(self, i, x):
        margins = self.y[i] * (self.X[i] @ x)
        return float(np.mean(np.logaddexp(0.0, -margins)) + 0.5 * self.ridge * (x @ x))

    def f_value(self, x):
        return float(np.mean([self._client_f(i, x) for i in range(self.n)]))

    def grad(self, i, x):
        self._check_client(i)
        X, y = self.X[i], self.y[i]
        margins = y * (X @ x)
        weights = y * expit(-margins)
        return -(X.T @ weights) / X.shape[0] + self.ridge * x

    def mean_grad(self, x):
        out = np.zeros(self.d)
        for i in range(self.n):
            out += self.grad(i, x)
        out /= self.n
        return out

    def hvp(self, i, x, u):
        self._check_client(i)
        if u.shape != (self.d,):
            raise ValueError(f"direction has shape {u.shape}, expected ({self.d},)")
        X = self.X[i]
        z = X @ x
        w = expit(z) * expit(-z)
        return X.T @ (w * (X @ u)) / X.shape[0] + self.ridge * u


def make_hetero_quadratics(n: int, d: int, heterogeneity: float = 1.0,
                           condition: float = 10.0, seed: int = 0,
                           structure: str = "rotated", sigma_g: float = 0.0,
                           sigma_h: float = 0.0) -> QuadraticProblem:
    """Random SPD quadratics with eigenvalues in [1/condition, 1].

    ``heterogeneity`` scales the spread of the linear terms (and, for rotated
    instances, of the per-client eigenbases) around a shared base; zero makes
    all clients identical.  ``structure`` is "rotated" (dense random
    eigenbases) or "diagonal" (axis-aligned; much cheaper oracles at large d).
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    if condition < 1.0:
        raise ValueError("condition number must be >= 1")
    if heterogeneity < 0.0:
        raise ValueError("heterogeneity must be nonnegative")
    if structure not in ("rotated", "diagonal"):
        raise ValueError(f"unknown quadratic structure {structure!r}")

    root = derive_stream(seed, ("quadratic",))
    eigs = np.linspace(1.0 / condition, 1.0, d) if d > 1 else np.array([1.0 / condition])

    if condition == 1.0:
        # spectrum collapses; rotations of the identity are the identity, so
        # store it diagonally and report L_i = 1 exactly
        A = np.ones((n, d))
        structure = "diagonal"
    elif structure == "diagonal":
        A = np.tile(eigs, (n, 1))
    else:
        shared = root.child("basis").normal((d, d))
        A = np.empty((n, d, d))
        for i in range(n):
            mix = shared + heterogeneity * root.child("basis", i).normal((d, d))
            q, r = np.linalg.qr(mix)
            q = q * np.sign(np.diag(r))  # deterministic orientation
            A[i] = (q * eigs) @ q.T
            A[i] = 0.5 * (A[i] + A[i].T)

    b_base = root.child("b").normal(d) / np.sqrt(d)
    b = np.empty((n, d))
    for i in range(n):
        b[i] = b_base + heterogeneity * (root.child("b", i).normal(d) / np.sqrt(d))

    return QuadraticProblem(A, b, sigma_g=sigma_g, sigma_h=sigma_h,
                            diagonal=(structure == "diagonal"))


def make_label_sorted_logreg(n: int, d: int, samples_per_client: int = 50,
                             sorted_fraction: float = 0.5, seed: int = 0,
                             ridge: float = 0.1, separation: float = 3.0,
                             sigma_g: float = 0.0, sigma_h: float = 0.0) -> LogisticProblem:
    """Gaussian-blob classification with a label-sorted heterogeneous partition.

    A ``sorted_fraction`` of the samples is assigned to clients by class label
    (class c to client c mod n); the rest go to uniformly random clients.
    Binary regression labels are the class parity.
    """
    if n < 1 or d < 1 or samples_per_client < 1:
        raise ValueError("n, d, samples_per_client must be positive")
    if not 0.0 <= sorted_fraction <= 1.0:
        raise ValueError("sorted_fraction must lie in [0, 1]")

    root = derive_stream(seed, ("logreg",))
    classes = max(n, 2)
    total = n * samples_per_client

    means = root.child("means").normal((classes, d)) * (separation / np.sqrt(d))
    cls = np.arange(total) % classes
    X = means[cls] + root.child("features").normal((total, d)) / np.sqrt(d)
    y = np.where(cls % 2 == 0, 1.0, -1.0)

    assign = root.child("assign").integers(0, n, size=total)
    n_sorted = int(sorted_fraction * total)
    chosen = root.child("which_sorted").permutation(total)[:n_sorted]
    assign[chosen] = cls[chosen] % n

    features, labels = [], []
    for i in range(n):
        mask = assign == i
        if not mask.any():
            raise ValueError(
                f"client {i} received no samples; increase samples_per_client"
            )
        features.append(X[mask])
        labels.append(y[mask])
    return LogisticProblem(features, labels, ridge=ridge,
                           sigma_g=sigma_g, sigma_h=sigma_h)


@dataclass
class OracleCounters:
    """Per-client stochastic oracle call counts."""

    grad: np.ndarray
    hvp: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "OracleCounters":
        return cls(np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64))

    @property
    def totals(self) -> dict[str, int]:
        return {"grad": int(self.grad.sum()), "hvp": int(self.hvp.sum())}


class CountingOracles:
    """Oracle wrapper that counts stochastic calls; exact calls pass through."""

    __slots__ = ("problem", "counters")

    def __init__(self, problem: Problem, counters: OracleCounters | None = None):
        self.problem = problem
        self.counters = counters if counters is not None else OracleCounters.zeros(problem.n)

    def stoch_grad(self, i, x, rng):
        self.counters.grad[i] += 1
        return self.problem.stoch_grad(i, x, rng)

    def stoch_hvp(self, i, x, u, rng):
        self.counters.hvp[i] += 1
        return self.problem.stoch_hvp(i, x, u, rng)

    def stoch_grad_rows(self, x, rngs):
        self.counters.grad += 1
        return self.problem.stoch_grad_rows(x, rngs)

    def stoch_hvp_rows(self, x, u, rngs):
        self.counters.hvp += 1
        return self.problem.stoch_hvp_rows(x, u, rngs)

    def grad(self, i, x):
        return self.problem.grad(i, x)

    def hvp(self, i, x, u):
        return self.problem.hvp(i, x, u)


@dataclass
class RecordingOracles:
    """Oracle wrapper that logs every stochastic output, for replay checks."""

    problem: Problem
    log: list = field(default_factory=list)

    def stoch_grad(self, i, x, rng):
        out = self.problem.stoch_grad(i, x, rng)
        self.log.append(("grad", i, out.copy()))
        return out

    def stoch_hvp(self, i, x, u, rng):
        out = self.problem.stoch_hvp(i, x, u, rng)
        self.log.append(("hvp", i, out.copy()))
        return out

    def stoch_grad_rows(self, x, rngs):
        out = self.problem.stoch_grad_rows(x, rngs)
        for i in range(self.problem.n):
            self.log.append(("grad", i, out[i].copy()))
        return out

    def stoch_hvp_rows(self, x, u, rngs):
        out = self.problem.stoch_hvp_rows(x, u, rngs)
        for i in range(self.problem.n):
            self.log.append(("hvp", i, out[i].copy()))
        return out

    def grad(self, i, x):
        return self.problem.grad(i, x)

    def hvp(self, i, x, u):
        return self.problem.hvp(i, x, u)
