"""Simulated n-client server loop: normalized step, broadcast, momentum,
compression of the momentum-memory difference, aggregation.

One iteration, in order: the server moves against the direction of its
aggregate memory g (unit-normalized, step length exactly gamma_t) and
broadcasts the new point; every client updates its momentum estimator v_i,
compresses v_i - g_i, and applies the message to its memory; the server folds
the averaged messages into g.  Client updates are independent within an
iteration and may run on a thread pool; aggregation is an ordered reduction
over clients, so results do not depend on scheduling.

Client memories are updated by assigning the transmitted coordinates to their
new values, which is the exact-arithmetic equivalent of adding the compressed
difference and keeps the identity-compressor collapse (g_i == v_i) exact in
floating point.  The server tracks the exact mean of the client memories
(again equivalent to folding in the averaged messages, without accumulating
roundoff), so the aggregation-consistency invariant holds exactly and the
n=1 identity-compressor case reduces to the centralized method bit for bit.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .compressors import (
    CompressedMessage,
    CompressorSpec,
    compress,
    compress_matrix,
    payload_bits,
    serialize,
)
from .core import OracleStreams, RngStream, derive_stream, norm
from .momentum import MomentumState, init_state, update_momentum
from .problems import (
    CountingOracles,
    OracleCounters,
    Problem,
    make_hetero_quadratics,
    make_label_sorted_logreg,
)
from .schedules import KINDS, Schedule, gamma_eta_arrays

CSV_HEADER = "t,grad_norm,f_value,V_t,U_t,gamma_t,eta_t,cum_bits"


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


class NumericalFailureError(RuntimeError):
    """NaN/Inf appeared in the iterate state at iteration ``iteration``."""

    def __init__(self, iteration: int, what: str):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class ProblemConfig:
    """Reconstructible description of a synthetic problem instance."""

    family: str = "quadratic"
    n: int = 1
    d: int = 10
    seed: int = 0
    sigma_g: float = 0.0
    sigma_h: float = 0.0
    # quadratic family
    heterogeneity: float = 1.0
    condition: float = 10.0
    structure: str = "rotated"
    # logistic family
    samples_per_client: int = 50
    sorted_fraction: float = 0.5
    ridge: float = 0.1
    separation: float = 3.0

    def validate(self):
        if self.family not in ("quadratic", "logreg"):
            raise ConfigError(f"problem family: unknown value {self.family!r}")
        if self.n < 1:
            raise ConfigError("n: client count must be >= 1")
        if self.d < 1:
            raise ConfigError("d: dimension must be >= 1")
        if self.sigma_g < 0 or self.sigma_h < 0:
            raise ConfigError("sigma_g/sigma_h: noise levels must be nonnegative")


def make_problem(cfg: ProblemConfig) -> Problem:
    cfg.validate()
    if cfg.family == "quadratic":
        return make_hetero_quadratics(
            cfg.n, cfg.d, heterogeneity=cfg.heterogeneity, condition=cfg.condition,
            seed=cfg.seed, structure=cfg.structure,
            sigma_g=cfg.sigma_g, sigma_h=cfg.sigma_h,
        )
    return make_label_sorted_logreg(
        cfg.n, cfg.d, samples_per_client=cfg.samples_per_client,
        sorted_fraction=cfg.sorted_fraction, seed=cfg.seed, ridge=cfg.ridge,
        separation=cfg.separation, sigma_g=cfg.sigma_g, sigma_h=cfg.sigma_h,
    )


@dataclass
class RunConfig:
    """Full experiment description; everything a run needs, and nothing more."""

    kind: str
    schedule: Schedule
    compressor: CompressorSpec
    problem: ProblemConfig
    iterations: int
    master_seed: int = 0
    normalized: bool = True
    rhm_independent_batch: bool = False
    record_stride: int = 1
    parallel_clients: bool = False
    trace_level: int = 0
    x0_scale: float = 1.0

    @property
    def n(self) -> int:
        return self.problem.n

    @property
    def d(self) -> int:
        return self.problem.d

    @property
    def T(self) -> int:
        return self.iterations

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind: unknown momentum kind {self.kind!r}")
        if self.iterations < 1:
            raise ConfigError("iterations: horizon must be >= 1")
        if self.record_stride < 1:
            raise ConfigError("record_stride: must be >= 1")
        self.problem.validate()
        if self.compressor.d != self.problem.d:
            raise ConfigError(
                f"compressor: dimension {self.compressor.d} != problem dimension {self.problem.d}"
            )


@dataclass
class MetricsRecord:
    """Telemetry snapshot for the state x^t, before step t runs."""

    t: int
    grad_norm: float
    f_value: float
    V_t: float          # mean ||g_i - v_i||: compression-memory error
    U_t: float          # mean ||v_i - grad f_i(x)||: momentum-estimation error
    gamma_t: float
    eta_t: float
    cum_bits: int
    v_gap: float = 0.0  # ||mean(v_i) - grad f(x)||, used by the descent audit


@dataclass
class ClientState:
    g: np.ndarray
    mom: MomentumState


@dataclass
class ServerState:
    x: np.ndarray
    g: np.ndarray
    t: int = 0


@dataclass
class RunResult:
    config: RunConfig
    records: list
    grad_norms: np.ndarray   # dense ||grad f(x^t)|| for t in [0, T)
    gammas: np.ndarray       # dense gamma_t for t in [0, T)
    etas: np.ndarray
    output_index: int
    x_output: np.ndarray
    x_final: np.ndarray
    counters: OracleCounters
    total_bits: int
    problem: Problem
    trace: bytes | None = None

    @property
    def oracle_counts(self) -> dict[str, int]:
        return self.counters.totals


def select_output_index(gammas: np.ndarray, rng: RngStream) -> int:
    """Sample an index with probability proportional to its stepsize."""
    cumulative = np.cumsum(gammas / gammas.sum())
    idx = int(np.searchsorted(cumulative, rng.uniform(), side="right"))
    return min(idx, len(gammas) - 1)


class Simulation:
    """One configured run; drive with :meth:`step` or :meth:`run`."""

    def __init__(self, config: RunConfig, problem: Problem | None = None):
        config.validate()
        self.config = config
        self.problem = problem if problem is not None else make_problem(config.problem)
        if self.problem.n != config.problem.n or self.problem.d != config.problem.d:
            raise ConfigError("problem: instance shape disagrees with config")
        self.oracles = CountingOracles(self.problem)

        T = config.iterations
        # one extra entry so the record at index T carries schedule values too
        self._gammas, self._etas = gamma_eta_arrays(config.schedule, T + 1)

        ms = config.master_seed
        d = config.d
        n = self.problem.n
        x0 = derive_stream(ms, ("x0",)).normal(d)
        x0 *= config.x0_scale / np.sqrt(d)
        # client memories live in one (n, d) block; ClientState rows are views
        self._G = np.stack([init_state(self.problem, i, x0).v for i in range(n)])
        self._V = self._G.copy()
        clients = [ClientState(self._G[i], MomentumState(self._V[i])) for i in range(n)]
        g0 = self._G.mean(axis=0)
        self.server = ServerState(x=x0, g=g0, t=0)
        self.clients = clients

        self._oracle_streams = [
            OracleStreams(derive_stream(ms, ("client", i))) for i in range(n)
        ]
        if config.compressor.is_random:
            self._compress_streams = [
                derive_stream(ms, ("compress", i)) for i in range(n)
            ]
        else:
            self._compress_streams = None

        self.t = 0
        self.cum_bits = 0
        self.grad_norms = np.empty(T)
        self._trace = bytearray() if config.trace_level >= 1 else None
        self._executor = None
        # client-parallel mode drives per-client updates on a pool; the
        # default path batches the identical arithmetic across clients
        self._batch_mode = not (config.parallel_clients and n > 1)
        if not self._batch_mode:
            self._executor = ThreadPoolExecutor(max_workers=min(n, 8))
        comp = config.compressor
        self._bits_per_msg = comp.d * 64 if comp.kind == "identity" else comp.k * (32 + 64)
        self._rowsel = np.arange(n)[:, None]

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    # one client's share of an iteration; safe to run concurrently
    def _client_task(self, i: int, t: int, x_prev, x_next, eta):
        config = self.config
        rng = self._oracle_streams[i]
        rng.t = t
        mom = update_momentum(
            config.kind, self.clients[i].mom, self.oracles, i, x_prev, x_next, eta,
            rng, rhm_independent_batch=config.rhm_independent_batch,
        )
        if not np.isfinite(mom.v).all():
            raise NumericalFailureError(t, f"momentum state of client {i}")
        crng = None
        if self._compress_streams is not None:
            crng = self._compress_streams[i].seek(t)
        msg = compress(config.compressor, mom.v - self.clients[i].g, crng)
        return mom, msg

    def _update_clients_batched(self, t: int, x_prev, x_next, eta):
        """All clients' momentum updates and messages, vectorized across rows.

        Element for element this follows :func:`efmom.momentum.update_momentum`
        exactly (same operations, same order), with per-client streams; a
        dedicated test pins the bitwise agreement.
        """
        kind = self.config.kind
        streams = self._oracle_streams
        for s in streams:
            s.t = t
        oracles = self.oracles
        V = self._V
        one_minus = 1.0 - eta

        if kind == "sgdm":
            G = oracles.stoch_grad_rows(x_next, [s.grad() for s in streams])
            V_new = one_minus * V + eta * G
        elif kind == "igt":
            y = x_next + (one_minus / eta) * (x_next - x_prev)
            G = oracles.stoch_grad_rows(y, [s.grad() for s in streams])
            V_new = one_minus * V + eta * G
        elif kind == "mvr":
            G_next = oracles.stoch_grad_rows(x_next, [s.grad() for s in streams])
            G_prev = oracles.stoch_grad_rows(x_prev, [s.grad() for s in streams])
            V_tilde = V + G_next - G_prev
            V_new = one_minus * V_tilde + eta * G_next
        elif kind == "hm":
            H = oracles.stoch_hvp_rows(x_next, x_next - x_prev, [s.hvp() for s in streams])
            G = oracles.stoch_grad_rows(x_next, [s.grad() for s in streams])
            V_new = one_minus * (V + H) + eta * G
        else:  # rhm
            q = np.array([s.q().uniform() for s in streams])[:, None]
            x_hat = q * x_next + (1.0 - q) * x_prev
            H = oracles.stoch_hvp_rows(x_hat, x_next - x_prev, [s.hvp() for s in streams])
            if self.config.rhm_independent_batch:
                G = oracles.stoch_grad_rows(x_hat, [s.indep_grad() for s in streams])
            else:
                G = oracles.stoch_grad_rows(x_next, [s.grad() for s in streams])
            V_new = one_minus * (V + H) + eta * G

        if not np.isfinite(V_new).all():
            raise NumericalFailureError(t, "momentum state")

        crngs = None
        if self._compress_streams is not None:
            crngs = [s.seek(t) for s in self._compress_streams]
        idx, vals = compress_matrix(self.config.compressor, V_new - self._G, crngs)
        self._V = V_new
        return V_new, idx, vals

    def _advance(self):
        t = self.t
        config = self.config
        if t >= config.iterations:
            raise RuntimeError("run horizon exhausted")
        server = self.server
        x = server.x
        self.grad_norms[t] = norm(self.problem.mean_grad(x))

        gamma = self._gammas[t]
        eta = self._etas[t]
        g = server.g
        if config.normalized:
            g_norm = norm(g)
            x_next = x - (gamma / g_norm) * g if g_norm > 0.0 else x.copy()
        else:
            x_next = x - gamma * g
        if not np.isfinite(x_next).all():
            raise NumericalFailureError(t, "iterate")

        n = self.problem.n
        trace = self._trace
        clients = self.clients
        if self._batch_mode:
            V_new, idx, vals = self._update_clients_batched(t, x, x_next, eta)
            rowsel = self._rowsel
            self._G[rowsel, idx] = V_new[rowsel, idx]
            for i in range(n):
                clients[i].mom = MomentumState(V_new[i])
            if trace is not None:
                dense = config.compressor.kind == "identity"
                for i in range(n):
                    trace.extend(
                        serialize(CompressedMessage(idx[i], vals[i], config.d, dense=dense))
                    )
            bits = n * self._bits_per_msg
        else:
            results = list(
                self._executor.map(
                    lambda i: self._client_task(i, t, x, x_next, eta), range(n)
                )
            )
            bits = 0
            for i, (mom, msg) in enumerate(results):
                client = clients[i]
                client.mom = mom
                midx = msg.indices
                client.g[midx] = mom.v[midx]
                bits += payload_bits(msg)
                if trace is not None:
                    trace.extend(serialize(msg))
        # exact-mean server bookkeeping over the (n, d) memory block; client
        # rows are views of it, so this is the ordered reduction both modes share
        g_new = self._G.mean(axis=0)
        if not np.isfinite(g_new).all():
            raise NumericalFailureError(t, "server memory")

        self.cum_bits += bits
        server.g = g_new
        server.x = x_next
        server.t = t + 1
        self.t = t + 1

    def metrics(self) -> MetricsRecord:
        """Full telemetry for the current state."""
        t = self.t
        problem = self.problem
        x = self.server.x
        grad_full = problem.mean_grad(x)
        v_sum = np.zeros(problem.d)
        V = 0.0
        U = 0.0
        for i, client in enumerate(self.clients):
            v = client.mom.v
            V += norm(client.g - v)
            U += norm(v - problem.grad(i, x))
            v_sum += v
        n = problem.n
        return MetricsRecord(
            t=t,
            grad_norm=norm(grad_full),
            f_value=problem.f_value(x),
            V_t=V / n,
            U_t=U / n,
            gamma_t=float(self._gammas[t]),
            eta_t=float(self._etas[t]),
            cum_bits=self.cum_bits,
            v_gap=norm(v_sum / n - grad_full),
        )

    def step(self) -> MetricsRecord:
        """Run one iteration and return the new state's telemetry."""
        self._advance()
        return self.metrics()

    def run(self) -> RunResult:
        """Execute the configured horizon and sample the output iterate."""
        if self.t != 0:
            raise RuntimeError("run() needs a fresh simulation")
        config = self.config
        T = config.iterations
        stride = config.record_stride
        gammas = self._gammas[:T]
        output_index = select_output_index(
            gammas, derive_stream(config.master_seed, ("output",))
        )
        records = [self.metrics()]
        x_output = None
        try:
            while self.t < T:
                if self.t == output_index:
                    x_output = self.server.x.copy()
                self._advance()
                if self.t % stride == 0 or self.t == T:
                    records.append(self.metrics())
        finally:
            self.close()
        return RunResult(
            config=config,
            records=records,
            grad_norms=self.grad_norms.copy(),
            gammas=gammas.copy(),
            etas=self._etas[:T].copy(),
            output_index=output_index,
            x_output=x_output,
            x_final=self.server.x.copy(),
            counters=self.oracles.counters,
            total_bits=self.cum_bits,
            problem=self.problem,
            trace=bytes(self._trace) if self._trace is not None else None,
        )


def run(config: RunConfig, problem: Problem | None = None) -> RunResult:
    """Convenience wrapper: build a simulation and run it."""
    return Simulation(config, problem=problem).run()


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(records, path) -> None:
    """Trajectory export; one row per record, schema is CSV_HEADER."""
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in records:
            fh.write(
                f"{r.t},{_fmt(r.grad_norm)},{_fmt(r.f_value)},{_fmt(r.V_t)},"
                f"{_fmt(r.U_t)},{_fmt(r.gamma_t)},{_fmt(r.eta_t)},{r.cum_bits}\n"
            )


def write_jsonl(records, path) -> None:
    """Same fields as the CSV export, one JSON object per line."""
    with open(path, "w") as fh:
        for r in records:
            row = {
                "t": r.t,
                "grad_norm": r.grad_norm,
                "f_value": r.f_value,
                "V_t": r.V_t,
                "U_t": r.U_t,
                "gamma_t": r.gamma_t,
                "eta_t": r.eta_t,
                "cum_bits": r.cum_bits,
            }
            fh.write(json.dumps(row) + "\n")
