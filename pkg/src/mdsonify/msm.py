"""Observed Markov state model estimation and spectral analysis.

Counts lagged transitions, estimates a row-stochastic transition matrix
(optionally under detailed balance via the standard reversible
maximum-likelihood fixed-point iteration), computes the stationary
distribution, decomposes into relaxation modes and selects slow/fast modes
by implied timescale.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from mdsonify.trajio import ObservedChain

MAGIC_MSM = b"MDSM"
FORMAT_VERSION = 1

ROW_SUM_TOL = 1e-12
STATIONARY_TOL = 1e-10
DETAILED_BALANCE_TOL = 1e-8
IMAG_TOL = 1e-10


class EmptyDataError(ValueError):
    pass


class ReducibleError(ValueError):
    pass


class SpectralError(RuntimeError):
    pass


@dataclass(frozen=True)
class CountMatrix:
    """Lagged transition counts over n observed states."""

    counts: np.ndarray  # (n, n) int64
    lag: int  # frames
    dt: float = 1.0  # picoseconds per frame

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError("counts must be square")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        if counts.sum() == 0:
            raise ValueError("counts must contain at least one transition")
        if self.lag < 1:
            raise ValueError("lag must be >= 1")
        object.__setattr__(self, "counts", counts)

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    @property
    def lag_ps(self) -> float:
        return self.lag * self.dt


@dataclass(frozen=True)
class Mode:
    """One relaxation mode: eigenvalue, mu-normalized right eigenvector,
    implied timescale t = -lag / ln|eigenvalue|."""

    eigenvalue: float
    vector: np.ndarray
    timescale_ps: float


@dataclass(frozen=True)
class TransitionModel:
    """Row-stochastic transition matrix with stationary distribution and
    spectral decomposition, restricted to the largest connected set.

    ``states`` maps model indices back to the original observed-state
    indices; ``n_full`` is the original state count.
    """

    T: np.ndarray
    mu: np.ndarray
    lag_ps: float
    modes: tuple[Mode, ...]
    reversible: bool
    states: np.ndarray = field(default=None)
    n_full: int = 0

    def __post_init__(self):
        T = np.asarray(self.T, dtype=float)
        mu = np.asarray(self.mu, dtype=float)
        n = T.shape[0]
        if T.shape != (n, n) or mu.shape != (n,):
            raise ValueError("inconsistent T/mu shapes")
        if np.any(T < 0) or np.any(T > 1):
            raise ValueError("T entries must lie in [0, 1]")
        if np.max(np.abs(T.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
            raise ValueError("rows of T must sum to 1 within 1e-12")
        if np.any(mu < 0) or abs(mu.sum() - 1.0) > ROW_SUM_TOL:
            raise ValueError("mu must be a distribution")
        if np.max(np.abs(mu @ T - mu)) > STATIONARY_TOL:
            raise ValueError("mu is not stationary for T within 1e-10")
        if self.reversible:
            flow = mu[:, None] * T
            if np.max(np.abs(flow - flow.T)) > DETAILED_BALANCE_TOL:
                raise ValueError("detailed balance violated beyond 1e-8")
        states = self.states
        if states is None:
            states = np.arange(n)
        states = np.asarray(states, dtype=np.int64)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "n_full", self.n_full or n)
        object.__setattr__(self, "modes", tuple(self.modes))

    @property
    def n(self) -> int:
        return self.T.shape[0]

    def state_map(self) -> np.ndarray:
        """Original index -> model index, -1 for excluded states."""
        m = np.full(self.n_full, -1, dtype=np.int64)
        m[self.states] = np.arange(self.n)
        return m


def count_transitions(chains, lag: int, dt: float | None = None) -> CountMatrix:
    """Count sliding-window (t, t+lag) transitions, pooled over chains."""
    if lag < 1:
        raise ValueError("lag must be >= 1")
    chains = list(chains)
    if not chains:
        raise EmptyDataError("no chains given")
    n = max(c.n_states for c in chains)
    counts = np.zeros(n * n, dtype=np.int64)
    used = 0
    for i, chain in enumerate(chains):
        x = chain.states
        if x.size <= lag:
            warnings.warn(f"chain {i} shorter than lag+1 ({x.size} frames), skipped")
            continue
        pairs = x[:-lag] * n + x[lag:]
        counts += np.bincount(pairs, minlength=n * n)
        used += 1
    if used == 0:
        raise EmptyDataError("all chains shorter than lag+1")
    if dt is None:
        dt = chains[0].dt
    return CountMatrix(counts=counts.reshape(n, n), lag=lag, dt=dt)


def largest_connected_set(counts: np.ndarray) -> np.ndarray:
    """Indices of the largest strongly connected component of the count graph."""
    graph = csr_matrix((counts > 0).astype(np.int8))
    n_comp, labels = connected_components(graph, directed=True, connection="strong")
    sizes = np.bincount(labels, minlength=n_comp)
    # ties broken by total counts inside the component
    best, best_key = 0, (-1, -1)
    for c in range(n_comp):
        members = labels == c
        key = (int(sizes[c]), int(counts[np.ix_(members, members)].sum()))
        if key > best_key:
            best, best_key = c, key
    return np.flatnonzero(labels == best)


def _reversible_mle(C: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100_000):
    """Reversible MLE via the fixed point
    x_ab <- (C_ab + C_ba) / (c_a/x_a + c_b/x_b), zeros preserved exactly."""
    C = C.astype(float)
    c_row = C.sum(axis=1)
    sym = C + C.T
    support = sym > 0
    x = sym / sym.sum()
    for _ in range(max_sweeps):
        x_row = x.sum(axis=1)
        denom = c_row[:, None] / x_row[:, None] + c_row[None, :] / x_row[None, :]
        x_new = np.where(support, sym / np.where(support, denom, 1.0), 0.0)
        x_new /= x_new.sum()
        delta = np.max(np.abs(x_new - x))
        x = x_new
        if delta < tol:
            break
    x_row = x.sum(axis=1)
    T = x / x_row[:, None]
    T[~support] = 0.0
    T /= T.sum(axis=1, keepdims=True)
    return T


def estimate_T(counts: CountMatrix, reversible: bool = True) -> TransitionModel:
    """Estimate a TransitionModel on the largest connected set of ``counts``.

    Non-reversible: plain row normalization. Reversible: maximum likelihood
    under detailed balance; structurally zero count pairs stay exactly zero.
    """
    active = largest_connected_set(counts.counts)
    C = counts.counts[np.ix_(active, active)]
    if C.sum() == 0:
        raise EmptyDataError("no transitions inside the connected set")
    if reversible:
        T = _reversible_mle(C)
    else:
        T = C.astype(float) / C.sum(axis=1, keepdims=True)
    mu = stationary(T)
    modes = decompose(T, mu, lag_ps=counts.lag_ps, reversible=reversible)
    return TransitionModel(T=T, mu=mu, lag_ps=counts.lag_ps, modes=modes,
                           reversible=reversible, states=active, n_full=counts.n)


def stationary(T: np.ndarray) -> np.ndarray:
    """Unique stationary distribution of an irreducible row-stochastic T.

    Solved directly from (T' - I) mu = 0 with the normalization row;
    raises ReducibleError naming the blocks if T is not irreducible.
    """
    T = np.asarray(T, dtype=float)
    n = T.shape[0]
    if n == 1:
        return np.array([1.0])
    graph = csr_matrix((T > 0).astype(np.int8))
    n_comp, labels = connected_components(graph, directed=True, connection="strong")
    if n_comp > 1:
        blocks = [np.flatnonzero(labels == c).tolist() for c in range(n_comp)]
        raise ReducibleError(f"T is reducible; strongly connected blocks: {blocks}")
    A = T.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    mu = np.linalg.solve(A, b)
    mu = np.clip(mu, 0.0, None)
    return mu / mu.sum()


def decompose(T: np.ndarray, mu: np.ndarray, lag_ps: float = 1.0,
              reversible: bool = True) -> tuple[Mode, ...]:
    """Eigen-decomposition into modes sorted by descending |eigenvalue|.

    Right eigenvectors are normalized under the mu-weighted inner product
    and sign-fixed so the largest-magnitude entry is positive.
    """
    T = np.asarray(T, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if reversible:
        sq = np.sqrt(mu)
        S = (sq[:, None] / sq[None, :]) * T
        S = 0.5 * (S + S.T)
        vals, vecs = np.linalg.eigh(S)
        Q = vecs / sq[:, None]
    else:
        vals, vecs = np.linalg.eig(T)
        if np.max(np.abs(vals.imag)) > IMAG_TOL or np.max(np.abs(vecs.imag)) > IMAG_TOL:
            raise SpectralError("complex eigenvalues beyond tolerance")
        vals = vals.real
        Q = vecs.real
        norms = np.sqrt(np.einsum("a,ai->i", mu, Q ** 2))
        Q = Q / norms[None, :]
    order = np.argsort(-np.abs(vals))
    modes = []
    for idx in order:
        q = Q[:, idx].copy()
        peak = int(np.argmax(np.abs(q)))
        if q[peak] < 0:
            q = -q
        lam = float(np.clip(vals[idx], -1.0, 1.0))
        modes.append(Mode(eigenvalue=lam, vector=q,
                          timescale_ps=implied_timescale(lam, lag_ps)))
    return tuple(modes)


def implied_timescale(eigenvalue: float, lag_ps: float) -> float:
    """t = -lag / ln|eigenvalue|; inf at |eigenvalue| = 1, 0 at 0."""
    a = abs(eigenvalue)
    if a >= 1.0 - 1e-12:
        return float("inf")
    if a <= 0.0:
        return 0.0
    return -lag_ps / np.log(a)


def select_modes(model: TransitionModel, resolution_ps: float, n_slow: int,
                 n_fast: int | None = None):
    """Split retained non-stationary modes into (slow, fast) lists.

    Modes with implied timescale below ``resolution_ps`` are discarded.
    With ``n_fast`` set, exactly that many fast modes are returned (the
    slowest ones); fewer available is an error.
    """
    if resolution_ps <= 0:
        raise ValueError("resolution_ps must be > 0")
    retained = [m for m in model.modes[1:] if m.timescale_ps >= resolution_ps]
    if len(retained) < n_slow:
        raise ValueError(
            f"only {len(retained)} modes survive the {resolution_ps} ps "
            f"resolution filter, need at least n_slow={n_slow}"
        )
    slow = retained[:n_slow]
    fast = retained[n_slow:]
    if n_fast is not None:
        if len(fast) < n_fast:
            raise ValueError(
                f"only {len(fast)} fast modes survive the resolution filter, "
                f"need {n_fast}"
            )
        fast = fast[:n_fast]
    return slow, fast


_HEADER = struct.Struct("<4sHIIdB")  # magic, version, n, n_full, lag_ps, reversible


def save_model(model: TransitionModel, path) -> None:
    """Serialize to the self-describing binary model format (magic MDSM)."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC_MSM, FORMAT_VERSION, model.n, model.n_full,
                              model.lag_ps, int(model.reversible)))
        fh.write(np.ascontiguousarray(model.states, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(model.T, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.mu, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(model.modes)))
        for m in model.modes:
            fh.write(struct.pack("<dd", m.eigenvalue, m.timescale_ps))
            fh.write(np.ascontiguousarray(m.vector, dtype="<f8").tobytes())


def load_model(path) -> TransitionModel:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated model file")
    magic, version, n, n_full, lag_ps, reversible = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC_MSM:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    states = np.frombuffer(raw, "<i8", count=n, offset=off).copy()
    off += 8 * n
    T = np.frombuffer(raw, "<f8", count=n * n, offset=off).reshape(n, n).copy()
    off += 8 * n * n
    mu = np.frombuffer(raw, "<f8", count=n, offset=off).copy()
    off += 8 * n
    (n_modes,) = struct.unpack_from("<I", raw, off)
    off += 4
    modes = []
    for _ in range(n_modes):
        lam, ts = struct.unpack_from("<dd", raw, off)
        off += 16
        vec = np.frombuffer(raw, "<f8", count=n, offset=off).copy()
        off += 8 * n
        modes.append(Mode(eigenvalue=lam, vector=vec, timescale_ps=ts))
    return TransitionModel(T=T, mu=mu, lag_ps=lag_ps, modes=tuple(modes),
                           reversible=bool(reversible), states=states, n_full=n_full)


def export_csv(model: TransitionModel, path) -> None:
    """Human-readable dump of T and mu for inspection."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# n={model.n} lag_ps={model.lag_ps} reversible={model.reversible}\n")
        fh.write("# mu\n")
        fh.write(",".join(repr(float(v)) for v in model.mu) + "\n")
        fh.write("# T\n")
        for row in model.T:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
