"""Hidden Markov model over metastable states.

Baum-Welch estimation on lag-subsampled observed chains with scaled
forward-backward, initialized from a spectral split of the observed-model
eigenvectors. Exposes the membership matrix M (posterior metastable
probabilities per observed state) and synthetic chain sampling.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mdsonify.msm import ReducibleError, TransitionModel, stationary
from mdsonify.trajio import ObservedChain

MAGIC_HMM = b"MDHM"
FORMAT_VERSION = 1

PROB_FLOOR = 1e-12
LOGLIK_SLACK = 1e-9


class InitializationError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


def membership_matrix(emission: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """Posterior M[A, a] = emission[A, a] * pi[A] / sum_B emission[B, a] * pi[B].

    Observed states emitted by no hidden state get a uniform column with a
    warning.
    """
    joint = emission * pi[:, None]
    norm = joint.sum(axis=0)
    dead = norm <= 0.0
    if np.any(dead):
        warnings.warn(
            f"{int(dead.sum())} observed state(s) have zero emission "
            "probability; assigning uniform membership"
        )
        joint[:, dead] = 1.0
        norm = joint.sum(axis=0)
    return joint / norm[None, :]


@dataclass(frozen=True)
class HiddenModel:
    """m-metastable-state HMM over n observed states."""

    T_hidden: np.ndarray  # (m, m) row-stochastic
    emission: np.ndarray  # (m, n) row-stochastic
    pi: np.ndarray  # (m,) hidden stationary distribution
    lag_ps: float
    states: np.ndarray = field(default=None)  # model index -> original observed index
    n_full: int = 0
    M: np.ndarray = field(default=None)  # (m, n), columns sum to 1

    def __post_init__(self):
        T = np.asarray(self.T_hidden, dtype=float)
        B = np.asarray(self.emission, dtype=float)
        pi = np.asarray(self.pi, dtype=float)
        m, n = B.shape
        if T.shape != (m, m) or pi.shape != (m,):
            raise ValueError("inconsistent T_hidden/emission/pi shapes")
        if np.max(np.abs(T.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("T_hidden rows must sum to 1 within 1e-12")
        if np.max(np.abs(B.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("emission rows must sum to 1 within 1e-12")
        if np.max(np.abs(pi @ T - pi)) > 1e-10:
            raise ValueError("pi is not stationary for T_hidden within 1e-10")
        M = self.M
        if M is None:
            M = membership_matrix(B, pi)
        M = np.asarray(M, dtype=float)
        if np.max(np.abs(M.sum(axis=0) - 1.0)) > 1e-10:
            raise ValueError("columns of M must sum to 1 within 1e-10")
        states = self.states
        if states is None:
            states = np.arange(n)
        states = np.asarray(states, dtype=np.int64)
        object.__setattr__(self, "T_hidden", T)
        object.__setattr__(self, "emission", B)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "n_full", self.n_full or n)

    @property
    def m(self) -> int:
        return self.T_hidden.shape[0]

    @property
    def n(self) -> int:
        return self.emission.shape[1]

    def state_map(self) -> np.ndarray:
        sm = np.full(self.n_full, -1, dtype=np.int64)
        sm[self.states] = np.arange(self.n)
        return sm


def membership(model: HiddenModel) -> np.ndarray:
    """Membership matrix M, computed from emission and pi by Bayes' rule."""
    return membership_matrix(model.emission, model.pi)


# ---------------------------------------------------------------------------
# initialization

def _spectral_partition(init: TransitionModel, m: int, seed: int) -> np.ndarray:
    """Hard split of observed states into m groups from the sign structure of
    the slow eigenvectors, refined by a few Lloyd sweeps in spectral space."""
    if len(init.modes) < m:
        raise InitializationError(
            f"m={m} exceeds available modes + 1 ({len(init.modes)})"
        )
    Q = np.column_stack([mo.vector for mo in init.modes[1:m]])  # (n, m-1)
    mu = init.mu
    n = Q.shape[0]
    patterns: dict[tuple, list[int]] = {}
    for a in range(n):
        patterns.setdefault(tuple(Q[a] > 0), []).append(a)
    groups = sorted(patterns.values(), key=lambda g: -mu[g].sum())
    if len(groups) >= m:
        centers = np.array([
            np.average(Q[g], axis=0, weights=mu[g]) for g in groups[:m]
        ])
    else:
        rng = np.random.default_rng(seed)
        centers = Q[rng.choice(n, size=m, replace=False, p=mu)]
    for _ in range(20):
        d2 = ((Q[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        new_centers = centers.copy()
        for A in range(m):
            members = labels == A
            if np.any(members):
                new_centers[A] = np.average(Q[members], axis=0, weights=mu[members])
        if np.allclose(new_centers, centers):
            break
        centers = new_centers
    d2 = ((Q[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    if len(np.unique(labels)) < m:
        raise InitializationError("spectral split produced empty metastable groups")
    return labels


def _initial_parameters(init: TransitionModel, m: int, seed: int):
    labels = _spectral_partition(init, m, seed)
    n = init.n
    mu, T = init.mu, init.T
    # metastable flow: F[A, B] = sum_{a in A, b in B} mu_a T_ab
    member = np.zeros((m, n))
    member[labels, np.arange(n)] = 1.0
    flow = member @ (mu[:, None] * T) @ member.T
    pi0 = flow.sum(axis=1)
    T0 = flow / pi0[:, None]
    structural_zero = flow == 0.0
    # soft emissions around the hard split so EM can move states between groups
    B0 = np.where(member > 0, 0.95, 0.05 / max(m - 1, 1)) * mu[None, :]
    B0 /= B0.sum(axis=1, keepdims=True)
    return T0, B0, pi0 / pi0.sum(), structural_zero


# ---------------------------------------------------------------------------
# Baum-Welch

def _subchains(chains, lag: int, state_map: np.ndarray) -> list[np.ndarray]:
    """Map chains to model indices, split at excluded states, subsample at the
    lag with all offsets pooled."""
    segments = []
    for chain in chains:
        mapped = state_map[chain.states]
        bad = np.flatnonzero(mapped < 0)
        start = 0
        for b in list(bad) + [mapped.size]:
            if b - start >= 2:
                segments.append(mapped[start:b])
            start = b + 1
    subs = []
    for seg in segments:
        for off in range(lag):
            s = seg[off::lag]
            if s.size >= 2:
                subs.append(np.ascontiguousarray(s))
    if not subs:
        raise InitializationError("no usable sub-chains at the requested lag")
    return subs


def _forward_pass(A, B_obs, rho):
    L, m = B_obs.shape
    alpha = np.empty((L, m))
    c = np.empty(L)
    a = rho * B_obs[0]
    c[0] = a.sum()
    alpha[0] = a / c[0]
    for t in range(1, L):
        a = np.dot(alpha[t - 1], A) * B_obs[t]
        c[t] = a.sum()
        alpha[t] = a / c[t]
    return alpha, c


def _backward_pass(A, B_obs, c):
    L, m = B_obs.shape
    beta = np.empty((L, m))
    beta[-1] = 1.0
    for t in range(L - 2, -1, -1):
        beta[t] = np.dot(A, B_obs[t + 1] * beta[t + 1]) / c[t + 1]
    return beta


try:  # optional JIT; the numpy fallback is exact but ~50x slower
    from numba import njit

    _forward_pass = njit(cache=True)(_forward_pass)
    _backward_pass = njit(cache=True)(_backward_pass)
except ImportError:  # pragma: no cover
    pass


def _forward_backward(x: np.ndarray, A: np.ndarray, B_obs: np.ndarray,
                      rho: np.ndarray):
    """Scaled forward-backward for one sub-chain.

    B_obs is the (L, m) emission likelihood per frame. Returns
    (gamma, xi_sum, loglik) where gamma is (L, m) and xi_sum is (m, m).
    """
    alpha, c = _forward_pass(A, np.ascontiguousarray(B_obs), rho)
    if not np.all(c > 0.0):
        raise NumericalError(
            f"zero forward probability at frame {int(np.argmin(c > 0.0))}"
        )
    beta = _backward_pass(A, np.ascontiguousarray(B_obs), c)
    gamma = alpha * beta
    w = B_obs[1:] * beta[1:] / c[1:, None]
    xi_sum = A * np.einsum("ti,tj->ij", alpha[:-1], w)
    return gamma, xi_sum, float(np.log(c).sum())


def estimate_hmm(chains, m: int, lag: int, init: TransitionModel,
                 tol: float = 1e-6, max_iter: int = 200,
                 seed: int = 0) -> HiddenModel:
    """Fit an m-hidden-state HMM to observed chains by Baum-Welch.

    Chains are subsampled at the lag (all offsets pooled). Transition entries
    with no supporting flow in the initializing observed model stay exactly
    zero; all other probabilities are floored at 1e-12. The log-likelihood is
    checked to be non-decreasing within 1e-9 per iteration.
    """
    if m < 2:
        raise ValueError(f"m must be >= 2, got {m}")
    if lag < 1:
        raise ValueError("lag must be >= 1")
    subs = _subchains(chains, lag, init.state_map())
    n = init.n
    seen = np.unique(np.concatenate(subs))
    if seen.size < m:
        raise InitializationError(
            f"only {seen.size} distinct observed states in the data; "
            f"emissions for m={m} would be degenerate"
        )
    A, B, rho, structural_zero = _initial_parameters(init, m, seed)
    prev_ll = -np.inf
    for _ in range(max_iter):
        A_num = np.zeros((m, m))
        A_den = np.zeros(m)
        B_num = np.zeros((m, n))
        rho_num = np.zeros(m)
        ll = 0.0
        for x in subs:
            B_obs = B[:, x].T
            gamma, xi_sum, chain_ll = _forward_backward(x, A, B_obs, rho)
            A_num += xi_sum
            A_den += gamma[:-1].sum(axis=0)
            np.add.at(B_num.T, x, gamma)
            rho_num += gamma[0]
            ll += chain_ll
        if ll < prev_ll - LOGLIK_SLACK:
            raise NumericalError(
                f"log-likelihood decreased from {prev_ll} to {ll}"
            )
        converged = ll - prev_ll < tol and np.isfinite(prev_ll)
        prev_ll = ll
        A = np.where(structural_zero, 0.0, np.maximum(A_num, PROB_FLOOR))
        A /= A.sum(axis=1, keepdims=True)
        B = np.maximum(B_num, PROB_FLOOR)
        B /= B.sum(axis=1, keepdims=True)
        rho = rho_num / rho_num.sum()
        if converged:
            break
    try:
        pi = stationary(A)
    except ReducibleError:
        pi = rho / rho.sum()
    # polish so the stationarity invariant holds to 1e-10
    for _ in range(5):
        pi = pi @ A
        pi /= pi.sum()
    return HiddenModel(T_hidden=A, emission=B, pi=pi, lag_ps=lag * chains[0].dt,
                       states=init.states.copy(), n_full=init.n_full)


# ---------------------------------------------------------------------------
# sampling

def sample_chain(model: HiddenModel, length: int, seed: int = 0) -> ObservedChain:
    """Sample an observed chain of ``length`` frames from the HMM.

    Hidden states start from pi and follow T_hidden; observed states are
    drawn from the hidden state's emission row. Deterministic given the seed.
    Frame spacing equals the model lag; state indices are in the original
    observed-state numbering.
    """
    if length < 2:
        raise ValueError("length must be >= 2")
    rng = np.random.default_rng(seed)
    m = model.m
    cum_T = np.cumsum(model.T_hidden, axis=1)
    cum_T[:, -1] = 1.0
    hidden = np.empty(length, dtype=np.int64)
    hidden[0] = rng.choice(m, p=model.pi)
    u = rng.random(length - 1)
    for t in range(1, length):
        hidden[t] = np.searchsorted(cum_T[hidden[t - 1]], u[t - 1], side="right")
    observed = np.empty(length, dtype=np.int64)
    for A in range(m):
        idx = np.flatnonzero(hidden == A)
        if idx.size:
            observed[idx] = rng.choice(model.n, size=idx.size, p=model.emission[A])
    return ObservedChain(states=model.states[observed], n_states=model.n_full,
                         dt=model.lag_ps)


def align_labels(emission_a: np.ndarray, emission_b: np.ndarray) -> np.ndarray:
    """Greedy hidden-state alignment by maximal emission overlap.

    Returns a permutation p with p[i] = index in b best matching state i of a.
    """
    m = emission_a.shape[0]
    overlap = np.minimum(emission_a[:, None, :], emission_b[None, :, :]).sum(axis=2)
    perm = np.full(m, -1, dtype=np.int64)
    taken = np.zeros(m, dtype=bool)
    for _ in range(m):
        i, j = np.unravel_index(
            np.argmax(np.where(taken[None, :] | (perm >= 0)[:, None], -1.0, overlap)),
            overlap.shape,
        )
        perm[i] = j
        taken[j] = True
    return perm


# ---------------------------------------------------------------------------
# serialization

_HEADER = struct.Struct("<4sHIIId")  # magic, version, m, n, n_full, lag_ps


def save_model(model: HiddenModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC_HMM, FORMAT_VERSION, model.m, model.n,
                              model.n_full, model.lag_ps))
        fh.write(np.ascontiguousarray(model.states, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(model.T_hidden, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.emission, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.pi, dtype="<f8").tobytes())


def load_model(path) -> HiddenModel:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated model file")
    magic, version, m, n, n_full, lag_ps = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC_HMM:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    states = np.frombuffer(raw, "<i8", count=n, offset=off).copy()
    off += 8 * n
    T = np.frombuffer(raw, "<f8", count=m * m, offset=off).reshape(m, m).copy()
    off += 8 * m * m
    B = np.frombuffer(raw, "<f8", count=m * n, offset=off).reshape(m, n).copy()
    off += 8 * m * n
    pi = np.frombuffer(raw, "<f8", count=m, offset=off).copy()
    return HiddenModel(T_hidden=T, emission=B, pi=pi, lag_ps=lag_ps,
                       states=states, n_full=n_full)


def export_membership(model: HiddenModel, path) -> None:
    """Text export of M: one row per metastable state, columns = observed states."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# m={model.m} n={model.n}\n")
        fh.write("# columns follow model.states: "
                 + " ".join(str(int(s)) for s in model.states) + "\n")
        for row in model.M:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
