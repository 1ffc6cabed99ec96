"""Sonification parameters derived from the estimated models.

Static: per metastable state, the lower/upper bound and area of the
histogram of scaled free energies of its hard-assigned observed states
(12 parameters for 4 states). Dynamic: per trajectory frame, 4 membership
probabilities, the Shannon entropy of the assignment, the scaled free
energy and 5 fast-mode projections (11 parameters).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from mdsonify.hmm import HiddenModel
from mdsonify.msm import Mode, TransitionModel, select_modes
from mdsonify.trajio import ObservedChain

N_FAST_MODES = 5


class DegenerateError(ValueError):
    pass


@dataclass(frozen=True)
class ScaledFreeEnergy:
    """Min-max scaled free energy per observed state; all-zero if degenerate."""

    values: np.ndarray  # in [0, 1]
    degenerate: bool = False


def free_energy(mu: np.ndarray) -> ScaledFreeEnergy:
    """F(a) = -ln(mu_a) in kT units, min-max scaled onto [0, 1].

    A constant distribution yields the degenerate flag with all zeros.
    """
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 0.0):
        raise ValueError("mu entries must be > 0 (exclude dead states upstream)")
    raw = -np.log(mu)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        warnings.warn("constant stationary distribution; free energy degenerate")
        return ScaledFreeEnergy(values=np.zeros_like(raw), degenerate=True)
    return ScaledFreeEnergy(values=(raw - lo) / (hi - lo))


@dataclass(frozen=True)
class StaticParams:
    """Free-energy well summary per metastable state."""

    lb: np.ndarray  # (m,) scaled free energy lower bounds
    ub: np.ndarray  # (m,) upper bounds
    area: np.ndarray  # (m,) member counts (histogram mass)
    bins: int
    assignment: np.ndarray  # (n,) observed -> metastable hard map
    histograms: np.ndarray = field(default=None)  # (m, bins)

    def __post_init__(self):
        if np.any(self.lb > self.ub):
            raise ValueError("lb must be <= ub for every metastable state")

    @property
    def m(self) -> int:
        return self.lb.size


def static_params(F: ScaledFreeEnergy, M: np.ndarray, bins: int = 32) -> StaticParams:
    """Hard-assign observed states by maximal membership and histogram the
    assigned free energies per metastable state."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    values = F.values
    m, n = M.shape
    if values.shape != (n,):
        raise ValueError("F and M must cover the same observed states")
    assignment = np.argmax(M, axis=0)  # argmax ties resolve to the lowest index
    lb = np.empty(m)
    ub = np.empty(m)
    area = np.empty(m)
    hists = np.empty((m, bins))
    edges = np.linspace(0.0, 1.0, bins + 1)
    for A in range(m):
        member_F = values[assignment == A]
        if member_F.size == 0:
            raise ValueError(f"metastable state {A} has no assigned observed states")
        lb[A] = member_F.min()
        ub[A] = member_F.max()
        area[A] = member_F.size
        hists[A], _ = np.histogram(member_F, bins=edges)
    return StaticParams(lb=lb, ub=ub, area=area, bins=bins,
                        assignment=assignment, histograms=hists)


def entropy(memberships) -> float:
    """Shannon entropy of a membership distribution, with 0 ln 0 := 0."""
    p = np.asarray(memberships, dtype=float)
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def scale_projections(modes) -> np.ndarray:
    """Scale each fast-mode eigenvector by its max-abs entry into [-1, 1].

    Accepts Mode objects or plain vectors; returns an (n_modes, n) array.
    """
    vectors = [m.vector if isinstance(m, Mode) else np.asarray(m, dtype=float)
               for m in modes]
    out = []
    for i, v in enumerate(vectors):
        peak = np.max(np.abs(v))
        if peak == 0.0 or np.ptp(v) == 0.0:
            raise DegenerateError(f"mode {i} is constant; cannot scale")
        out.append(v / peak)
    return np.array(out)


@dataclass(frozen=True)
class DynamicFrame:
    """Per-frame sonification vector: 4 + 1 + 1 + 5 = 11 parameters."""

    memberships: np.ndarray  # (m,) sums to 1
    entropy: float  # in [0, ln m]
    free_energy: float  # in [0, 1]
    projections: np.ndarray  # (5,) each in [-1, 1]
    t_ps: float

    def __post_init__(self):
        p = np.asarray(self.memberships, dtype=float)
        if abs(p.sum() - 1.0) > 1e-10:
            raise ValueError("memberships must sum to 1 within 1e-10")
        if not (-1e-12 <= self.entropy <= np.log(p.size) + 1e-12):
            raise ValueError("entropy outside [0, ln m]")
        if not (0.0 <= self.free_energy <= 1.0):
            raise ValueError("free_energy outside [0, 1]")
        proj = np.asarray(self.projections, dtype=float)
        if np.any(np.abs(proj) > 1.0 + 1e-12):
            raise ValueError("projections outside [-1, 1]")
        object.__setattr__(self, "memberships", p)
        object.__setattr__(self, "projections", proj)


def frame_params(chain: ObservedChain, t: int, M: np.ndarray,
                 F: ScaledFreeEnergy, projections: np.ndarray,
                 state_map: np.ndarray | None = None) -> DynamicFrame:
    """Assemble the DynamicFrame for frame ``t`` by table lookup."""
    if not 0 <= t < len(chain):
        raise IndexError(f"frame {t} outside chain of length {len(chain)}")
    a = int(chain.states[t])
    if state_map is not None:
        if a >= state_map.size or state_map[a] < 0:
            raise ValueError(f"observed state {a} unseen by the model")
        a = int(state_map[a])
    elif a >= M.shape[1]:
        raise ValueError(f"observed state {a} unseen by the model")
    col = M[:, a]
    return DynamicFrame(memberships=col, entropy=entropy(col),
                        free_energy=float(F.values[a]),
                        projections=projections[:, a],
                        t_ps=t * chain.dt)


@dataclass(frozen=True)
class ParameterSet:
    """Everything the render/stream stages need for one example chain."""

    static: StaticParams
    frames: tuple[DynamicFrame, ...]


def extract_params(chain: ObservedChain, msm: TransitionModel, hmm: HiddenModel,
                   resolution_ps: float, bins: int = 32) -> ParameterSet:
    """Full parameter pipeline: free energies, static well summaries and one
    DynamicFrame per chain frame, using 5 fast relaxation modes."""
    _, fast = select_modes(msm, resolution_ps, n_slow=hmm.m - 1,
                           n_fast=N_FAST_MODES)
    F = free_energy(msm.mu)
    projections = scale_projections(fast)
    static = static_params(F, hmm.M, bins=bins)
    state_map = msm.state_map()
    frames = tuple(
        frame_params(chain, t, hmm.M, F, projections, state_map=state_map)
        for t in range(len(chain))
    )
    return ParameterSet(static=static, frames=frames)


def export_static_csv(static: StaticParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("state,lb,ub,area\n")
        for A in range(static.m):
            fh.write(f"{A},{float(static.lb[A])!r},{float(static.ub[A])!r},{float(static.area[A])!r}\n")


def export_frames_csv(frames, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t_ps,m1,m2,m3,m4,entropy,free_energy,p5,p6,p7,p8,p9\n")
        for f in frames:
            vals = [f.t_ps, *f.memberships, f.entropy, f.free_energy, *f.projections]
            fh.write(",".join(repr(float(v)) for v in vals) + "\n")
