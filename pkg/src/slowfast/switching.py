"""Two-time-scale Markov switching.

Generators are piecewise constant in time.  A :class:`TwoScaleGenerator`
holds a fast part (block diagonal over a :class:`ClassPartition`) and a slow
part; the chain that modulates the slow-fast system at scale ``eps`` has rate
matrix ``fast / eps + slow``.

States and classes are 0-based throughout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .errors import InvalidGenerator, NotWeaklyIrreducible, ScheduleGapError

ROW_SUM_ATOL = 1e-12
NULL_SPACE_TOL = 1e-10


def validate_generator(Q, atol: float = ROW_SUM_ATOL) -> np.ndarray:
    """Return ``Q`` as a float array after checking the generator axioms."""
    Q = np.array(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] == 0:
        raise InvalidGenerator(f"generator must be a non-empty square matrix, got shape {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise InvalidGenerator("generator has non-finite entries")
    off = Q - np.diag(np.diag(Q))
    if np.any(off < 0):
        raise InvalidGenerator("generator has negative off-diagonal entries")
    scale = max(1.0, float(np.abs(Q).max()))
    if np.any(np.abs(Q.sum(axis=1)) > atol * scale):
        raise InvalidGenerator(f"generator rows do not sum to zero: {Q.sum(axis=1)}")
    return Q


def segment_index(breakpoints: np.ndarray, t: float) -> int:
    """Index of the segment containing ``t`` (right-limit at breakpoints)."""
    bp = breakpoints
    if not (bp[0] <= t <= bp[-1]):
        raise ScheduleGapError(f"t={t} outside schedule coverage [{bp[0]}, {bp[-1]}]")
    i = int(np.searchsorted(bp, t, side="right")) - 1
    return min(i, bp.size - 2)


@dataclass(frozen=True, eq=False)
class GeneratorSchedule:
    """Piecewise-constant generator.

    Segment ``i`` covers ``[breakpoints[i], breakpoints[i+1])``; the last
    segment also contains its right end.  At a breakpoint the right-hand
    segment applies.
    """

    breakpoints: np.ndarray
    matrices: np.ndarray

    def __post_init__(self):
        bp = np.array(self.breakpoints, dtype=float).ravel()
        mats = np.array(self.matrices, dtype=float)
        if mats.ndim == 2:
            mats = mats[None]
        if bp.size != mats.shape[0] + 1:
            raise InvalidGenerator(
                f"{mats.shape[0]} segment matrices need {mats.shape[0] + 1} breakpoints, got {bp.size}"
            )
        if np.any(np.diff(bp) < 0) or np.isnan(bp).any():
            raise InvalidGenerator("breakpoints must be nondecreasing")
        for Q in mats:
            validate_generator(Q)
        bp.setflags(write=False)
        mats.setflags(write=False)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "matrices", mats)

    @classmethod
    def constant(cls, Q, t0: float = -np.inf, T: float = np.inf) -> "GeneratorSchedule":
        return cls(np.array([t0, T]), np.asarray(Q, dtype=float)[None])

    @property
    def n_states(self) -> int:
        return self.matrices.shape[1]

    @property
    def n_segments(self) -> int:
        return self.matrices.shape[0]

    def segment_index(self, t: float) -> int:
        return segment_index(self.breakpoints, t)

    def at(self, t: float) -> np.ndarray:
        return self.matrices[self.segment_index(t)]

    def refine(self, breakpoints: np.ndarray) -> "GeneratorSchedule":
        """Re-express on a finer set of breakpoints inside this coverage."""
        bp = np.asarray(breakpoints, dtype=float)
        mats = np.stack([self.at(t) for t in bp[:-1]])
        return GeneratorSchedule(bp, mats)

    def scaled(self, factor: float) -> "GeneratorSchedule":
        return GeneratorSchedule(self.breakpoints, self.matrices * factor)


def merge_breakpoints(*schedules: GeneratorSchedule) -> np.ndarray:
    """Union of breakpoints restricted to the common coverage."""
    lo = max(s.breakpoints[0] for s in schedules)
    hi = min(s.breakpoints[-1] for s in schedules)
    if lo > hi:
        raise ScheduleGapError("schedules do not overlap")
    pts = np.unique(np.concatenate([s.breakpoints for s in schedules]))
    inner = pts[(pts > lo) & (pts < hi)]
    return np.concatenate([[lo], inner, [hi]])


@dataclass(frozen=True)
class ClassPartition:
    """Contiguous blocks of states; ``sizes[k]`` states belong to class ``k``."""

    sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes or min(sizes) < 1:
            raise ValueError("class sizes must be positive")
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def single(cls, n: int) -> "ClassPartition":
        return cls((n,))

    @property
    def n_states(self) -> int:
        return sum(self.sizes)

    @property
    def n_classes(self) -> int:
        return len(self.sizes)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    def slices(self) -> list:
        off = self.offsets
        return [slice(off[k], off[k + 1]) for k in range(self.n_classes)]

    @property
    def class_of(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_classes), self.sizes)

    def indicator(self) -> np.ndarray:
        """The ``n x l`` matrix diag(1_{n_1}, ..., 1_{n_l})."""
        E = np.zeros((self.n_states, self.n_classes))
        E[np.arange(self.n_states), self.class_of] = 1.0
        return E


@dataclass(frozen=True, eq=False)
class TwoScaleGenerator:
    fast: GeneratorSchedule
    slow: GeneratorSchedule = None
    partition: ClassPartition = None

    def __post_init__(self):
        fast = self.fast
        if not isinstance(fast, GeneratorSchedule):
            fast = GeneratorSchedule.constant(fast)
        n = fast.n_states
        partition = self.partition or ClassPartition.single(n)
        if partition.n_states != n:
            raise InvalidGenerator(f"partition covers {partition.n_states} states, generator has {n}")
        slow = self.slow
        if slow is None:
            slow = GeneratorSchedule(fast.breakpoints, np.zeros_like(fast.matrices))
        elif not isinstance(slow, GeneratorSchedule):
            slow = GeneratorSchedule.constant(slow)
        if slow.n_states != n:
            raise InvalidGenerator("fast and slow generators differ in size")
        mask = np.ones((n, n), dtype=bool)
        for sl in partition.slices():
            mask[sl, sl] = False
        if np.any(fast.matrices[:, mask] != 0):
            raise InvalidGenerator("fast generator has entries outside the class blocks")
        if partition.n_classes == 1 and np.any(slow.matrices != 0):
            raise InvalidGenerator("single-class switching requires a zero slow generator")
        object.__setattr__(self, "fast", fast)
        object.__setattr__(self, "slow", slow)
        object.__setattr__(self, "partition", partition)
        # raises NotWeaklyIrreducible when a block is degenerate
        object.__setattr__(self, "_qsd", quasi_stationary_schedule(self))

    @property
    def n_states(self) -> int:
        return self.fast.n_states

    @property
    def qsd(self) -> "QuasiStationaryDistribution":
        return self._qsd

    def rates(self, eps: float) -> GeneratorSchedule:
        """Rate schedule ``fast / eps + slow`` on the merged breakpoints."""
        if not eps > 0:
            raise ValueError("eps must be positive")
        bp = merge_breakpoints(self.fast, self.slow)
        fast = self.fast.refine(bp).matrices
        slow = self.slow.refine(bp).matrices
        return GeneratorSchedule(bp, fast / eps + slow)


@dataclass(frozen=True, eq=False)
class QuasiStationaryDistribution:
    """Per-segment, per-class stationary vectors of the fast generator blocks."""

    breakpoints: np.ndarray
    vectors: tuple  # vectors[segment][class] -> array of length n_class
    partition: ClassPartition

    def segment_index(self, t: float) -> int:
        return segment_index(self.breakpoints, t)

    def full(self, segment: int = 0) -> np.ndarray:
        """Length-n vector with each class's distribution in its own slots."""
        return np.concatenate(self.vectors[segment])

    def weight_matrix(self, segment: int = 0) -> np.ndarray:
        """The ``l x n`` matrix diag(nu_1, ..., nu_l)."""
        W = np.zeros((self.partition.n_classes, self.partition.n_states))
        for k, sl in enumerate(self.partition.slices()):
            W[k, sl] = self.vectors[segment][k]
        return W

    def at(self, t: float) -> np.ndarray:
        return self.full(self.segment_index(t))


def check_weak_irreducibility(Q, tol: float = NULL_SPACE_TOL) -> np.ndarray:
    """Unique probability vector ``nu`` with ``nu Q = 0``.

    The null space of ``Q^T`` is sized from its singular values; anything
    other than a one-dimensional, sign-definite null space is rejected.
    """
    Q = validate_generator(Q)
    n = Q.shape[0]
    _, s, vt = np.linalg.svd(Q.T)
    scale = max(1.0, float(s[0]))
    null_dim = int(np.sum(s <= tol * scale))
    if null_dim != 1:
        raise NotWeaklyIrreducible(f"null space of Q^T has dimension {null_dim}")
    v = vt[-1]
    v = v / v.sum()
    if np.any(v < -tol):
        raise NotWeaklyIrreducible("null vector of Q^T changes sign")
    # polish with the normalised least-squares system
    A = np.vstack([Q.T, np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    nu, *_ = np.linalg.lstsq(A, b, rcond=None)
    nu = np.clip(nu, 0.0, None)
    return nu / nu.sum()


def quasi_stationary_schedule(gen: TwoScaleGenerator) -> QuasiStationaryDistribution:
    vectors = []
    for seg, Q in enumerate(gen.fast.matrices):
        per_class = []
        for k, sl in enumerate(gen.partition.slices()):
            try:
                nu = check_weak_irreducibility(Q[sl, sl])
            except NotWeaklyIrreducible as exc:
                raise NotWeaklyIrreducible(f"class {k}, segment {seg}: {exc}") from exc
            nu.setflags(write=False)
            per_class.append(nu)
        vectors.append(tuple(per_class))
    return QuasiStationaryDistribution(gen.fast.breakpoints, tuple(vectors), gen.partition)


def aggregated_generator(gen: TwoScaleGenerator, t: float) -> np.ndarray:
    """Generator of the limiting class-label chain at time ``t``."""
    qsd = gen.qsd
    W = qsd.weight_matrix(qsd.segment_index(t))
    Qbar = W @ gen.slow.at(t) @ gen.partition.indicator()
    # row sums vanish analytically; remove rounding residue
    Qbar[np.diag_indices_from(Qbar)] -= Qbar.sum(axis=1)
    return Qbar


def aggregated_schedule(gen: TwoScaleGenerator) -> GeneratorSchedule:
    bp = merge_breakpoints(gen.fast, gen.slow)
    mats = np.stack([aggregated_generator(gen, t) for t in bp[:-1]])
    return GeneratorSchedule(bp, mats)


@dataclass(frozen=True, eq=False)
class SwitchingPath:
    """Right-continuous piecewise-constant path on ``[t0, T]``.

    ``states[0]`` holds on ``[t0, jump_times[0])``, ``states[k]`` from
    ``jump_times[k-1]`` on.
    """

    t0: float
    T: float
    jump_times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        st = np.asarray(self.states, dtype=int)
        if st.size != jt.size + 1:
            raise ValueError("need one more state than jump times")
        if jt.size and (np.any(np.diff(jt) <= 0) or jt[0] <= self.t0 or jt[-1] > self.T):
            raise ValueError("jump times must be strictly increasing inside (t0, T]")
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "states", st)

    @property
    def n_jumps(self) -> int:
        return self.jump_times.size

    def state_at(self, t):
        idx = np.searchsorted(self.jump_times, t, side="right")
        return self.states[idx]

    def pieces(self, t0: float = None, T: float = None, extra_breaks=()):
        """(starts, ends, states) of the constant pieces clipped to [t0, T]."""
        t0 = self.t0 if t0 is None else t0
        T = self.T if T is None else T
        cuts = np.concatenate([self.jump_times, np.asarray(extra_breaks, dtype=float)])
        cuts = np.unique(cuts[(cuts > t0) & (cuts < T)])
        starts = np.concatenate([[t0], cuts])
        ends = np.concatenate([cuts, [T]])
        return starts, ends, self.state_at(starts)

    def occupation_times(self, n_states: int) -> np.ndarray:
        starts, ends, states = self.pieces()
        return np.bincount(states, weights=ends - starts, minlength=n_states)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "state"])
            w.writerow([repr(float(self.t0)), int(self.states[0])])
            for t, s in zip(self.jump_times, self.states[1:]):
                w.writerow([repr(float(t)), int(s)])
        return path

    @classmethod
    def from_csv(cls, path, T: float) -> "SwitchingPath":
        with Path(path).open() as fh:
            rows = list(csv.DictReader(fh))
        times = [float(r["time"]) for r in rows]
        states = [int(r["state"]) for r in rows]
        return cls(times[0], T, np.array(times[1:]), np.array(states))


def _jump_tables(schedule: GeneratorSchedule):
    mats = schedule.matrices
    n = schedule.n_states
    exit_rates = -np.einsum("sii->si", mats)
    exit_rates = np.clip(exit_rates, 0.0, None)
    off = mats.copy()
    off[:, np.arange(n), np.arange(n)] = 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(exit_rates[..., None] > 0, off / exit_rates[..., None], 0.0)
    cum = np.cumsum(probs, axis=-1)
    cum[..., -1] = np.where(exit_rates > 0, 1.0, cum[..., -1])
    return exit_rates, cum


def simulate_schedule_chains(
    schedule: GeneratorSchedule,
    t0: float,
    T: float,
    initial,
    rng: np.random.Generator,
) -> list:
    """Exact event-driven simulation of independent chains, one per entry of ``initial``.

    Holding times are exponential with the current exit rate; a clock that
    runs past a breakpoint is discarded and redrawn with the next segment's
    rate, which is exact by memorylessness.
    """
    initial = np.atleast_1d(np.asarray(initial, dtype=int))
    n = schedule.n_states
    if np.any((initial < 0) | (initial >= n)):
        raise ValueError(f"initial states must lie in [0, {n})")
    if not T > t0:
        raise ValueError("need T > t0")
    bp = schedule.breakpoints
    if t0 < bp[0] or T > bp[-1]:
        raise ScheduleGapError(f"[{t0}, {T}] not covered by schedule [{bp[0]}, {bp[-1]}]")
    exit_rates, cum = _jump_tables(schedule)
    seg_end = np.minimum(bp[1:], T)

    P = initial.size
    t = np.full(P, float(t0))
    s = initial.copy()
    seg = np.full(P, schedule.segment_index(t0))
    running = np.ones(P, dtype=bool)
    ev_path, ev_time, ev_state = [], [], []
    while running.any():
        a = np.flatnonzero(running)
        rate = exit_rates[seg[a], s[a]]
        e = rng.standard_exponential(a.size)
        with np.errstate(divide="ignore"):
            t_next = t[a] + np.where(rate > 0, e / np.where(rate > 0, rate, 1.0), np.inf)
        end = seg_end[seg[a]]
        jumps = t_next < end
        ja = a[jumps]
        if ja.size:
            u = rng.random(ja.size)
            rows = cum[seg[ja], s[ja]]
            new = np.minimum((rows <= u[:, None]).sum(axis=1), n - 1)
            t[ja] = t_next[jumps]
            s[ja] = new
            ev_path.append(ja)
            ev_time.append(t[ja].copy())
            ev_state.append(new)
        na = a[~jumps]
        if na.size:
            t[na] = end[~jumps]
            finished = t[na] >= T
            running[na[finished]] = False
            seg[na[~finished]] += 1

    if ev_path:
        ev_path = np.concatenate(ev_path)
        ev_time = np.concatenate(ev_time)
        ev_state = np.concatenate(ev_state)
    else:
        ev_path = np.zeros(0, dtype=int)
        ev_time = np.zeros(0)
        ev_state = np.zeros(0, dtype=int)
    order = np.argsort(ev_path, kind="stable")
    counts = np.bincount(ev_path, minlength=P)
    splits = np.cumsum(counts)[:-1]
    times = np.split(ev_time[order], splits)
    states = np.split(ev_state[order], splits)
    return [
        SwitchingPath(t0, T, times[p], np.concatenate([[initial[p]], states[p]]))
        for p in range(P)
    ]


def simulate_chains(gen: TwoScaleGenerator, eps: float, t0: float, T: float, initial, rng) -> list:
    return simulate_schedule_chains(gen.rates(eps), t0, T, initial, rng)


def simulate_chain(
    gen: TwoScaleGenerator,
    eps: float,
    t0: float,
    T: float,
    initial: int,
    seed: Union[int, np.random.Generator] = 0,
) -> SwitchingPath:
    """One exact sample path of the chain with rates ``fast / eps + slow``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return simulate_chains(gen, eps, t0, T, [initial], rng)[0]


def states_on_grid(paths: Sequence[SwitchingPath], times) -> np.ndarray:
    """Array ``(len(times), len(paths))`` of the state at each time."""
    times = np.asarray(times, dtype=float)
    out = np.empty((times.size, len(paths)), dtype=int)
    for p, path in enumerate(paths):
        out[:, p] = path.state_at(times)
    return out


def aggregate_path(path: SwitchingPath, partition: ClassPartition) -> SwitchingPath:
    labels = partition.class_of[path.states]
    keep = np.concatenate([[True], labels[1:] != labels[:-1]])
    return SwitchingPath(path.t0, path.T, path.jump_times[keep[1:]], labels[keep])


def occupation_deviation(
    path: SwitchingPath,
    nu: Union[QuasiStationaryDistribution, np.ndarray],
    state: int,
    beta: Union[float, Callable] = 1.0,
    t0: float = None,
    T: float = None,
    partition: ClassPartition = None,
) -> float:
    """Integral of ``(1{r=state} - nu_state(u) 1{class(r)=class(state)}) beta(u)``.

    With a single class the class indicator is identically one and this is
    the plain occupation deviation.  ``nu`` is either a quasi-stationary
    schedule or a fixed length-n vector.  Constant ``beta`` is integrated
    exactly; a callable ``beta`` uses 8-point Gauss-Legendre per piece.
    """
    t0 = path.t0 if t0 is None else t0
    T = path.T if T is None else T
    if isinstance(nu, QuasiStationaryDistribution):
        partition = partition or nu.partition
        bp = nu.breakpoints
        starts, ends, states = path.pieces(t0, T, extra_breaks=bp[np.isfinite(bp)])
        nu_state = np.array([nu.at(s)[state] for s in starts])
    else:
        nu = np.asarray(nu, dtype=float)
        starts, ends, states = path.pieces(t0, T)
        nu_state = np.full(starts.size, nu[state])
    if partition is None:
        partition = ClassPartition.single(int(max(states.max(), state)) + 1)
    class_of = partition.class_of
    integrand = (states == state).astype(float) - nu_state * (class_of[states] == class_of[state])
    if callable(beta):
        nodes, weights = np.polynomial.legendre.leggauss(8)
        half = 0.5 * (ends - starts)
        mid = 0.5 * (ends + starts)
        u = mid[:, None] + half[:, None] * nodes[None, :]
        vals = np.asarray(beta(u), dtype=float)
        piece_int = half * (vals * weights).sum(axis=1)
    else:
        piece_int = float(beta) * (ends - starts)
    return float(np.sum(integrand * piece_int))


def generator_from_dict(spec: dict) -> TwoScaleGenerator:
    """Build a generator from the plain-text configuration layout.

    Keys: ``class_sizes`` (optional), ``breakpoints`` (optional, one more
    than the number of segments), ``fast`` and optional ``slow``, each a
    matrix (list of rows) or a list of per-segment matrices.
    """
    known = {"class_sizes", "breakpoints", "fast", "slow"}
    unknown = set(spec) - known
    if unknown:
        raise InvalidGenerator(f"unknown switching keys: {sorted(unknown)}")
    fast = np.array(spec["fast"], dtype=float)
    if fast.ndim == 2:
        fast = fast[None]
    bp = spec.get("breakpoints")
    bp = np.array([-np.inf, np.inf]) if bp is None else np.array(bp, dtype=float)
    slow = spec.get("slow")
    if slow is not None:
        slow = np.array(slow, dtype=float)
        if slow.ndim == 2:
            slow = np.broadcast_to(slow, fast.shape)
        slow = GeneratorSchedule(bp, slow)
    sizes = spec.get("class_sizes")
    partition = ClassPartition(tuple(sizes)) if sizes else None
    return TwoScaleGenerator(GeneratorSchedule(bp, fast), slow, partition)


def generator_to_dict(gen: TwoScaleGenerator) -> dict:
    bp = merge_breakpoints(gen.fast, gen.slow)
    return {
        "class_sizes": list(gen.partition.sizes),
        "breakpoints": [float(b) for b in bp],
        "fast": gen.fast.refine(bp).matrices.tolist(),
        "slow": gen.slow.refine(bp).matrices.tolist(),
    }
