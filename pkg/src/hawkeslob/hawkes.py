"""Hawkes random measures on [0, T] x U, simulated by thinning.

The mark space U is a finite label set, optionally crossed with a bounded
distance interval.  The intensity of the point measure is an exogenous
density plus a kernel-weighted sum over its own past points; simulation
accepts candidates of a dominating Poisson sheet below the running
intensity, with the dominating rate rebuilt from user-declared kernel
envelopes at every candidate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .families import ExponentialProfile, TimeProfile, ZeroProfile
from .rng import as_rng


class MajorantViolationError(RuntimeError):
    """The realized intensity exceeded the declared dominating rate.

    This signals an invalid envelope declaration, not a sampling fluke, so
    the run is aborted rather than patched up.
    """


class UnsupportedKernelError(ValueError):
    """A specialized simulator was asked for a kernel shape it cannot handle."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MarkSpace:
    """Finite event labels, optionally with a truncated distance coordinate.

    The base measure puts ``weights[i]`` on label i and Lebesgue measure on
    the distance interval [-half_width, half_width] when present.
    """

    labels: tuple[str, ...]
    weights: tuple[float, ...] = ()
    spatial_half_width: Optional[float] = None

    def __post_init__(self):
        if not self.labels:
            raise ValueError("mark space needs at least one label")
        if not self.weights:
            object.__setattr__(self, "weights", tuple(1.0 for _ in self.labels))
        if len(self.weights) != len(self.labels):
            raise ValueError("one base-measure weight per label")
        if any(w <= 0 for w in self.weights):
            raise ValueError("base-measure weights must be positive")
        if self.spatial_half_width is not None and self.spatial_half_width <= 0:
            raise ValueError("spatial half-width must be positive")

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    @property
    def spatial(self) -> bool:
        return self.spatial_half_width is not None

    def total_mass(self) -> float:
        m = sum(self.weights)
        if self.spatial:
            m *= 2.0 * self.spatial_half_width
        return m

    def label_index(self, label: str) -> int:
        return self.labels.index(label)


class Exogenous:
    """Exogenous intensity density mu(t, u) with a declared uniform sup."""

    def __init__(self, fn: Callable, sup: float):
        if sup < 0:
            raise ValueError("declared sup must be >= 0")
        self.fn = fn
        self.sup = float(sup)

    def __call__(self, t: float, label: int, x: Optional[float]) -> float:
        return self.fn(t, label, x)

    @classmethod
    def constant(cls, rate) -> "Exogenous":
        """Constant rate, either a scalar or one value per label."""
        if np.isscalar(rate):
            r = float(rate)
            return cls(lambda t, i, x: r, r)
        rates = np.asarray(rate, dtype=float)
        return cls(lambda t, i, x: float(rates[i]), float(rates.max(initial=0.0)))


class HawkesKernel:
    """Excitation kernel phi(dt, u, v) of a past event at mark v on mark u."""

    def eval_one(self, dt: float, u, v) -> float:
        raise NotImplementedError

    def eval_events(self, dts: np.ndarray, v_labels: np.ndarray, v_xs, u) -> np.ndarray:
        """Vectorized over past events for a fixed target mark u."""
        raise NotImplementedError

    def envelope(self, dt):
        """Non-increasing pointwise majorant over all mark pairs."""
        raise NotImplementedError

    def spatial_mass_bound(self, space: MarkSpace) -> float:
        """Bound on sup_v int_U phi(t, u, v) m(du), uniform in the lag."""
        raise NotImplementedError

    def truncation_lag(self, eps: float) -> float:
        raise NotImplementedError


class MatrixKernel(HawkesKernel):
    """Per-label-pair time profiles: phi(dt, u, v) = profiles[u][v](dt)."""

    def __init__(self, profiles: Sequence[Sequence[Optional[TimeProfile]]]):
        self.profiles = [
            [p if p is not None else ZeroProfile() for p in row] for row in profiles
        ]
        d = len(self.profiles)
        if any(len(row) != d for row in self.profiles):
            raise ValueError("kernel profile matrix must be square")
        self.d = d

    def eval_one(self, dt, u, v):
        return float(self.profiles[u[0]][v[0]].value(dt))

    def eval_events(self, dts, v_labels, v_xs, u):
        out = np.zeros_like(dts)
        row = self.profiles[u[0]]
        for j in range(self.d):
            sel = v_labels == j
            if np.any(sel):
                out[sel] = row[j].value(dts[sel])
        return out

    def envelope(self, dt):
        dt = np.asarray(dt, dtype=float)
        env = np.zeros_like(dt)
        for row in self.profiles:
            for p in row:
                env = np.maximum(env, p.envelope(dt))
        return env

    def spatial_mass_bound(self, space):
        best = 0.0
        for j in range(self.d):
            col = sum(
                space.weights[i] * self.profiles[i][j].sup() for i in range(self.d)
            )
            best = max(best, col)
        return best

    def truncation_lag(self, eps):
        lag = 0.0
        for row in self.profiles:
            for p in row:
                lag = max(lag, p.envelope_inverse(eps))
        return lag


class SeparableMarkKernel(HawkesKernel):
    """phi(dt, u, v) = amp[u_l, v_l] * g(u_x) * w(v_x) * h(dt) on spatial marks."""

    def __init__(self, time: TimeProfile, amp, out_fn=None, in_fn=None,
                 out_sup: float = 1.0, in_sup: float = 1.0, out_mass: float = None):
        self.time = time
        self.amp = np.asarray(amp, dtype=float)
        self.out_fn = out_fn or (lambda x: 1.0)
        self.in_fn = in_fn or (lambda x: 1.0)
        self.out_sup = float(out_sup)
        self.in_sup = float(in_sup)
        self.out_mass = out_mass

    def eval_one(self, dt, u, v):
        a = self.amp[u[0], v[0]]
        return float(a * self.out_fn(u[1]) * self.in_fn(v[1]) * self.time.value(dt))

    def eval_events(self, dts, v_labels, v_xs, u):
        amps = self.amp[u[0], v_labels]
        ins = np.asarray([self.in_fn(x) for x in v_xs])
        return amps * self.out_fn(u[1]) * ins * self.time.value(dts)

    def envelope(self, dt):
        return self.amp.max() * self.out_sup * self.in_sup * self.time.envelope(dt)

    def spatial_mass_bound(self, space):
        if self.out_mass is None:
            raise ValueError("separable mark kernel needs a declared out mass")
        col = np.asarray(space.weights) @ self.amp
        return float(col.max()) * self.out_mass * self.in_sup * self.time.sup()

    def truncation_lag(self, eps):
        scale = max(self.amp.max() * self.out_sup * self.in_sup, 1e-300)
        return self.time.envelope_inverse(eps / scale)


@dataclass
class HawkesSpec:
    """A Hawkes random measure: mark space, exogenous density and kernel.

    ``c0`` is the declared constant bounding the exogenous mass plus the
    kernel spatial mass, checked at construction.
    """

    mark_space: MarkSpace
    exogenous: Exogenous
    kernel: HawkesKernel
    c0: Optional[float] = None

    def __post_init__(self):
        exo_mass = self.exogenous.sup * self.mark_space.total_mass()
        kern_mass = self.kernel.spatial_mass_bound(self.mark_space)
        implied = exo_mass + kern_mass
        if self.c0 is None:
            self.c0 = implied
        elif implied > self.c0 * (1.0 + 1e-9):
            raise ValueError(
                f"declared intensity bound {self.c0} is below the implied bound {implied}"
            )


@dataclass
class EventStream:
    """Time-ordered accepted events with label, distance and size marks."""

    times: np.ndarray
    labels: np.ndarray
    xs: np.ndarray
    zs: np.ndarray
    horizon: float
    label_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.xs = np.asarray(self.xs, dtype=float)
        self.zs = np.asarray(self.zs, dtype=float)
        if self.times.size and np.any(np.diff(self.times) <= 0):
            raise ValueError("event times must be strictly increasing")
        if self.times.size and (self.times[0] < 0 or self.times[-1] > self.horizon):
            raise ValueError("event times must lie in [0, horizon]")

    def __len__(self) -> int:
        return int(self.times.size)

    @classmethod
    def empty(cls, horizon: float, label_names=()) -> "EventStream":
        return cls(
            np.empty(0), np.empty(0, dtype=np.int64), np.empty(0), np.empty(0),
            horizon, tuple(label_names),
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "label", "x", "z"])
            for t, lab, x, z in zip(self.times, self.labels, self.xs, self.zs):
                name = self.label_names[lab] if self.label_names else str(int(lab))
                writer.writerow([repr(float(t)), name, repr(float(x)), repr(float(z))])

    @classmethod
    def from_csv(cls, path, horizon: float, label_names: Sequence[str]) -> "EventStream":
        names = tuple(label_names)
        times, labels, xs, zs = [], [], [], []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                times.append(float(row["t"]))
                labels.append(names.index(row["label"]))
                xs.append(float(row["x"]))
                zs.append(float(row["z"]))
        return cls(np.array(times), np.array(labels), np.array(xs), np.array(zs),
                   horizon, names)


# ---------------------------------------------------------------------------
# intensity evaluation
# ---------------------------------------------------------------------------


def _norm_mark(spec: HawkesSpec, u):
    if isinstance(u, tuple):
        label, x = u
    else:
        label, x = u, None
    if isinstance(label, str):
        label = spec.mark_space.label_index(label)
    if spec.mark_space.spatial and x is None:
        raise ValueError("this mark space carries a distance coordinate")
    return (int(label), x)


def intensity_at(spec: HawkesSpec, history: EventStream, t: float, u) -> float:
    """Conditional intensity at time t and mark u given the strict past."""
    if history.times.size and history.times[-1] >= t:
        raise ValueError("history must contain only events strictly before t")
    u = _norm_mark(spec, u)
    lam = spec.exogenous(t, u[0], u[1])
    if history.times.size:
        dts = t - history.times
        lam += float(np.sum(spec.kernel.eval_events(dts, history.labels, history.xs, u)))
    return lam


# ---------------------------------------------------------------------------
# thinning simulation
# ---------------------------------------------------------------------------


class _MatrixKernelState:
    """O(1) running excitation per label pair for stateful profile families."""

    def __init__(self, kernel: MatrixKernel):
        self.states = [[p.new_state() for p in row] for row in kernel.profiles]
        self.d = kernel.d

    @staticmethod
    def supports(kernel: HawkesKernel) -> bool:
        # exact class only: subclasses may override eval or envelope, and
        # those declarations must keep flowing through the generic path
        return type(kernel) is MatrixKernel and all(
            p.has_state for row in kernel.profiles for p in row
        )

    def advance(self, dt: float) -> None:
        for row in self.states:
            for s in row:
                s.advance(dt)

    def add(self, label: int) -> None:
        for row in self.states:
            row[label].add(1.0)

    def bound(self) -> float:
        return max(sum(s.bound() for s in row) for row in self.states)

    def value(self, label: int) -> float:
        return sum(s.value() for s in self.states[label])


def simulate_thinning(
    spec: HawkesSpec,
    horizon: float,
    rng_seed,
    eps_trunc: Optional[float] = None,
    max_events: int = 10_000_000,
) -> EventStream:
    """Simulate the measure on [0, horizon] by Ogata-style thinning.

    Candidates arrive at rate ``majorant * m(U)`` where the majorant is the
    declared exogenous sup plus the summed kernel envelopes, rebuilt at the
    left endpoint of every segment; each candidate carries a uniform height
    and survives when the height falls below the realized intensity.

    Label-pair kernels from the stateful profile families use running
    excitation sums; other kernels scan the event history, dropping
    contributions older than the lag where the envelope falls below
    ``eps_trunc`` (default 1e-12 * c0).
    """
    rng = as_rng(rng_seed, "hawkes")
    space = spec.mark_space
    if eps_trunc is None:
        eps_trunc = 1e-12 * max(spec.c0, 1.0)
    fast = _MatrixKernelState(spec.kernel) if _MatrixKernelState.supports(spec.kernel) else None
    t_mem = spec.kernel.truncation_lag(eps_trunc) if fast is None else math.inf

    weights = np.asarray(space.weights, dtype=float)
    label_cdf = (np.cumsum(weights) / weights.sum()).tolist()
    base_mass = space.total_mass()
    exo_sup = spec.exogenous.sup
    half_width = space.spatial_half_width

    times: list[float] = []
    labels: list[int] = []
    xs: list[float] = []

    t = 0.0
    start = 0  # first event still inside the truncation window
    while True:
        if len(times) >= max_events:
            raise RuntimeError("event budget exceeded; check kernel stability")
        if fast is not None:
            majorant = exo_sup + fast.bound()
        elif start < len(times):
            env = spec.kernel.envelope(t - np.asarray(times[start:]))
            majorant = exo_sup + float(np.sum(env))
        else:
            majorant = exo_sup
        if majorant <= 0.0:
            break
        dt = rng.exponential(1.0 / (majorant * base_mass))
        if t + dt > horizon:
            break
        t = t + dt
        if fast is not None:
            fast.advance(dt)
        else:
            while start < len(times) and t - times[start] > t_mem:
                start += 1
        u01 = rng.random()
        label = 0
        while label_cdf[label] < u01 and label < space.n_labels - 1:
            label += 1
        x = None
        if half_width is not None:
            x = float(rng.uniform(-half_width, half_width))
        z = rng.random() * majorant
        lam = spec.exogenous(t, label, x)
        if fast is not None:
            lam += fast.value(label)
        elif start < len(times):
            dts = t - np.asarray(times[start:])
            lam += float(np.sum(spec.kernel.eval_events(
                dts, np.asarray(labels[start:]), xs[start:], (label, x))))
        if lam > majorant * (1.0 + 1e-9):
            raise MajorantViolationError(
                f"intensity {lam} exceeded majorant {majorant} at t={t}; "
                "the declared kernel envelope is invalid"
            )
        if z <= lam:
            times.append(t)
            labels.append(label)
            xs.append(x if x is not None else math.nan)
            if fast is not None:
                fast.add(label)

    return EventStream(
        np.asarray(times), np.asarray(labels, dtype=np.int64), np.asarray(xs),
        np.full(len(times), math.nan), horizon, space.labels,
    )


# ---------------------------------------------------------------------------
# compensated integrals
# ---------------------------------------------------------------------------


def compensated_integral(
    spec: HawkesSpec,
    stream: EventStream,
    f: Callable,
    n_sub: int = 8,
    n_spatial: int = 33,
) -> float:
    """int f dN minus int f(s,u) lambda(s,u) ds m(du) over [0, horizon].

    ``f(t, label_index, x)`` must be bounded.  The compensator integral uses
    a composite trapezoid with ``n_sub`` nodes per inter-event segment (the
    intensity is smooth between events) and, for spatial mark spaces, a
    trapezoid with ``n_spatial`` nodes across the distance interval.
    """
    space = spec.mark_space
    horizon = stream.horizon

    jump_term = 0.0
    for t, lab, x in zip(stream.times, stream.labels, stream.xs):
        jump_term += f(t, int(lab), None if math.isnan(x) else x)

    if space.spatial:
        L = space.spatial_half_width
        xg = np.linspace(-L, L, n_spatial)
        wx = np.full(n_spatial, 2 * L / (n_spatial - 1))
        wx[0] *= 0.5
        wx[-1] *= 0.5
    else:
        xg, wx = None, None

    def mass_at(s: float, k_hist: int) -> float:
        hist = EventStream(
            stream.times[:k_hist], stream.labels[:k_hist], stream.xs[:k_hist],
            stream.zs[:k_hist], horizon, stream.label_names,
        )
        total = 0.0
        for i, w in enumerate(space.weights):
            if space.spatial:
                vals = [
                    f(s, i, x) * intensity_at(spec, hist, s, (i, x)) for x in xg
                ]
                total += w * float(np.dot(wx, vals))
            else:
                total += w * f(s, i, None) * intensity_at(spec, hist, s, (i, None))
        return total

    knots = np.concatenate([[0.0], stream.times, [horizon]])
    comp = 0.0
    for k in range(len(knots) - 1):
        a, b = knots[k], knots[k + 1]
        if b <= a:
            continue
        ss = np.linspace(a, b, n_sub + 1)
        # keep evaluation inside the open segment so the history is the strict past
        ss[0] = a + 1e-12 * max(1.0, b - a)
        vals = np.array([mass_at(s, k) for s in ss])
        comp += float(np.trapezoid(vals, ss))
    return jump_term - comp


# ---------------------------------------------------------------------------
# classical special cases
# ---------------------------------------------------------------------------


def make_multivariate(d: int, mu, phi) -> HawkesSpec:
    """Multivariate Hawkes process on labels {0..d-1} with unit base weights.

    ``mu`` is a scalar or length-d rate vector; ``phi`` a d x d matrix of
    time profiles (None entries vanish).
    """
    if d < 1:
        raise ValueError("need at least one component")
    mu_arr = np.broadcast_to(np.asarray(mu, dtype=float), (d,)).copy()
    if np.any(mu_arr < 0):
        raise ValueError("exogenous rates must be >= 0")
    phi = list(phi)
    if len(phi) != d or any(len(row) != d for row in phi):
        raise ValueError(f"kernel matrix must be {d} x {d}")
    space = MarkSpace(labels=tuple(str(i) for i in range(d)))
    return HawkesSpec(space, Exogenous.constant(mu_arr), MatrixKernel(phi))


class ExponentialMarkovSimulator:
    """O(1)-per-event simulator for separable exponential kernels.

    The running excitation of each component decays at the shared rate
    between events and jumps by ``amp[i, j] * beta`` when component j fires,
    so the pair (intensity, counts) is Markov and no history scan is needed.
    """

    def __init__(self, spec: HawkesSpec):
        if spec.mark_space.spatial:
            raise UnsupportedKernelError(
                "the Markov fast path supports label-only mark spaces"
            )
        kernel = spec.kernel
        if not isinstance(kernel, MatrixKernel):
            raise UnsupportedKernelError("expected a label-pair kernel matrix")
        beta = None
        d = spec.mark_space.n_labels
        amp = np.zeros((d, d))
        for i in range(d):
            for j in range(d):
                p = kernel.profiles[i][j]
                if isinstance(p, ZeroProfile):
                    continue
                if not isinstance(p, ExponentialProfile):
                    raise UnsupportedKernelError("all kernel entries must be exponential")
                if beta is None:
                    beta = p.kappa
                elif not math.isclose(beta, p.kappa):
                    raise UnsupportedKernelError("kernel entries must share a decay rate")
                # profile value at lag 0 is the jump size amp * beta
                amp[i, j] = p.c / p.kappa
        self.spec = spec
        self.beta = beta if beta is not None else 1.0
        self.amp = amp
        self.d = d

    def simulate(self, horizon: float, rng_seed) -> EventStream:
        rng = as_rng(rng_seed, "hawkes")
        space = self.spec.mark_space
        weights = np.asarray(space.weights, dtype=float)
        exo = self.spec.exogenous
        g = np.zeros(self.d)  # excitation per component, jump-normalized

        times: list[float] = []
        labels: list[int] = []
        t = 0.0
        while True:
            lam_sup = np.array([exo.sup + self.beta * g[i] for i in range(self.d)])
            majorant = float(lam_sup.max())
            if majorant <= 0:
                break
            rate = majorant * float(weights.sum())
            dt = rng.exponential(1.0 / rate)
            t_new = t + dt
            if t_new > horizon:
                break
            g *= math.exp(-self.beta * dt)
            t = t_new
            label_cdf = np.cumsum(weights) / weights.sum()
            label = int(np.searchsorted(label_cdf, rng.random(), side="right"))
            label = min(label, self.d - 1)
            z = rng.random() * majorant
            lam = exo(t, label, None) + self.beta * g[label]
            if lam > majorant * (1.0 + 1e-9):
                raise MajorantViolationError("exponential state exceeded its majorant")
            if z <= lam:
                times.append(t)
                labels.append(label)
                g += self.amp[:, label]

        n = len(times)
        return EventStream(
            np.asarray(times), np.asarray(labels, dtype=np.int64),
            np.full(n, math.nan), np.full(n, math.nan), horizon, space.labels,
        )


def make_exponential_markov(spec: HawkesSpec) -> ExponentialMarkovSimulator:
    """Specialized simulator state for kernels amp(u,v) * beta * exp(-beta t)."""
    return ExponentialMarkovSimulator(spec)
