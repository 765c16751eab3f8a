"""Redundancy classification, replacement lines and the output error ledger.

A neuron can be removed by replacing its activation with a line ``a*x + b``
of its source and then folding the resulting weighted sum into its consumers.
This module decides which lines are safe:

* phase redundancy from bounds (the source never leaves one segment),
* cheap simulation filtering of candidates before formal verification,
* the minimal-error line for an unstable ReLU on ``[lb, ub]``,
* propagation of per-replacement local errors to certified output bounds,
* greedy relaxed removal under an output error budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .net import (ACTIVATION, InputError, Network, NeuronRef, PiecewiseLinearFn,
                  PreconditionError, replace_activation, saturate_ws_elimination)
from .prop import Box, BoundsMap
from .verify import (build_forward_query, build_result_preserving_query, distance_to_output,
                     goal_holds_batch)

ZERO, IDENTITY, LINE = "zero", "identity", "line"
CERT_SLACK = 1e-12


@dataclass(frozen=True)
class Replacement:
    """Replace activation ``neuron`` by a line with certified local error ``epsilon``."""

    neuron: NeuronRef
    mode: str
    a: float = 0.0
    b: float = 0.0
    epsilon: float = 0.0

    def __post_init__(self):
        if self.mode not in (ZERO, IDENTITY, LINE):
            raise InputError(f"unknown replacement mode {self.mode!r}")
        if not self.epsilon >= 0:
            raise InputError("epsilon must be non-negative")

    @classmethod
    def zero(cls, neuron: NeuronRef, epsilon: float = 0.0) -> "Replacement":
        return cls(neuron, ZERO, 0.0, 0.0, epsilon)

    @classmethod
    def identity(cls, neuron: NeuronRef, epsilon: float = 0.0) -> "Replacement":
        return cls(neuron, IDENTITY, 1.0, 0.0, epsilon)

    @classmethod
    def line(cls, neuron: NeuronRef, a: float, b: float, epsilon: float) -> "Replacement":
        return cls(neuron, LINE, float(a), float(b), epsilon)

    @property
    def coeffs(self) -> tuple[float, float]:
        return (self.a, self.b)

    def to_json(self) -> dict:
        return {"layer": self.neuron.layer, "index": self.neuron.index, "mode": self.mode,
                "a": self.a, "b": self.b, "epsilon": self.epsilon}


@dataclass
class ErrorLedger:
    """Per-neuron bounds on how far the modified network can fall below / rise above.

    For every neuron ``n``: ``N(x)_n - err_lo <= N'(x)_n <= N(x)_n + err_hi``.
    """

    err_lo: np.ndarray
    err_hi: np.ndarray
    offsets: np.ndarray

    def __getitem__(self, ref: NeuronRef) -> tuple[float, float]:
        i = int(self.offsets[ref.layer]) + ref.index
        return float(self.err_lo[i]), float(self.err_hi[i])

    @property
    def output_lo(self) -> np.ndarray:
        return self.err_lo[int(self.offsets[-2]):]

    @property
    def output_hi(self) -> np.ndarray:
        return self.err_hi[int(self.offsets[-2]):]

    @property
    def headline(self) -> float:
        """Largest one-sided output bound; this is what an error budget is compared to."""
        return float(max(self.output_lo.max(), self.output_hi.max()))

    def to_json(self) -> dict:
        return {"outputs": [{"err_lo": float(lo), "err_hi": float(hi)}
                            for lo, hi in zip(self.output_lo, self.output_hi)],
                "headline": self.headline}


@dataclass
class RedundancyVerdict:
    """Why a neuron was removed, with the evidence needed to re-check it."""

    neuron: NeuronRef
    kind: str  # "phase" | "forward" | "result_preserving" | "relaxed"
    name: str | None = None
    segment: int | None = None
    line: tuple[float, float] | None = None
    k: int | None = None
    margin: float | None = None
    epsilon: float | None = None
    evidence: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"neuron": self.name or str(self.neuron), "kind": self.kind}
        for key in ("segment", "k", "margin", "epsilon"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        if self.line is not None:
            out["line"] = list(self.line)
        out["evidence"] = self.evidence
        return out


@dataclass
class FilterResult:
    survivors: list
    dropped: dict  # candidate -> counterexample input(s)


# ---------------------------------------------------------------------------
# classification from bounds


def _source_bounds(network: Network, bounds: BoundsMap, v: NeuronRef) -> tuple[float, float]:
    n = network[v]
    if n.kind != ACTIVATION:
        raise PreconditionError(f"{v} is not an activation neuron")
    return bounds[n.source]


def classify_phase_by_bounds(network: Network, bounds: BoundsMap, v: NeuronRef) -> int | None:
    lb, ub = _source_bounds(network, bounds, v)
    return network[v].fn.segment_containing(lb, ub)


def segment_line(fn: PiecewiseLinearFn, segment: int) -> tuple[float, float]:
    return (float(fn.slopes[segment]), float(fn.intercepts[segment]))


def line_error(fn: PiecewiseLinearFn, lb: float, ub: float, a: float, b: float) -> float:
    """Exact max of ``|fn(x) - (a*x + b)|`` over ``[lb, ub]``."""
    pts = np.concatenate([[lb, ub], fn.finite_breakpoints[(fn.finite_breakpoints > lb)
                                                          & (fn.finite_breakpoints < ub)]])
    return float(np.max(np.abs(fn(pts) - (a * pts + b))))


def minimal_error_line(lb: float, ub: float) -> tuple[float, float, float]:
    """Line minimizing the max deviation from ReLU on ``[lb, ub]`` with ``lb < 0 < ub``.

    The chord from ``(lb, 0)`` to ``(ub, ub)`` shifted down by half its gap at 0.
    """
    if not (lb < 0 < ub):
        raise PreconditionError(f"need lb < 0 < ub, got [{lb}, {ub}]")
    a = ub / (ub - lb)
    e = -lb * ub / (2 * (ub - lb))
    return a, e, e


def best_line(fn: PiecewiseLinearFn, lb: float, ub: float) -> tuple[float, float, float]:
    """Chord of ``fn`` over ``[lb, ub]`` centred between its extreme deviations.

    For ReLU this coincides with :func:`minimal_error_line`.
    """
    if ub <= lb:
        y = float(fn(np.array(lb)))
        return 0.0, y, 0.0
    a = float((fn(np.array(ub)) - fn(np.array(lb))) / (ub - lb))
    pts = np.concatenate([[lb, ub], fn.finite_breakpoints[(fn.finite_breakpoints > lb)
                                                          & (fn.finite_breakpoints < ub)]])
    dev = fn(pts) - a * pts
    b = float((dev.max() + dev.min()) / 2)
    return a, b, float((dev.max() - dev.min()) / 2)


def certify(network: Network, bounds: BoundsMap, rep: Replacement) -> None:
    """Raise PreconditionError unless ``rep`` keeps its local error within epsilon."""
    lb, ub = _source_bounds(network, bounds, rep.neuron)
    fn = network[rep.neuron].fn
    if fn.is_relu and rep.mode == ZERO:
        if ub > rep.epsilon + CERT_SLACK:
            raise PreconditionError(f"{rep.neuron}: zero needs source ub {ub:g} <= eps {rep.epsilon:g}")
        return
    if fn.is_relu and rep.mode == IDENTITY:
        if lb < -rep.epsilon - CERT_SLACK:
            raise PreconditionError(f"{rep.neuron}: identity needs source lb {lb:g} >= -eps "
                                    f"{rep.epsilon:g}")
        return
    err = line_error(fn, lb, ub, rep.a, rep.b)
    if err > rep.epsilon + CERT_SLACK:
        raise PreconditionError(f"{rep.neuron}: max |f - line| = {err:g} exceeds eps {rep.epsilon:g}")


# ---------------------------------------------------------------------------
# error ledger


def propagate_error_bounds(network: Network, replacements, bounds: BoundsMap) -> ErrorLedger:
    """Certified deviation of every neuron once ``replacements`` are applied.

    Weighted sums combine their inputs' deviations through the sign of each
    weight.  A kept activation scales its source's deviation by its largest
    slope (or by its largest absolute slope on both sides if some slope is
    negative).  A replaced activation adds its local error on top of the
    source deviation passed through the line.
    """
    reps = {}
    for rep in replacements:
        if rep.neuron in reps:
            raise InputError(f"{rep.neuron} replaced twice")
        certify(network, bounds, rep)
        reps[rep.neuron] = rep
    c = network.compiled
    lo = np.zeros(c.size)
    hi = np.zeros(c.size)
    for L in c.layers:
        start = L["start"]
        if len(L["ws_flat"]):
            Wp = np.maximum(L["W"], 0.0)
            Wn = np.maximum(-L["W"], 0.0)
            lo[L["ws_flat"]] = Wp @ lo[:start] + Wn @ hi[:start]
            hi[L["ws_flat"]] = Wp @ hi[:start] + Wn @ lo[:start]
        for flat, src, fn, _ in L["acts"]:
            A, B = lo[src], hi[src]
            rep = reps.get(c.ref(flat))
            if rep is None:
                slopes = fn._slopes
                if slopes.min() >= 0:
                    M = slopes.max()
                    lo[flat], hi[flat] = M * A, M * B
                else:
                    lo[flat] = hi[flat] = np.abs(slopes).max() * max(A, B)
            elif fn.is_relu and rep.mode == ZERO:
                lo[flat], hi[flat] = rep.epsilon, 0.0
            elif fn.is_relu and rep.mode == IDENTITY:
                lo[flat], hi[flat] = A + rep.epsilon, B
            else:
                ap, an = max(rep.a, 0.0), max(-rep.a, 0.0)
                lo[flat] = ap * A + an * B + rep.epsilon
                hi[flat] = ap * B + an * A + rep.epsilon
    return ErrorLedger(lo, hi, c.offsets)


def apply_replacements(network: Network, replacements) -> Network:
    out = network
    for rep in replacements:
        out = replace_activation(out, rep.neuron, rep.coeffs)
    return saturate_ws_elimination(out)


def relaxed_candidates(network: Network, bounds: BoundsMap) -> list[Replacement]:
    """Best-line replacement for every unstable activation, ascending error then position."""
    out = []
    for v in network.activation_refs():
        if classify_phase_by_bounds(network, bounds, v) is not None:
            continue
        lb, ub = _source_bounds(network, bounds, v)
        fn = network[v].fn
        a, b, e = minimal_error_line(lb, ub) if fn.is_relu else best_line(fn, lb, ub)
        # certify against the exact deviation to absorb rounding in the closed form
        e = max(e, line_error(fn, lb, ub, a, b))
        out.append(Replacement.line(v, a, b, e))
    out.sort(key=lambda r: (r.epsilon, r.neuron.layer, r.neuron.index))
    return out


def greedy_relaxed_removal(network: Network, bounds: BoundsMap, e_t: float):
    """Linearize unstable activations, smallest local error first, within budget ``e_t``.

    Returns the surgered network, the ledger of the accepted replacements and
    the accepted replacements themselves.
    """
    if not e_t >= 0:
        raise InputError("e_t must be non-negative")
    accepted: list[Replacement] = []
    ledger = propagate_error_bounds(network, [], bounds)
    for rep in relaxed_candidates(network, bounds):
        trial = propagate_error_bounds(network, accepted + [rep], bounds)
        if trial.headline <= e_t:
            accepted.append(rep)
            ledger = trial
    if not accepted:
        return network, ledger, accepted
    return apply_replacements(network, accepted), ledger, accepted


# ---------------------------------------------------------------------------
# simulation


def candidate_lines(fn: PiecewiseLinearFn) -> list[tuple[float, float]]:
    """Lines tried when asking whether an activation can be dropped (zero first)."""
    lines = [(0.0, 0.0)] if fn.is_relu else []
    for seg in range(fn.num_pieces):
        line = segment_line(fn, seg)
        if line not in lines:
            lines.append(line)
    return lines


def simulate_filter(network: Network, candidates, kind: str, box: Box, samples: int = 100_000,
                    seed: int = 0, margin: float = 0.0, k: int | None = None,
                    chunk: int = 20_000) -> FilterResult:
    """Discard candidates refuted by random inputs from ``box``.

    ``kind="phase"``: candidates are activation refs; survivors are
    ``(ref, segment)`` pairs where every sample's source fits one segment, and
    a dropped ref carries two inputs landing in incompatible segments.

    ``kind="forward"`` / ``"result_preserving"``: candidates are ``(ref, line)``
    pairs; a dropped pair carries an input whose twin query goal holds.
    ``k`` defaults to the distance to the output layer.
    """
    if samples < 1:
        raise InputError("samples must be at least 1")
    rng = np.random.default_rng(seed)
    X = box.sample(rng, samples)
    survivors, dropped = [], {}
    if kind == "phase":
        c = network.compiled
        V = c.forward(X)
        for v in candidates:
            n = network[v]
            src = V[:, c.flat(n.source)]
            lo_i, hi_i = int(np.argmin(src)), int(np.argmax(src))
            seg = n.fn.segment_containing(src[lo_i], src[hi_i])
            if seg is None:
                dropped[v] = (X[lo_i], X[hi_i])
            else:
                survivors.append((v, seg))
        return FilterResult(survivors, dropped)
    if kind not in ("forward", "result_preserving"):
        raise InputError(f"unknown candidate kind {kind!r}")
    for cand in candidates:
        v, line = cand
        if kind == "forward":
            kk = k if k is not None else distance_to_output(network, v)
            q = build_forward_query(network, v, line, kk, box)
        else:
            q = build_result_preserving_query(network, v, line, box, margin)
        hit = None
        for s in range(0, samples, chunk):
            mask = goal_holds_batch(q, X[s:s + chunk])
            if mask.any():
                hit = X[s + int(np.argmax(mask))]
                break
        if hit is None:
            survivors.append(cand)
        else:
            dropped[cand] = hit
    return FilterResult(survivors, dropped)
