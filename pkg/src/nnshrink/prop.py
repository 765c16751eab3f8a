"""Sound per-neuron bounds over an input box.

Three engines of increasing precision:

* :func:`interval_bounds` -- plain interval arithmetic, layer by layer.
* :func:`symbolic_bounds` -- every neuron is kept as an exact affine
  expression over the inputs and one auxiliary variable per activation
  neuron.  Each auxiliary variable carries a linear lower/upper relaxation in
  terms of an earlier expression (the triangle relaxation for an unstable
  ReLU).  Concretizing an expression substitutes the relaxations back in
  reverse creation order and maximizes the resulting affine function over the
  box.
* :func:`tighten` -- bisects the box and takes the hull of the children's
  symbolic bounds.

All three work on batches of boxes internally; the public functions take a
single :class:`Box`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .net import CompiledNetwork, InputError, Network, NeuronRef, PiecewiseLinearFn, ParseError


class Box:
    """Axis-aligned input box, one closed interval per input dimension."""

    def __init__(self, lo, hi):
        self.lo = np.array(lo, dtype=float).reshape(-1)
        self.hi = np.array(hi, dtype=float).reshape(-1)
        if self.lo.shape != self.hi.shape:
            raise InputError("box bounds have different lengths")
        if np.any(self.lo > self.hi):
            raise InputError("box has lo > hi in some dimension")
        if not (np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi))):
            raise InputError("box bounds must be finite")

    @classmethod
    def cube(cls, dim: int, lo: float = -1.0, hi: float = 1.0) -> "Box":
        return cls(np.full(dim, lo), np.full(dim, hi))

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2

    def __eq__(self, other) -> bool:
        return (isinstance(other, Box) and np.array_equal(self.lo, other.lo)
                and np.array_equal(self.hi, other.hi))

    def __repr__(self) -> str:
        return f"Box(lo={self.lo.tolist()}, hi={self.hi.tolist()})"

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def split(self, dim: int | None = None) -> tuple["Box", "Box"]:
        if dim is None:
            dim = int(np.argmax(self.widths))
        mid = (self.lo[dim] + self.hi[dim]) / 2
        hi1 = self.hi.copy()
        hi1[dim] = mid
        lo2 = self.lo.copy()
        lo2[dim] = mid
        return Box(self.lo, hi1), Box(lo2, self.hi)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))

    def corners(self) -> np.ndarray:
        d = self.dim
        bits = (np.arange(2 ** d)[:, None] >> np.arange(d)) & 1
        return np.where(bits == 1, self.hi, self.lo)

    def to_json(self) -> dict:
        return {"dims": [{"lo": float(a), "hi": float(b)} for a, b in zip(self.lo, self.hi)]}

    @classmethod
    def from_json(cls, doc) -> "Box":
        if not isinstance(doc, dict) or not isinstance(doc.get("dims"), list):
            raise ParseError("$.dims", "missing or not a list")
        lo, hi = [], []
        for i, d in enumerate(doc["dims"]):
            for key, out in (("lo", lo), ("hi", hi)):
                v = d.get(key) if isinstance(d, dict) else None
                if not isinstance(v, (int, float)) or isinstance(v, bool):
                    raise ParseError(f"$.dims[{i}].{key}", f"expected a number, got {v!r}")
                out.append(float(v))
        return cls(lo, hi)


@dataclass
class BoundsMap:
    """Certified ``[lb, ub]`` for every neuron, stored flat in layer order."""

    lb: np.ndarray
    ub: np.ndarray
    offsets: np.ndarray

    def __getitem__(self, ref: NeuronRef) -> tuple[float, float]:
        k = int(self.offsets[ref.layer]) + ref.index
        return float(self.lb[k]), float(self.ub[k])

    def layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.offsets[i], self.offsets[i + 1]
        return self.lb[a:b], self.ub[a:b]

    def width(self) -> np.ndarray:
        return self.ub - self.lb

    def within(self, other: "BoundsMap", tol: float = 1e-9) -> bool:
        """True if every interval here is contained in ``other``'s (with slack)."""
        return bool(np.all(self.lb >= other.lb - tol) and np.all(self.ub <= other.ub + tol))

    def intersect(self, other: "BoundsMap") -> "BoundsMap":
        lb = np.maximum(self.lb, other.lb)
        ub = np.minimum(self.ub, other.ub)
        return BoundsMap(np.minimum(lb, ub), np.maximum(lb, ub), self.offsets)

    def to_json(self) -> dict:
        out = []
        for li in range(len(self.offsets) - 1):
            lbs, ubs = self.layer(li)
            for j, (a, b) in enumerate(zip(lbs, ubs)):
                out.append({"layer": li, "index": j, "lb": float(a), "ub": float(b)})
        return {"bounds": out}

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def _check_box(network: Network, box: Box) -> None:
    if box.dim != network.input_dim:
        raise InputError(f"box has dimension {box.dim}, network expects {network.input_dim}")


# ---------------------------------------------------------------------------
# activation ranges and relaxations (vectorized over a batch of intervals)


def fn_range(fn: PiecewiseLinearFn, l: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact range of ``fn`` over ``[l, u]`` (extremes sit at ends or breakpoints)."""
    if fn.is_relu:
        return np.maximum(l, 0.0), np.maximum(u, 0.0)
    V = np.concatenate([l[..., None], np.clip(fn.finite_breakpoints, l[..., None], u[..., None]),
                        u[..., None]], axis=-1)
    fV = fn(V)
    return fV.min(axis=-1), fV.max(axis=-1)


def relax(fn: PiecewiseLinearFn, l: np.ndarray, u: np.ndarray):
    """Linear bounds ``ls*x+li <= fn(x) <= us*x+ui`` valid on ``[l, u]``.

    Upper bound: the chord, lifted until it clears every vertex.  Lower bound:
    the slope of the first or last piece in range, lowered until it is under
    every vertex, whichever has the larger mean over the interval.  For ReLU
    this is the usual triangle relaxation.
    """
    if fn.is_relu:
        act = l >= 0
        inact = u <= 0
        unstable = ~(act | inact)
        width = np.where(unstable, u - l, 1.0)
        chord = np.where(unstable, u / width, 0.0)
        lam = (u > -l).astype(float)
        ls = np.where(act, 1.0, np.where(inact, 0.0, lam))
        us = np.where(act, 1.0, np.where(inact, 0.0, chord))
        ui = np.where(unstable, -l * chord, 0.0)
        return ls, np.zeros_like(l), us, ui
    slopes = fn._slopes
    V = np.concatenate([l[..., None], np.clip(fn.finite_breakpoints, l[..., None], u[..., None]),
                        u[..., None]], axis=-1)
    fV = fn(V)
    seg_l = fn.segment_of(l)
    seg_u = np.searchsorted(fn.interior, u, side="left")
    width = u - l
    flat = width <= 1e-300
    s = np.where(flat, slopes[seg_l], (fn(u) - fn(l)) / np.where(flat, 1.0, width))
    us = s
    ui = np.max(fV - s[..., None] * V, axis=-1)
    a1, a2 = slopes[seg_l], slopes[seg_u]
    c1 = np.min(fV - a1[..., None] * V, axis=-1)
    c2 = np.min(fV - a2[..., None] * V, axis=-1)
    mid = (l + u) / 2
    pick1 = a1 * mid + c1 >= a2 * mid + c2
    return np.where(pick1, a1, a2), np.where(pick1, c1, c2), us, ui


def slope_range(fn: PiecewiseLinearFn, l: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Min and max slope over the pieces that meet ``[l, u]``."""
    if fn.is_relu:
        return np.where(l >= 0, 1.0, 0.0), np.where(u > 0, 1.0, 0.0)
    first = fn.segment_of(l)
    last = np.searchsorted(fn.interior, u, side="left")
    idx = np.arange(fn.num_pieces)
    mask = (idx >= first[..., None]) & (idx <= last[..., None])
    sl = fn._slopes
    return (np.where(mask, sl, np.inf).min(axis=-1), np.where(mask, sl, -np.inf).max(axis=-1))


def relax_difference(m, M, dl, du):
    """Linear bounds on ``f(s + d) - f(s)`` as a function of ``d in [dl, du]``.

    For any f with slopes in ``[m, M]`` the difference lies between
    ``min(m*d, M*d)`` and ``max(m*d, M*d)``; across zero those are relaxed by
    their chords.
    """
    pos = dl >= 0
    neg = du <= 0
    mixed = ~(pos | neg)
    span = np.where(mixed, du - dl, 1.0)
    us_mix = (M * du - m * dl) / span
    ls_mix = (m * du - M * dl) / span
    ls = np.where(pos, m, np.where(neg, M, ls_mix))
    us = np.where(pos, M, np.where(neg, m, us_mix))
    li = np.where(mixed, m * du - ls_mix * du, 0.0)
    ui = np.where(mixed, M * du - us_mix * du, 0.0)
    return ls, li, us, ui


# ---------------------------------------------------------------------------
# engines


def interval_batch(c: CompiledNetwork, lo: np.ndarray, hi: np.ndarray):
    B, d = lo.shape
    lb = np.empty((B, c.size))
    ub = np.empty((B, c.size))
    lb[:, :d], ub[:, :d] = lo, hi
    for L in c.layers:
        start = L["start"]
        if len(L["ws_flat"]):
            Wp = np.maximum(L["W"], 0.0)
            Wn = np.minimum(L["W"], 0.0)
            lb[:, L["ws_flat"]] = lb[:, :start] @ Wp.T + ub[:, :start] @ Wn.T + L["bias"]
            ub[:, L["ws_flat"]] = ub[:, :start] @ Wp.T + lb[:, :start] @ Wn.T + L["bias"]
        for flat, src, fn, _ in L["acts"]:
            lb[:, flat], ub[:, flat] = fn_range(fn, lb[:, src], ub[:, src])
    return lb, ub


class SymbolicPass:
    """Symbolic bound propagation over a batch of boxes ``lo, hi`` of shape (B, d).

    ``partners`` maps the flat index of an activation neuron to the flat index
    of another activation neuron computing the same function of a
    (possibly different) source.  Such a neuron is represented as its partner
    plus an auxiliary difference variable, so identical downstream behaviour in
    two copies of a sub-network cancels exactly.  Activations applying the same
    function to the same source share one expression.
    """

    def __init__(self, c: CompiledNetwork, lo: np.ndarray, hi: np.ndarray,
                 partners: dict[int, int] | None = None):
        self.c = c
        self.lo = np.atleast_2d(np.asarray(lo, dtype=float))
        self.hi = np.atleast_2d(np.asarray(hi, dtype=float))
        B, d = self.lo.shape
        self.B, self.d = B, d
        self.nv = c.num_activations
        D = 1 + d + self.nv
        self.E = np.zeros((B, c.size, D))
        self.lb = np.empty((B, c.size))
        self.ub = np.empty((B, c.size))
        self.S = np.zeros((B, self.nv, D))
        self.ls = np.zeros((B, self.nv))
        self.li = np.zeros((B, self.nv))
        self.us = np.zeros((B, self.nv))
        self.ui = np.zeros((B, self.nv))
        self.defined = 0
        self.partners = partners or {}
        self._run()

    # -- concretization ------------------------------------------------------

    def backsub(self, E: np.ndarray, upper: bool) -> np.ndarray:
        """Affine bound over the inputs for expressions ``E`` of shape (B, K, D).

        Returns an array (B, K, 1 + d): constant term then input coefficients.
        """
        E = np.array(E, dtype=float, copy=True)
        base = 1 + self.d
        for v in range(self.defined - 1, -1, -1):
            col = base + v
            C = E[:, :, col]
            if not C.any():
                continue
            pos = np.maximum(C, 0.0)
            neg = np.minimum(C, 0.0)
            if upper:
                coef = pos * self.us[:, v, None] + neg * self.ls[:, v, None]
                const = pos * self.ui[:, v, None] + neg * self.li[:, v, None]
            else:
                coef = pos * self.ls[:, v, None] + neg * self.us[:, v, None]
                const = pos * self.li[:, v, None] + neg * self.ui[:, v, None]
            E[:, :, col] = 0.0
            E += coef[:, :, None] * self.S[:, None, v, :]
            E[:, :, 0] += const
        return E[:, :, :base]

    def box_extreme(self, A: np.ndarray, upper: bool) -> np.ndarray:
        a = A[:, :, 1:]
        lo, hi = self.lo[:, None, :], self.hi[:, None, :]
        if upper:
            return A[:, :, 0] + np.maximum(a * lo, a * hi).sum(axis=-1)
        return A[:, :, 0] + np.minimum(a * lo, a * hi).sum(axis=-1)

    def concretize(self, E: np.ndarray, upper: bool) -> np.ndarray:
        return self.box_extreme(self.backsub(E, upper), upper)

    def bounds_of(self, E: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.concretize(E, False), self.concretize(E, True)

    # -- propagation -----------------------------------------------------------

    def _run(self) -> None:
        c, d = self.c, self.d
        E, lb, ub = self.E, self.lb, self.ub
        for i in range(d):
            E[:, i, 1 + i] = 1.0
        lb[:, :d], ub[:, :d] = self.lo, self.hi
        base = 1 + d
        seen: dict = {}
        for L in c.layers:
            start = L["start"]
            rows = L["ws_flat"]
            if len(rows):
                Ews = np.einsum("rk,bkD->brD", L["W"], E[:, :start])
                Ews[:, :, 0] += L["bias"]
                E[:, rows] = Ews
                slb, sub = self.bounds_of(Ews)
                Wp = np.maximum(L["W"], 0.0)
                Wn = np.minimum(L["W"], 0.0)
                ilb = lb[:, :start] @ Wp.T + ub[:, :start] @ Wn.T + L["bias"]
                iub = ub[:, :start] @ Wp.T + lb[:, :start] @ Wn.T + L["bias"]
                self._store(rows, slb, sub, ilb, iub)
            if not L["acts"]:
                continue
            paired = [(k, a) for k, a in enumerate(L["acts"]) if a[0] in self.partners]
            diff_bounds = {}
            if paired:
                Sd = np.stack([E[:, a[1]] - E[:, c.act_source[self.partners[a[0]]]]
                               for _, a in paired], axis=1)
                dl, du = self.bounds_of(Sd)
                for n, (k, _) in enumerate(paired):
                    diff_bounds[k] = (Sd[:, n], dl[:, n], du[:, n])
            flats = []
            rlb, rub = [], []
            for k, (flat, src, fn, var) in enumerate(L["acts"]):
                l, u = lb[:, src], ub[:, src]
                col = base + var
                first = seen.setdefault((src, fn), flat)
                if first != flat and flat not in self.partners:
                    # same function of the same source: reuse the earlier neuron exactly
                    E[:, flat] = E[:, first]
                    self.defined = var + 1
                    a, b = fn_range(fn, l, u)
                    flats.append(flat)
                    rlb.append(a)
                    rub.append(b)
                    continue
                if k in diff_bounds:
                    partner = self.partners[flat]
                    psrc = c.act_source[partner]
                    S, dl, du = diff_bounds[k]
                    m, M = slope_range(fn, np.minimum(l, lb[:, psrc]), np.maximum(u, ub[:, psrc]))
                    rel = relax_difference(m, M, dl, du)
                    E[:, flat] = E[:, partner]
                else:
                    S = E[:, src]
                    rel = relax(fn, l, u)
                    E[:, flat] = 0.0
                E[:, flat, col] = 1.0
                self.S[:, var] = S
                self.ls[:, var], self.li[:, var], self.us[:, var], self.ui[:, var] = rel
                self.defined = var + 1
                a, b = fn_range(fn, l, u)
                flats.append(flat)
                rlb.append(a)
                rub.append(b)
            flats = np.array(flats)
            slb, sub = self.bounds_of(E[:, flats])
            self._store(flats, slb, sub, np.stack(rlb, axis=1), np.stack(rub, axis=1))

    def _store(self, rows, slb, sub, ilb, iub) -> None:
        lo = np.maximum(slb, ilb)
        hi = np.minimum(sub, iub)
        # both intervals are sound, so any crossing is rounding noise
        self.lb[:, rows] = np.minimum(lo, hi)
        self.ub[:, rows] = np.maximum(lo, hi)

    def bounds(self, b: int = 0) -> BoundsMap:
        return BoundsMap(self.lb[b].copy(), self.ub[b].copy(), self.c.offsets)


def interval_bounds(network: Network, box: Box) -> BoundsMap:
    """Layer-by-layer interval arithmetic."""
    _check_box(network, box)
    c = network.compiled
    lb, ub = interval_batch(c, box.lo[None], box.hi[None])
    return BoundsMap(lb[0], ub[0], c.offsets)


def symbolic_bounds(network: Network, box: Box) -> BoundsMap:
    """Back-substituted symbolic bounds; never looser than :func:`interval_bounds`."""
    _check_box(network, box)
    return SymbolicPass(network.compiled, box.lo[None], box.hi[None]).bounds()


def _batch_bounds(c: CompiledNetwork, lo, hi, backend: str):
    if backend == "interval":
        return interval_batch(c, lo, hi)
    p = SymbolicPass(c, lo, hi)
    return p.lb, p.ub


def tighten(network: Network, box: Box, budget: int = 64, backend: str = "symbolic") -> BoundsMap:
    """Refine bounds by bisecting the box into at most ``budget`` leaves.

    Each round splits the leaves responsible for the most extreme neuron
    bounds along their widest dimension.  The result is the hull of the
    leaves' bounds intersected with the unsplit bounds, so it is sound and
    never looser than the ``budget=1`` answer.
    """
    if budget < 1:
        raise InputError("budget must be at least 1")
    _check_box(network, box)
    c = network.compiled
    lo = box.lo[None].copy()
    hi = box.hi[None].copy()
    lb, ub = _batch_bounds(c, lo, hi, backend)
    root_lb, root_ub = lb[0].copy(), ub[0].copy()
    while len(lo) < budget:
        n_split = min(len(lo), budget - len(lo))
        blame = np.zeros(len(lo))
        width = ub.max(axis=0) - lb.min(axis=0)
        live = width > 1e-12
        np.add.at(blame, np.argmin(lb[:, live], axis=0), 1)
        np.add.at(blame, np.argmax(ub[:, live], axis=0), 1)
        vol = np.prod(hi - lo, axis=1)
        order = sorted(range(len(lo)), key=lambda i: (-blame[i], -vol[i], i))
        chosen = [i for i in order[:n_split] if blame[i] > 0 and np.max(hi[i] - lo[i]) > 0]
        if not chosen:
            break
        keep = np.ones(len(lo), dtype=bool)
        keep[chosen] = False
        new_lo, new_hi = [], []
        for i in chosen:
            dim = int(np.argmax(hi[i] - lo[i]))
            mid = (lo[i, dim] + hi[i, dim]) / 2
            a_hi = hi[i].copy()
            a_hi[dim] = mid
            b_lo = lo[i].copy()
            b_lo[dim] = mid
            new_lo += [lo[i], b_lo]
            new_hi += [a_hi, hi[i]]
        new_lo, new_hi = np.array(new_lo), np.array(new_hi)
        clb, cub = _batch_bounds(c, new_lo, new_hi, backend)
        lo = np.concatenate([lo[keep], new_lo])
        hi = np.concatenate([hi[keep], new_hi])
        lb = np.concatenate([lb[keep], clb])
        ub = np.concatenate([ub[keep], cub])
    out_lb = np.maximum(lb.min(axis=0), root_lb)
    out_ub = np.minimum(ub.max(axis=0), root_ub)
    return BoundsMap(np.minimum(out_lb, out_ub), np.maximum(out_lb, out_ub), c.offsets)
