"""Input slicing: one simplified network per cell of an even grid over the box.

Cells are half-open on their upper faces except along the top edge of the
base box, so every input of the box belongs to exactly one cell.  Cells whose
simplified network has no activation left are stored as an affine map.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .net import AffineMap, InputError, Network, ParseError, count_neurons, evaluate_batch, \
    network_to_dict, network_from_dict, to_affine
from .pipeline import PipelineConfig, simplify
from .prop import Box, BoundsMap, tighten

log = logging.getLogger(__name__)


class RoutingError(InputError):
    pass


@dataclass(frozen=True)
class SlicePlan:
    splits: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "splits", tuple(int(n) for n in self.splits))
        if not self.splits or any(n < 1 for n in self.splits):
            raise InputError(f"every split count must be at least 1, got {self.splits}")

    @classmethod
    def uniform(cls, dim: int, n: int) -> "SlicePlan":
        return cls((n,) * dim)

    @classmethod
    def parse(cls, text: str, dim: int | None = None) -> "SlicePlan":
        """``"4"`` (same count on every dimension, needs ``dim``) or ``"2,3,1"``."""
        try:
            counts = [int(p) for p in text.split(",")]
        except ValueError:
            raise InputError(f"bad split list {text!r}: expected integers like 2,2,4") from None
        if len(counts) == 1 and dim is not None:
            counts = counts * dim
        return cls(tuple(counts))

    @property
    def dim(self) -> int:
        return len(self.splits)

    @property
    def count(self) -> int:
        return math.prod(self.splits)


def _edges(box: Box, plan: SlicePlan) -> list[np.ndarray]:
    return [np.linspace(lo, hi, n + 1) for lo, hi, n in zip(box.lo, box.hi, plan.splits)]


def slice_domain(box: Box, plan: SlicePlan) -> list[Box]:
    """Sub-boxes in row-major order (the last dimension varies fastest)."""
    if plan.dim != box.dim:
        raise InputError(f"plan has {plan.dim} dimensions, box has {box.dim}")
    edges = _edges(box, plan)
    out = []
    for cell in np.ndindex(*plan.splits):
        lo = [edges[d][i] for d, i in enumerate(cell)]
        hi = [edges[d][i + 1] for d, i in enumerate(cell)]
        out.append(Box(lo, hi))
    return out


@dataclass
class FamilyEntry:
    index: int
    box: Box
    model: Network | AffineMap
    report: dict | None = None  # SimplifyReport JSON, None for passthrough entries

    @property
    def fully_linear(self) -> bool:
        return isinstance(self.model, AffineMap)

    @property
    def error_bound(self) -> float:
        if self.report is None or self.report.get("ledger") is None:
            return 0.0
        return float(self.report["ledger"]["headline"])

    def __call__(self, X: np.ndarray) -> np.ndarray:
        if isinstance(self.model, AffineMap):
            return self.model(X)
        return evaluate_batch(self.model, X)


@dataclass
class NetworkFamily:
    plan: SlicePlan
    box: Box
    entries: list[FamilyEntry]
    base_size: dict = field(default_factory=dict)
    name: str = "family"

    def __post_init__(self):
        if len(self.entries) != self.plan.count:
            raise InputError(f"{len(self.entries)} entries for a plan of {self.plan.count} cells")
        self._edges = _edges(self.box, self.plan)
        self._strides = np.array([math.prod(self.plan.splits[d + 1:]) for d in range(self.plan.dim)])

    # -- storage ---------------------------------------------------------

    def save(self, directory: str | os.PathLike) -> Path:
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        manifest = {"name": self.name, "plan": list(self.plan.splits), "box": self.box.to_json(),
                    "base_size": self.base_size, "entries": []}
        for e in self.entries:
            path = f"entry_{e.index:05d}.json"
            doc = e.model.to_json() if e.fully_linear else network_to_dict(e.model)
            doc = {"box": e.box.to_json(), "report": e.report, **doc}
            (root / path).write_text(json.dumps(doc))
            manifest["entries"].append({"index": e.index, "path": path,
                                        "fully_linear": e.fully_linear,
                                        "error_bound": e.error_bound})
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return root

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "NetworkFamily":
        root = Path(directory)
        try:
            manifest = json.loads((root / "manifest.json").read_text())
        except FileNotFoundError:
            raise InputError(f"{root / 'manifest.json'}: no such file") from None
        except json.JSONDecodeError as exc:
            raise ParseError("$", f"manifest is not JSON: {exc}") from None
        plan = SlicePlan(tuple(manifest["plan"]))
        box = Box.from_json(manifest["box"])
        entries = []
        for item in manifest["entries"]:
            doc = json.loads((root / item["path"]).read_text())
            model = AffineMap.from_json(doc) if "affine" in doc else network_from_dict(doc)
            entries.append(FamilyEntry(int(item["index"]), Box.from_json(doc["box"]), model,
                                       doc.get("report")))
        entries.sort(key=lambda e: e.index)
        return cls(plan, box, entries, manifest.get("base_size", {}), manifest.get("name", "family"))

    # -- routing ---------------------------------------------------------

    def route_batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.box.dim:
            raise InputError(f"input has dimension {X.shape[1]}, family expects {self.box.dim}")
        outside = ((X < self.box.lo) | (X > self.box.hi) | np.isnan(X)).any(axis=1)
        if outside.any():
            raise RoutingError(f"input {X[np.argmax(outside)].tolist()} is outside the base box")
        cells = np.zeros(X.shape, dtype=int)
        for d, n in enumerate(self.plan.splits):
            lo, hi = self.box.lo[d], self.box.hi[d]
            if hi == lo:
                continue
            i = np.clip(np.floor((X[:, d] - lo) / (hi - lo) * n).astype(int), 0, n - 1)
            # floating-point floor can land one cell off next to an edge
            e = self._edges[d]
            i = np.where(X[:, d] < e[i], i - 1, i)
            i = np.where((i < n - 1) & (X[:, d] >= e[np.minimum(i + 1, n)]), i + 1, i)
            cells[:, d] = i
        return cells @ self._strides


def route(family: NetworkFamily, x) -> int:
    """Index of the cell owning ``x``; raises RoutingError outside the base box."""
    return int(family.route_batch(np.asarray(x, dtype=float)[None])[0])


def family_evaluate(family: NetworkFamily, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return family_evaluate_batch(family, x[None])[0]


def family_evaluate_batch(family: NetworkFamily, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    idx = family.route_batch(X)
    out = None
    for i in np.unique(idx):
        rows = idx == i
        Y = family.entries[i](X[rows])
        if out is None:
            out = np.empty((len(X), Y.shape[1]))
        out[rows] = Y
    return out


def _simplify_cell(args):
    network, box, config, outer = args
    net, report = simplify(network, box, config, outer_bounds=outer)
    affine = to_affine(net)
    return (affine if affine is not None else net), report.to_json()


def slice_and_simplify(network: Network, box: Box, plan: SlicePlan,
                       config: PipelineConfig | None = None, sample=None,
                       threads: int = 1) -> NetworkFamily:
    """Simplify the network separately on every selected cell of ``plan``.

    ``sample`` lists the cell indices to simplify; other cells keep the
    original network.  With ``threads > 1`` cells are processed in worker
    processes; the result does not depend on the thread count.
    """
    config = config or PipelineConfig()
    boxes = slice_domain(box, plan)
    selected = range(len(boxes)) if sample is None else sorted(set(int(i) for i in sample))
    for i in selected:
        if not 0 <= i < len(boxes):
            raise InputError(f"sample index {i} outside 0..{len(boxes) - 1}")
    outer: BoundsMap = tighten(network, box, config.bound_budget)
    jobs = [(network, boxes[i], config, outer) for i in selected]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_simplify_cell, jobs))
    else:
        results = [_simplify_cell(j) for j in jobs]
    done = dict(zip(selected, results))
    entries = []
    for i, b in enumerate(boxes):
        model, report = done.get(i, (network, None))
        entries.append(FamilyEntry(i, b, model, report))
        if report is not None:
            log.info("cell %d: %d of %d hidden neurons removed", i, report["removed"],
                     report["hidden_before"])
    return NetworkFamily(plan, box, entries, count_neurons(network), network.name)


def linearization_report(family: NetworkFamily) -> dict:
    """Per-cell removal statistics plus their mean, min and max."""
    rows = []
    total_hidden = family.base_size.get("hidden")
    total_act = family.base_size.get("activation")
    for e in family.entries:
        r = e.report
        if r is None:
            removed, phase, hidden, acts = 0, 0, total_hidden, total_act
        else:
            removed, phase = r["removed"], r["counts"]["phase"]
            hidden, acts = r["hidden_before"], r["size_before"]["activation"]
        rows.append({
            "index": e.index,
            "simplified": r is not None,
            "removed": removed,
            "total": hidden,
            "fraction": removed / hidden if hidden else 0.0,
            "phase_fraction": phase / acts if acts else 0.0,
            "fully_linear": e.fully_linear,
            "error_bound": e.error_bound,
        })
    fr = np.array([r["fraction"] for r in rows])
    ph = np.array([r["phase_fraction"] for r in rows])
    return {
        "entries": rows,
        "aggregate": {
            "cells": len(rows),
            "simplified": sum(r["simplified"] for r in rows),
            "fully_linear": sum(r["fully_linear"] for r in rows),
            "mean_fraction": float(fr.mean()),
            "min_fraction": float(fr.min()),
            "max_fraction": float(fr.max()),
            "mean_phase_fraction": float(ph.mean()),
            "max_error_bound": max(r["error_bound"] for r in rows),
        },
    }
