"""End-to-end simplification of one network on one input box.

Four steps run in order:

1. bounds: tighten neuron bounds and replace every activation whose source
   provably stays in one segment by that segment's line;
2. simulation: random inputs discard candidates with concrete counterexamples;
3. verification: the remaining candidates are checked one at a time with the
   branch-and-bound solver and removed on UNSAT;
4. relaxed removal (``relaxed`` and ``full`` modes): greedily linearize
   unstable activations while the certified output error stays within ``e_t``.

Neurons are tracked by name through surgery, so the report refers to the
names of the input network.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

from .net import InputError, Network, NeuronRef, count_neurons, name_neurons, replace_activation, \
    saturate_ws_elimination
from .prop import Box, BoundsMap, tighten
from .redundancy import (ErrorLedger, RedundancyVerdict, candidate_lines, classify_phase_by_bounds,
                         greedy_relaxed_removal, segment_line, simulate_filter)
from .verify import (build_forward_query, build_phase_query, build_result_preserving_query,
                     distance_to_output, solve)

log = logging.getLogger(__name__)

MODES = ("exact", "respres", "relaxed", "full")


@dataclass
class PipelineConfig:
    mode: str = "exact"
    margin: float = 0.0
    e_t: float = 0.0
    bound_budget: int = 64
    sim_samples: int = 100_000
    verify_budget: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}, got {self.mode!r}")
        for key in ("bound_budget", "sim_samples", "verify_budget"):
            if getattr(self, key) < 1:
                raise InputError(f"{key} must be at least 1")
        if not self.e_t >= 0:
            raise InputError("e_t must be non-negative")
        if not self.margin >= 0:
            raise InputError("margin must be non-negative")

    @property
    def label_preserving(self) -> bool:
        return self.mode in ("respres", "full")

    @property
    def relaxed(self) -> bool:
        return self.mode in ("relaxed", "full")

    def to_json(self) -> dict:
        out = asdict(self)
        out["margin"] = _num(self.margin)
        return out


def _num(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


@dataclass
class SimplifyReport:
    network: str
    config: PipelineConfig
    size_before: dict
    size_after: dict = field(default_factory=dict)
    removals: list[RedundancyVerdict] = field(default_factory=list)
    unknown: list[str] = field(default_factory=list)
    ledger: ErrorLedger | None = None
    timings: dict = field(default_factory=dict)

    @property
    def hidden_before(self) -> int:
        return self.size_before["hidden"]

    @property
    def removed(self) -> int:
        return self.size_before["hidden"] - self.size_after["hidden"]

    @property
    def surviving(self) -> int:
        return self.size_after["hidden"] - len(self.unknown)

    @property
    def counts(self) -> dict:
        out = {k: 0 for k in ("phase", "forward", "result_preserving", "relaxed")}
        for v in self.removals:
            out[v.kind] += 1
        out["unknown"] = len(self.unknown)
        return out

    def to_json(self, timings: bool = True) -> dict:
        return {
            "network": self.network,
            "config": self.config.to_json(),
            "size_before": self.size_before,
            "size_after": self.size_after,
            "hidden_before": self.hidden_before,
            "removed": self.removed,
            "unknown": len(self.unknown),
            "surviving": self.surviving,
            "counts": self.counts,
            "removals": [v.to_json() for v in self.removals],
            "unknown_neurons": list(self.unknown),
            "ledger": None if self.ledger is None else self.ledger.to_json(),
            "timings": {k: round(v, 6) for k, v in self.timings.items()} if timings else {},
        }

    def dumps(self, indent: int | None = 2, timings: bool = True) -> str:
        return json.dumps(self.to_json(timings), indent=indent)


def _named(network: Network) -> Network:
    if any(n.name is None for r in network.refs() if r.layer > 0 for n in [network[r]]):
        return name_neurons(network)
    return network


def remove_phase_redundant(network: Network, box: Box, budget: int, report: SimplifyReport | None,
                           outer_bounds: BoundsMap | None = None):
    """Replace every bound-certified phase-redundant activation by its segment line.

    ``outer_bounds`` (valid for ``network`` on a box containing ``box``) are
    intersected with the fresh bounds.
    """
    bounds = tighten(network, box, budget)
    if outer_bounds is not None:
        bounds = bounds.intersect(outer_bounds)
    net = network
    for v in network.activation_refs():
        seg = classify_phase_by_bounds(network, bounds, v)
        if seg is None:
            continue
        net = replace_activation(net, v, segment_line(network[v].fn, seg))
        if report is not None:
            lb, ub = bounds[network[v].source]
            report.removals.append(RedundancyVerdict(
                v, "phase", network[v].name, segment=seg, line=segment_line(network[v].fn, seg),
                evidence={"method": "bounds", "source_bounds": [lb, ub]}))
    if net is network:
        return network
    return saturate_ws_elimination(net)


def _verify_phase(net: Network, v: NeuronRef, seg: int, box: Box, budget: int) -> str:
    statuses = [solve(q, budget).status for q in build_phase_query(net, v, seg, box)]
    if "sat" in statuses:
        return "sat"
    return "unknown" if "unknown" in statuses else "unsat"


def simplify(network: Network, box: Box, config: PipelineConfig | None = None,
             outer_bounds: BoundsMap | None = None):
    """Simplify ``network`` on ``box``; returns the new network and a report.

    ``outer_bounds`` are bounds of ``network`` on an enclosing box (slicing
    passes the parent box's bounds) and only sharpen the first bound step.
    """
    config = config or PipelineConfig()
    if box.dim != network.input_dim:
        raise InputError(f"box has dimension {box.dim}, network expects {network.input_dim}")
    if config.label_preserving and network.output_dim < 2:
        raise InputError("label-preserving modes need at least two outputs")
    t_start = time.perf_counter()
    net = _named(network)
    report = SimplifyReport(net.name, config, count_neurons(net))

    # step 1
    t = time.perf_counter()
    net = remove_phase_redundant(net, box, config.bound_budget, report, outer_bounds)
    report.timings["bounds"] = time.perf_counter() - t
    log.info("step 1: %d phase-redundant removed by bounds", len(report.removals))

    # step 2
    t = time.perf_counter()
    names = [net[v].name for v in net.activation_refs()]
    phase = simulate_filter(net, net.activation_refs(), "phase", box, config.sim_samples,
                            config.seed)
    phase_seg = {net[v].name: seg for v, seg in phase.survivors}
    pairs = [(v, line) for v in net.activation_refs() for line in candidate_lines(net[v].fn)]
    kind = "result_preserving" if config.label_preserving else "forward"
    sim = simulate_filter(net, pairs, kind, box, config.sim_samples, config.seed,
                          margin=config.margin)
    lines: dict[str, list] = {n: [] for n in names}
    for v, line in sim.survivors:
        lines[net[v].name].append(line)
    report.timings["simulate"] = time.perf_counter() - t
    log.info("step 2: %d phase and %d line candidates survive simulation",
             len(phase_seg), len(sim.survivors))

    # step 3
    t = time.perf_counter()
    for name in names:
        v = net.find(name)
        unknown = False
        if name in phase_seg:
            status = _verify_phase(net, v, phase_seg[name], box, config.verify_budget)
            if status == "unsat":
                seg = phase_seg[name]
                line = segment_line(net[v].fn, seg)
                net = saturate_ws_elimination(replace_activation(net, v, line))
                report.removals.append(RedundancyVerdict(
                    v, "phase", name, segment=seg, line=line, evidence={"method": "verifier"}))
                continue
            unknown = status == "unknown"
        for line in lines[name]:
            if config.label_preserving:
                q = build_result_preserving_query(net, v, line, box, config.margin)
                k = None
            else:
                k = distance_to_output(net, v)
                q = build_forward_query(net, v, line, k, box)
            verdict = solve(q, config.verify_budget)
            if verdict.unsat:
                net = saturate_ws_elimination(replace_activation(net, v, line))
                report.removals.append(RedundancyVerdict(
                    v, kind, name, line=line, k=k,
                    margin=config.margin if config.label_preserving else None,
                    evidence={"method": "verifier", "nodes": verdict.nodes}))
                unknown = False
                break
            unknown |= verdict.status == "unknown"
        if unknown:
            report.unknown.append(name)
    report.timings["verify"] = time.perf_counter() - t

    # earlier removals can make further neurons phase-redundant
    t = time.perf_counter()
    net = remove_phase_redundant(net, box, config.bound_budget, report)
    report.timings["bounds"] += time.perf_counter() - t

    # step 4
    if config.relaxed:
        t = time.perf_counter()
        bounds = tighten(net, box, config.bound_budget)
        relaxed_net, ledger, accepted = greedy_relaxed_removal(net, bounds, config.e_t)
        for rep in accepted:
            report.removals.append(RedundancyVerdict(
                rep.neuron, "relaxed", net[rep.neuron].name, line=rep.coeffs,
                epsilon=rep.epsilon, evidence={"method": "ledger", "headline": ledger.headline}))
        report.ledger = ledger
        net = relaxed_net
        report.timings["relaxed"] = time.perf_counter() - t

    # later bound passes and relaxed removal can take out undecided neurons
    present = {net[r].name for r in net.refs()}
    report.unknown = [n for n in report.unknown if n in present]
    report.size_after = count_neurons(net)
    report.timings["total"] = time.perf_counter() - t_start
    return net, report
