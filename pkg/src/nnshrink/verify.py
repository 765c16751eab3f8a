"""Verification queries over a network and an input box.

A query asks whether some input in the box satisfies a goal.  Three goal
shapes are supported: a conjunction of linear inequalities over neuron values,
a mismatch between paired neurons of a twin network, and a change of the
winning output label between the two halves of a twin network.

:func:`solve` is a branch-and-bound search over the input box: it bounds each
box symbolically, prunes boxes where the goal is impossible, probes a few
concrete points for a witness and otherwise bisects the widest dimension.
:func:`brute_force_oracle` is an independent exact check for tiny networks
that enumerates activation segments and solves one LP per feasible pattern.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .net import (ACTIVATION, WEIGHTED_SUM, InputError, Network, Neuron, NeuronRef, ParseError,
                  PreconditionError)
from .prop import Box, SymbolicPass

log = logging.getLogger(__name__)

STRICT_SLACK = 1e-12
NONSTRICT_SLACK = 1e-13
DEFAULT_TOL = 1e-9
OPS = ("<", "<=", ">", ">=")


@dataclass(frozen=True)
class LinearConstraint:
    terms: tuple[tuple[NeuronRef, float], ...]
    op: str
    rhs: float

    def __post_init__(self):
        if self.op not in OPS:
            raise InputError(f"unknown comparison {self.op!r}")

    def __str__(self) -> str:
        lhs = " + ".join(f"{c:g}*{r}" for r, c in self.terms)
        return f"{lhs} {self.op} {self.rhs:g}"


@dataclass(frozen=True)
class LinearFeasibility:
    constraints: tuple[LinearConstraint, ...]


@dataclass(frozen=True)
class LayerMismatch:
    pairs: tuple[tuple[NeuronRef, NeuronRef], ...]
    tol: float = DEFAULT_TOL


@dataclass(frozen=True)
class ArgmaxMismatch:
    orig: tuple[NeuronRef, ...]
    twin: tuple[NeuronRef, ...]
    margin: float = 0.0


@dataclass
class TwinNetwork:
    """Shared prefix, then the original suffix and a copy with one neuron replaced.

    Every layer from the replaced neuron's layer onwards holds the original
    neurons first and their copies after them, so ``pairs`` maps ``(L, j)`` to
    ``(L, size_L + j)``.
    """

    network: Network
    base: Network
    neuron: NeuronRef
    line: tuple[float, float]
    pairs: dict[NeuronRef, NeuronRef]
    partners: dict[int, int]


@dataclass
class Query:
    network: Network | TwinNetwork
    box: Box
    goal: LinearFeasibility | LayerMismatch | ArgmaxMismatch
    label: str = ""

    @property
    def net(self) -> Network:
        return self.network.network if isinstance(self.network, TwinNetwork) else self.network

    @property
    def partners(self) -> dict[int, int]:
        return self.network.partners if isinstance(self.network, TwinNetwork) else {}


@dataclass
class Verdict:
    status: str
    witness: np.ndarray | None = None
    nodes: int = 0
    frontier: list[Box] = field(default_factory=list)

    @property
    def sat(self) -> bool:
        return self.status == "sat"

    @property
    def unsat(self) -> bool:
        return self.status == "unsat"

    def to_json(self) -> dict:
        out = {"status": self.status, "nodes": self.nodes}
        if self.witness is not None:
            out["witness"] = [float(v) for v in self.witness]
        if self.frontier:
            out["frontier"] = [b.to_json() for b in self.frontier]
        return out


# ---------------------------------------------------------------------------
# query construction


def build_twin(network: Network, v: NeuronRef, line: tuple[float, float]) -> TwinNetwork:
    if network[v].kind != ACTIVATION:
        raise PreconditionError(f"{v} is not an activation neuron")
    start = v.layer
    sizes = network.sizes

    def shift(ref: NeuronRef) -> NeuronRef:
        return ref if ref.layer < start else NeuronRef(ref.layer, ref.index + sizes[ref.layer])

    def copy(n: Neuron) -> Neuron:
        name = None if n.name is None else n.name + "'"
        if n.kind == WEIGHTED_SUM:
            return Neuron(WEIGHTED_SUM, n.bias, tuple((shift(s), c) for s, c in n.terms), name=name)
        return Neuron(ACTIVATION, source=shift(n.source), fn=n.fn, name=name)

    layers = list(network.layers[:start])
    pairs = {}
    for li in range(start, len(network.layers)):
        orig = network.layers[li]
        twin = []
        for j, n in enumerate(orig):
            if li == start and j == v.index:
                a, b = line
                twin.append(Neuron.weighted_sum(b, [(n.source, a)],
                                                name=None if n.name is None else n.name + "'"))
            else:
                twin.append(copy(n))
            pairs[NeuronRef(li, j)] = NeuronRef(li, sizes[li] + j)
        layers.append(tuple(orig) + tuple(twin))
    net = Network(tuple(layers), network.name + "-twin")
    c = net.compiled
    partners = {c.flat(t): c.flat(o) for o, t in pairs.items()
                if net[t].kind == ACTIVATION and net[o].kind == ACTIVATION}
    return TwinNetwork(net, network, v, (float(line[0]), float(line[1])), pairs, partners)


def truncate(network: Network, last_layer: int) -> Network:
    return Network(network.layers[:last_layer + 1], network.name + f"-upto{last_layer}")


def build_phase_query(network: Network, v: NeuronRef, segment: int, box: Box) -> list[Query]:
    """Queries whose joint UNSAT proves ``v``'s source never leaves ``segment``."""
    n = network[v]
    if n.kind != ACTIVATION:
        raise PreconditionError(f"{v} is not an activation neuron")
    x = n.source
    lo, hi = n.fn.segment_bounds(segment)
    net = truncate(network, x.layer)
    out = []
    if math.isfinite(lo):
        out.append(Query(net, box, LinearFeasibility((LinearConstraint(((x, 1.0),), "<", lo),)),
                         f"phase {v}: source < {lo:g}"))
    if math.isfinite(hi):
        out.append(Query(net, box, LinearFeasibility((LinearConstraint(((x, 1.0),), ">", hi),)),
                         f"phase {v}: source > {hi:g}"))
    return out


def ws_layer_at_distance(network: Network, v: NeuronRef, k: int) -> int:
    """Index of the ``k``-th all-weighted-sum layer after ``v``'s layer."""
    if k < 1:
        raise PreconditionError("k must be at least 1")
    seen = 0
    for li in range(v.layer + 1, len(network.layers)):
        if network.layer_kind(li) == WEIGHTED_SUM:
            seen += 1
            if seen == k:
                return li
    raise PreconditionError(f"k={k} reaches beyond the output layer of {network.name}")


def distance_to_output(network: Network, v: NeuronRef) -> int:
    return sum(1 for li in range(v.layer + 1, len(network.layers))
               if network.layer_kind(li) == WEIGHTED_SUM)


def build_forward_query(network: Network, v: NeuronRef, line: tuple[float, float], k: int,
                        box: Box, tol: float = DEFAULT_TOL) -> Query:
    """Does replacing ``v`` by ``line`` change any neuron ``k`` weighted-sum layers later?"""
    target = ws_layer_at_distance(network, v, k)
    twin = build_twin(network, v, line)
    pairs = tuple((NeuronRef(target, j), twin.pairs[NeuronRef(target, j)])
                  for j in range(len(network.layers[target])))
    return Query(twin, box, LayerMismatch(pairs, tol), f"forward {v} k={k} line={line}")


def build_result_preserving_query(network: Network, v: NeuronRef, line: tuple[float, float],
                                  box: Box, margin: float = 0.0) -> Query:
    """Does replacing ``v`` by ``line`` change the label of a confidently classified input?"""
    if network.output_dim < 2:
        raise PreconditionError("result-preserving queries need at least two outputs")
    twin = build_twin(network, v, line)
    last = len(network.layers) - 1
    orig = tuple(NeuronRef(last, j) for j in range(network.output_dim))
    return Query(twin, box, ArgmaxMismatch(orig, tuple(twin.pairs[r] for r in orig), margin),
                 f"result-preserving {v} line={line} margin={margin:g}")


# ---------------------------------------------------------------------------
# goal semantics


def goal_holds_batch(query: Query, X) -> np.ndarray:
    """Evaluate the goal at each row of ``X`` exactly as stated (no slack)."""
    net = query.net
    c = net.compiled
    V = c.forward(np.atleast_2d(np.asarray(X, dtype=float)))
    col = lambda r: V[:, c.flat(r)]
    goal = query.goal
    if isinstance(goal, LinearFeasibility):
        ok = np.ones(len(V), dtype=bool)
        for con in goal.constraints:
            lhs = sum(w * col(r) for r, w in con.terms)
            ok &= {"<": np.less, "<=": np.less_equal, ">": np.greater,
                   ">=": np.greater_equal}[con.op](lhs, con.rhs)
        return ok
    if isinstance(goal, LayerMismatch):
        ok = np.zeros(len(V), dtype=bool)
        for o, t in goal.pairs:
            ok |= np.abs(col(o) - col(t)) > goal.tol
        return ok
    o = np.stack([col(r) for r in goal.orig], axis=1)
    t = np.stack([col(r) for r in goal.twin], axis=1)
    w = np.argmax(o, axis=1)
    rows = np.arange(len(V))
    rest = o.copy()
    rest[rows, w] = -np.inf
    confident = o[rows, w] - rest.max(axis=1) > goal.margin
    return confident & (np.argmax(t, axis=1) != w)


def check_goal(query: Query, x) -> bool:
    return bool(goal_holds_batch(query, np.asarray(x, dtype=float)[None])[0])


def _atoms(query: Query):
    """Goal as a disjunction of conjunctions of atoms ``a . values + c (>|>=) 0``.

    Returns the atom matrix (n_atoms, n_neurons), constants, strictness flags
    and the list of disjuncts (lists of atom indices).
    """
    c = query.net.compiled
    rows, consts, strict, disjuncts = [], [], [], []

    def atom(terms, const, is_strict):
        row = np.zeros(c.size)
        for r, w in terms:
            row[c.flat(r)] += w
        rows.append(row)
        consts.append(const)
        strict.append(is_strict)
        return len(rows) - 1

    goal = query.goal
    if isinstance(goal, LinearFeasibility):
        conj = []
        for con in goal.constraints:
            if con.op in ("<", "<="):
                conj.append(atom([(r, -w) for r, w in con.terms], con.rhs, con.op == "<"))
            else:
                conj.append(atom(con.terms, -con.rhs, con.op == ">"))
        disjuncts.append(conj)
    elif isinstance(goal, LayerMismatch):
        for o, t in goal.pairs:
            disjuncts.append([atom([(o, 1.0), (t, -1.0)], -goal.tol, True)])
            disjuncts.append([atom([(t, 1.0), (o, -1.0)], -goal.tol, True)])
    else:
        m = len(goal.orig)
        if math.isinf(goal.margin):
            return np.zeros((0, c.size)), np.zeros(0), np.zeros(0, bool), []
        for w in range(m):
            lead = [atom([(goal.orig[w], 1.0), (goal.orig[i], -1.0)], -goal.margin, True)
                    for i in range(m) if i != w]
            for j in range(m):
                if j != w:
                    flip = atom([(goal.twin[j], 1.0), (goal.twin[w], -1.0)], 0.0, j > w)
                    # implied by lead + flip; its bound sees only twin-minus-original terms
                    both = atom([(goal.orig[w], 1.0), (goal.orig[j], -1.0),
                                 (goal.twin[j], 1.0), (goal.twin[w], -1.0)], -goal.margin, True)
                    disjuncts.append(lead + [flip, both])
    return (np.array(rows).reshape(-1, c.size), np.array(consts), np.array(strict, dtype=bool),
            disjuncts)


def _lp_max_margin(A: np.ndarray, strict: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Maximize s subject to ``A[:,0] + A[:,1:] x >= s`` (strict rows) or ``>= 0`` (others).

    Returns (best s or None if infeasible, maximizing x).  Without strict rows
    s is pinned to 0 and the LP is a feasibility check.
    """
    d = A.shape[1] - 1
    has_strict = bool(strict.any())
    A_ub = np.hstack([-A[:, 1:], strict[:, None].astype(float)])
    b_ub = A[:, 0] + np.where(strict, 0.0, NONSTRICT_SLACK)
    cost = np.zeros(d + 1)
    cost[-1] = -1.0
    s_bounds = (None, 1.0) if has_strict else (0.0, 0.0)
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, bounds=list(zip(lo, hi)) + [s_bounds], method="highs")
    if res.status == 2:
        return None, None
    if res.status != 0:
        # numerical trouble: report "maybe feasible" so callers keep splitting
        return math.inf, (lo + hi) / 2
    return float(res.x[-1]), res.x[:-1]


def _disjunct_dead(A: np.ndarray, strict: np.ndarray, lo, hi):
    """(dead?, candidate point) for one conjunction of affine atom upper bounds."""
    s, x = _lp_max_margin(A, strict, lo, hi)
    if s is None:
        return True, None
    if strict.any() and s <= STRICT_SLACK:
        return True, x
    return False, x


# ---------------------------------------------------------------------------
# branch and bound


def solve(query: Query, budget: int = 10_000, batch: int = 16, exact_leaf: int = 3) -> Verdict:
    """Branch-and-bound over the input box.

    Boxes with at most ``exact_leaf`` activations whose source straddles a
    breakpoint are decided exactly by enumerating those activations' segments.

    Returns SAT with a re-validated witness, UNSAT once every box is pruned, or
    UNKNOWN with the unexplored boxes when the node budget runs out.
    """
    if budget < 1:
        raise InputError("budget must be at least 1")
    net = query.net
    if query.box.dim != net.input_dim:
        raise InputError(f"box has dimension {query.box.dim}, network expects {net.input_dim}")
    atoms = _atoms(query)
    A, const, strict, disjuncts = atoms
    if not disjuncts:
        return Verdict("unsat", nodes=0)
    c = net.compiled
    d = net.input_dim
    alias = _activation_aliases(c)
    acts = [(flat, src, fn) for L in c.layers for flat, src, fn, _ in L["acts"]
            if flat not in alias]
    order = _neuron_order(c, alias)

    def _holds(x) -> bool:
        # atoms with the pruning slack, then the goal as stated
        vals = c.forward(x[None])[0] @ A.T + const
        ok = np.where(strict, vals > STRICT_SLACK, vals >= -NONSTRICT_SLACK)
        return any(ok[conj].all() for conj in disjuncts) and check_goal(query, x)

    stack: list[tuple[np.ndarray, np.ndarray]] = [(query.box.lo.copy(), query.box.hi.copy())]
    nodes = 0
    while stack:
        if nodes >= budget:
            log.debug("%s: budget of %d nodes exhausted with %d open boxes", query.label, budget,
                      len(stack))
            return Verdict("unknown", nodes=nodes, frontier=[Box(l, h) for l, h in reversed(stack)])
        take = min(batch, budget - nodes, len(stack))
        boxes = [stack.pop() for _ in range(take)]
        nodes += take
        lo = np.array([b[0] for b in boxes])
        hi = np.array([b[1] for b in boxes])
        P = SymbolicPass(c, lo, hi, query.partners)
        Ex = np.einsum("an,bnD->baD", A, P.E)
        Ex[:, :, 0] += const
        U = P.backsub(Ex, upper=True)
        umax = P.box_extreme(U, upper=True)
        dead_atom = np.where(strict, umax <= STRICT_SLACK, umax < -NONSTRICT_SLACK)
        children = []
        for b in range(take):
            probes = [P.lo[b] * 0.5 + P.hi[b] * 0.5]
            alive = False
            for conj in disjuncts:
                if dead_atom[b, conj].any():
                    continue
                Ub = U[b, conj]
                if len(conj) == 1:
                    alive = True
                    probes.append(np.where(Ub[0, 1:] > 0, P.hi[b], P.lo[b]))
                    continue
                dead, x = _disjunct_dead(Ub, strict[conj], P.lo[b], P.hi[b])
                if x is not None:
                    probes.append(x)
                alive |= not dead
            if not alive:
                continue
            for i in range(d):
                for end in (P.lo[b], P.hi[b]):
                    p = probes[0].copy()
                    p[i] = end[i]
                    probes.append(p)
            probes = np.clip(np.array(probes), P.lo[b], P.hi[b])
            for p in probes:
                if _holds(p):
                    return Verdict("sat", witness=p, nodes=nodes)
            if exact_leaf:
                fixed = {}
                for flat, src, fn in acts:
                    seg = fn.segment_containing(P.lb[b, src], P.ub[b, src])
                    if seg is not None:
                        fixed[flat] = seg
                if len(acts) - len(fixed) <= exact_leaf:
                    x, _ = _search_patterns(c, atoms, P.lo[b], P.hi[b], fixed, order)
                    if x is None:
                        continue
                    if _holds(x):
                        return Verdict("sat", witness=x, nodes=nodes)
            widths = P.hi[b] - P.lo[b]
            dim = int(np.argmax(widths))
            if widths[dim] <= 0:
                continue  # a single point that was just evaluated
            mid = (P.lo[b, dim] + P.hi[b, dim]) / 2
            if not P.lo[b, dim] < mid < P.hi[b, dim]:
                continue  # cannot split further in floating point
            h1 = P.hi[b].copy()
            h1[dim] = mid
            l2 = P.lo[b].copy()
            l2[dim] = mid
            children.append(((P.lo[b].copy(), h1), (l2, P.hi[b].copy())))
        for first, second in reversed(children):
            stack.append(second)
            stack.append(first)
    return Verdict("unsat", nodes=nodes)


# ---------------------------------------------------------------------------
# exact search over activation segments


def _activation_aliases(c) -> dict:
    """Activations that repeat an earlier (source, fn) pair map to that neuron."""
    first, alias = {}, {}
    for L in c.layers:
        for flat, src, fn, _ in L["acts"]:
            f = first.setdefault((src, fn), flat)
            if f != flat:
                alias[flat] = f
    return alias


def _neuron_order(c, alias=None):
    alias = alias or {}
    order = []
    for L in c.layers:
        for k, flat in enumerate(L["ws_flat"]):
            order.append(("ws", flat, L["W"][k], L["bias"][k], L["start"]))
        for flat, src, fn, _ in L["acts"]:
            if flat in alias:
                order.append(("alias", flat, alias[flat]))
            else:
                order.append(("act", flat, src, fn))
    return order


def _search_patterns(c, goal_atoms, lo, hi, fixed=None, order=None):
    """Enumerate segment assignments on the box ``[lo, hi]``.

    ``fixed`` pins activations (by flat index) to one segment without adding
    constraints; the caller guarantees their source stays in that segment.
    Returns (witness or None, number of complete patterns examined).
    """
    A, const, strict, disjuncts = goal_atoms
    fixed = fixed or {}
    order = order if order is not None else _neuron_order(c)
    d = c.input_dim
    expr = np.zeros((c.size, 1 + d))
    expr[:d, 1:] = np.eye(d)
    explored = [0]

    def feasible(rows):
        s, _ = _lp_max_margin(np.array(rows), np.zeros(len(rows), bool), lo, hi)
        return s is not None

    def search(pos, rows):
        while pos < len(order) and order[pos][0] != "act":
            if order[pos][0] == "ws":
                _, flat, w, b, start = order[pos]
                expr[flat] = w @ expr[:start]
                expr[flat, 0] += b
            else:
                _, flat, target = order[pos]
                expr[flat] = expr[target]
            pos += 1
        if pos == len(order):
            explored[0] += 1
            G = A @ expr
            G[:, 0] += const
            for conj in disjuncts:
                atoms = np.array(rows + [G[a] for a in conj])
                st = np.array([False] * len(rows) + [bool(strict[a]) for a in conj])
                s, x = _lp_max_margin(atoms, st, lo, hi)
                if s is None or (st.any() and s <= STRICT_SLACK):
                    continue
                return x
            return None
        _, flat, src, fn = order[pos]
        segs = [fixed[flat]] if flat in fixed else range(fn.num_pieces)
        for seg in segs:
            new = []
            if flat not in fixed:
                s_lo, s_hi = fn.segment_bounds(seg)
                if math.isfinite(s_lo):
                    r = expr[src].copy()
                    r[0] -= s_lo
                    new.append(r)
                if math.isfinite(s_hi):
                    r = -expr[src]
                    r[0] += s_hi
                    new.append(r)
                if not feasible(rows + new):
                    continue
            expr[flat] = fn.slopes[seg] * expr[src]
            expr[flat, 0] += fn.intercepts[seg]
            found = search(pos + 1, rows + new)
            if found is not None:
                return found
        return None

    witness = search(0, [])
    if witness is not None:
        witness = np.clip(witness, lo, hi)
    return witness, explored[0]


def brute_force_oracle(query: Query, max_activations: int = 12) -> Verdict:
    """Exact answer by enumerating activation segments (test oracle).

    Every activation neuron is assigned a segment; under a fixed assignment the
    network is affine, segment membership is a set of linear constraints, and
    each goal disjunct becomes one LP.  Infeasible partial assignments are
    pruned as soon as they appear.  No bound propagation is involved.
    """
    c = query.net.compiled
    if c.num_activations > max_activations:
        raise PreconditionError(f"{c.num_activations} activations exceed the oracle limit "
                                f"of {max_activations}")
    atoms = _atoms(query)
    if not atoms[3]:
        return Verdict("unsat")
    witness, explored = _search_patterns(c, atoms, query.box.lo, query.box.hi)
    if witness is None:
        return Verdict("unsat", nodes=explored)
    return Verdict("sat", witness=witness, nodes=explored)


# ---------------------------------------------------------------------------
# JSON


def _ref_json(obj, path: str) -> NeuronRef:
    try:
        return NeuronRef(int(obj["layer"]), int(obj["index"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(path, "expected {\"layer\": int, \"index\": int}") from exc


def _float_json(obj, key: str, path: str, default=None) -> float:
    if key not in obj:
        if default is None:
            raise ParseError(f"{path}.{key}", "missing")
        return default
    v = obj[key]
    if v in ("inf", "+inf"):
        return math.inf
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"{path}.{key}", "expected a number")
    return float(v)


def query_from_json(network: Network, doc) -> Query:
    """Build a query against ``network`` from its JSON description.

    ``{"box": {...}, "goal": {"kind": "feasible", "constraints": [...]}}``,
    ``{"kind": "layer_mismatch", "neuron": ref, "line": [a, b], "k": int, "tol": num}`` or
    ``{"kind": "argmax_mismatch", "neuron": ref, "line": [a, b], "margin": num}``.
    """
    if not isinstance(doc, dict) or "goal" not in doc or "box" not in doc:
        raise ParseError("$", "query needs \"box\" and \"goal\"")
    try:
        box = Box.from_json(doc["box"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError("$.box", str(exc)) from exc
    goal = doc["goal"]
    kind = goal.get("kind") if isinstance(goal, dict) else None
    if kind == "feasible":
        cons = []
        for i, con in enumerate(goal.get("constraints", [])):
            path = f"$.goal.constraints[{i}]"
            if not isinstance(con, dict) or con.get("op") not in OPS:
                raise ParseError(path, f"op must be one of {OPS}")
            terms = tuple((_ref_json(t, f"{path}.terms[{j}]"), _float_json(t, "coeff", path))
                          for j, t in enumerate(con.get("terms", [])))
            cons.append(LinearConstraint(terms, con["op"], _float_json(con, "rhs", path)))
        if not cons:
            raise ParseError("$.goal.constraints", "at least one constraint required")
        return Query(network, box, LinearFeasibility(tuple(cons)), "feasible")
    if kind in ("layer_mismatch", "argmax_mismatch"):
        v = _ref_json(goal.get("neuron"), "$.goal.neuron")
        line = goal.get("line", [0.0, 0.0])
        if not (isinstance(line, list) and len(line) == 2):
            raise ParseError("$.goal.line", "expected [a, b]")
        line = (float(line[0]), float(line[1]))
        if kind == "layer_mismatch":
            k = goal.get("k")
            k = distance_to_output(network, v) if k is None else int(k)
            return build_forward_query(network, v, line, k, box,
                                       _float_json(goal, "tol", "$.goal", DEFAULT_TOL))
        return build_result_preserving_query(network, v, line, box,
                                             _float_json(goal, "margin", "$.goal", 0.0))
    raise ParseError("$.goal.kind", "expected feasible, layer_mismatch or argmax_mismatch")
