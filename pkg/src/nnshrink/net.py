"""Layered piecewise-linear networks: representation, evaluation and surgery.

A network is a sequence of layers.  Layer 0 holds the inputs; every other
neuron is either a weighted sum of neurons from strictly earlier layers or a
piecewise-linear activation of a single earlier neuron.  Networks are
immutable; every surgery operation returns a new network.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Sequence

import numpy as np

INPUT = "input"
WEIGHTED_SUM = "weighted_sum"
ACTIVATION = "activation"

CONTINUITY_TOL = 1e-9


class NetworkError(Exception):
    """Base class for errors raised by this package."""


class InputError(NetworkError, ValueError):
    """Bad user input: wrong dimensions, out-of-domain points, ..."""


class PreconditionError(NetworkError, ValueError):
    """An operation was called on a network/neuron it does not apply to."""


class ParseError(InputError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True, order=True)
class NeuronRef:
    layer: int
    index: int

    def __str__(self) -> str:
        return f"({self.layer},{self.index})"


@dataclass(frozen=True)
class PiecewiseLinearFn:
    """Continuous piecewise-linear function of one variable.

    Piece ``i`` applies on ``[breakpoints[i], breakpoints[i+1])``; the last
    piece also owns its right endpoint.  Outside the outermost finite
    breakpoints the end pieces are extended.
    """

    breakpoints: tuple[float, ...]
    slopes: tuple[float, ...]
    intercepts: tuple[float, ...]

    @classmethod
    def relu(cls) -> "PiecewiseLinearFn":
        return cls((-math.inf, 0.0, math.inf), (0.0, 1.0), (0.0, 0.0))

    @classmethod
    def line(cls, slope: float, intercept: float) -> "PiecewiseLinearFn":
        return cls((-math.inf, math.inf), (float(slope),), (float(intercept),))

    @property
    def num_pieces(self) -> int:
        return len(self.slopes)

    @property
    def is_relu(self) -> bool:
        return self == RELU

    @cached_property
    def interior(self) -> np.ndarray:
        return np.asarray(self.breakpoints[1:-1], dtype=float)

    @cached_property
    def finite_breakpoints(self) -> np.ndarray:
        b = np.asarray(self.breakpoints, dtype=float)
        return b[np.isfinite(b)]

    @cached_property
    def _slopes(self) -> np.ndarray:
        return np.asarray(self.slopes, dtype=float)

    @cached_property
    def _intercepts(self) -> np.ndarray:
        return np.asarray(self.intercepts, dtype=float)

    def segment_of(self, x):
        """Index of the piece owning ``x`` (half-open convention)."""
        return np.searchsorted(self.interior, x, side="right")

    def __call__(self, x):
        if self.is_relu:
            return np.maximum(x, 0.0)
        seg = self.segment_of(x)
        return self._slopes[seg] * x + self._intercepts[seg]

    def segment_bounds(self, segment: int) -> tuple[float, float]:
        return self.breakpoints[segment], self.breakpoints[segment + 1]

    def segment_containing(self, lo: float, hi: float) -> int | None:
        """The single piece whose closed segment contains ``[lo, hi]``, if any."""
        for i in range(self.num_pieces):
            s_lo, s_hi = self.segment_bounds(i)
            if s_lo <= lo and hi <= s_hi:
                return i
        return None

    def violations(self) -> list[str]:
        out = []
        k = len(self.slopes)
        if k < 1:
            out.append("no pieces")
        if len(self.intercepts) != k or len(self.breakpoints) != k + 1:
            out.append("breakpoints/slopes/intercepts lengths inconsistent")
            return out
        bps = self.breakpoints
        if any(not (a < b) for a, b in zip(bps, bps[1:])):
            out.append("breakpoints not sorted")
            return out
        if any(math.isinf(b) for b in bps[1:-1]):
            out.append("interior breakpoint is infinite")
            return out
        for i in range(k - 1):
            s = bps[i + 1]
            left = self.slopes[i] * s + self.intercepts[i]
            right = self.slopes[i + 1] * s + self.intercepts[i + 1]
            if abs(left - right) > CONTINUITY_TOL * max(1.0, abs(left)):
                out.append(f"discontinuous at breakpoint {s}")
        return out


RELU = PiecewiseLinearFn.relu()


@dataclass(frozen=True)
class Neuron:
    kind: str
    bias: float = 0.0
    terms: tuple[tuple[NeuronRef, float], ...] = ()
    source: NeuronRef | None = None
    fn: PiecewiseLinearFn | None = None
    name: str | None = None

    @classmethod
    def input(cls, name: str | None = None) -> "Neuron":
        return cls(INPUT, name=name)

    @classmethod
    def weighted_sum(cls, bias: float, terms: Iterable[tuple[NeuronRef, float]],
                     name: str | None = None) -> "Neuron":
        return cls(WEIGHTED_SUM, bias=float(bias),
                   terms=tuple((r, float(c)) for r, c in terms), name=name)

    @classmethod
    def activation(cls, source: NeuronRef, fn: PiecewiseLinearFn = RELU,
                   name: str | None = None) -> "Neuron":
        return cls(ACTIVATION, source=source, fn=fn, name=name)

    def inputs(self) -> list[NeuronRef]:
        if self.kind == WEIGHTED_SUM:
            return [r for r, _ in self.terms]
        if self.kind == ACTIVATION:
            return [self.source]
        return []


@dataclass(frozen=True)
class AffineMap:
    matrix: np.ndarray
    offset: np.ndarray

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x @ self.matrix.T + self.offset

    @property
    def input_dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def output_dim(self) -> int:
        return self.matrix.shape[0]

    def to_json(self) -> dict:
        return {"affine": {"matrix": self.matrix.tolist(), "offset": self.offset.tolist()}}

    @classmethod
    def from_json(cls, doc) -> "AffineMap":
        try:
            body = doc["affine"]
            matrix = np.asarray(body["matrix"], dtype=float)
            offset = np.asarray(body["offset"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError("$.affine", f"expected matrix and offset: {exc}") from None
        if matrix.ndim != 2 or offset.shape != (matrix.shape[0],):
            raise ParseError("$.affine", "matrix/offset shapes disagree")
        return cls(matrix, offset)


@dataclass(frozen=True)
class LayerTrace:
    values: tuple[np.ndarray, ...]

    @property
    def output(self) -> np.ndarray:
        return self.values[-1]

    def __getitem__(self, ref: NeuronRef) -> float:
        return float(self.values[ref.layer][ref.index])


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple[tuple[Neuron, ...], ...]
    name: str = "network"
    metadata: dict = field(default_factory=dict, compare=False)

    def __eq__(self, other) -> bool:
        return isinstance(other, Network) and self.layers == other.layers and self.name == other.name

    __hash__ = object.__hash__

    @property
    def input_dim(self) -> int:
        return len(self.layers[0])

    @property
    def output_dim(self) -> int:
        return len(self.layers[-1])

    @property
    def sizes(self) -> list[int]:
        return [len(layer) for layer in self.layers]

    def __getitem__(self, ref: NeuronRef) -> Neuron:
        return self.layers[ref.layer][ref.index]

    def refs(self, kind: str | None = None) -> list[NeuronRef]:
        return [NeuronRef(i, j) for i, layer in enumerate(self.layers)
                for j, n in enumerate(layer) if kind is None or n.kind == kind]

    def hidden_count(self) -> int:
        return sum(len(layer) for layer in self.layers[1:-1])

    def activation_refs(self) -> list[NeuronRef]:
        return self.refs(ACTIVATION)

    def layer_kind(self, layer: int) -> str:
        kinds = {n.kind for n in self.layers[layer]}
        return kinds.pop() if len(kinds) == 1 else "mixed"

    def find(self, name: str) -> NeuronRef | None:
        for ref in self.refs():
            if self[ref].name == name:
                return ref
        return None

    def consumers(self) -> dict[NeuronRef, list[NeuronRef]]:
        out: dict[NeuronRef, list[NeuronRef]] = {r: [] for r in self.refs()}
        for ref in self.refs():
            for src in self[ref].inputs():
                if src in out and ref not in out[src]:
                    out[src].append(ref)
        return out

    @cached_property
    def compiled(self) -> "CompiledNetwork":
        return CompiledNetwork(self)


class CompiledNetwork:
    """Dense, flat-indexed view of a network used by the numeric kernels."""

    def __init__(self, net: Network):
        self.net = net
        sizes = net.sizes
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.size = int(self.offsets[-1])
        self.input_dim = sizes[0]
        self.layers: list[dict] = []
        act_count = 0
        for li in range(1, len(net.layers)):
            start = int(self.offsets[li])
            layer = net.layers[li]
            ws_rows = [j for j, n in enumerate(layer) if n.kind == WEIGHTED_SUM]
            act_rows = [j for j, n in enumerate(layer) if n.kind == ACTIVATION]
            W = np.zeros((len(ws_rows), start))
            bias = np.zeros(len(ws_rows))
            for r, j in enumerate(ws_rows):
                n = layer[j]
                bias[r] = n.bias
                for src, c in n.terms:
                    W[r, self.flat(src)] += c
            acts = []
            for j in act_rows:
                n = layer[j]
                acts.append((start + j, self.flat(n.source), n.fn, act_count))
                act_count += 1
            groups: dict[PiecewiseLinearFn, list[int]] = {}
            for k, (_, _, fn, _) in enumerate(acts):
                groups.setdefault(fn, []).append(k)
            self.layers.append({
                "start": start,
                "ws_flat": np.array([start + j for j in ws_rows], dtype=int),
                "W": W,
                "bias": bias,
                "acts": acts,
                "act_flat": np.array([a[0] for a in acts], dtype=int),
                "act_src": np.array([a[1] for a in acts], dtype=int),
                "groups": {fn: np.array(ks, dtype=int) for fn, ks in groups.items()},
            })
        self.num_activations = act_count
        self.act_source = {a[0]: a[1] for L in self.layers for a in L["acts"]}

    def flat(self, ref: NeuronRef) -> int:
        return int(self.offsets[ref.layer]) + ref.index

    def ref(self, flat: int) -> NeuronRef:
        layer = int(np.searchsorted(self.offsets, flat, side="right")) - 1
        return NeuronRef(layer, flat - int(self.offsets[layer]))

    def forward(self, X: np.ndarray) -> np.ndarray:
        """Flat neuron values for a batch of inputs ``X`` of shape (B, input_dim)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        V = np.empty((X.shape[0], self.size))
        V[:, :self.input_dim] = X
        for L in self.layers:
            start = L["start"]
            if len(L["ws_flat"]):
                V[:, L["ws_flat"]] = V[:, :start] @ L["W"].T + L["bias"]
            if len(L["act_flat"]):
                src = V[:, L["act_src"]]
                for fn, ks in L["groups"].items():
                    V[:, L["act_flat"][ks]] = fn(src[:, ks])
        return V

    def outputs(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X)[:, int(self.offsets[-2]):]


def _check_input(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.input_dim:
        raise InputError(f"input has dimension {x.shape[-1]}, network expects {net.input_dim}")
    return x


def evaluate(network: Network, x) -> LayerTrace:
    """Propagate one input vector through the network."""
    x = _check_input(network, x)
    if x.ndim != 1:
        raise InputError("evaluate takes a single input vector; use evaluate_batch")
    V = network.compiled.forward(x[None, :])[0]
    offs = network.compiled.offsets
    return LayerTrace(tuple(V[offs[i]:offs[i + 1]].copy() for i in range(len(network.layers))))


def evaluate_batch(network: Network, X) -> np.ndarray:
    """Output vectors for a batch of inputs, shape (B, output_dim)."""
    X = _check_input(network, X)
    return network.compiled.outputs(X)


def layer_values(network: Network, X, layer: int) -> np.ndarray:
    X = _check_input(network, X)
    offs = network.compiled.offsets
    return network.compiled.forward(X)[:, offs[layer]:offs[layer + 1]]


def validate(network: Network) -> list[str]:
    """Every structural invariant violation, each prefixed with its neuron."""
    out = []
    layers = network.layers
    if not layers:
        return ["network has no layers"]
    if len(layers) < 2:
        out.append("network needs an input and an output layer")
    for li, layer in enumerate(layers):
        if not layer:
            out.append(f"layer {li}: empty layer")
        for j, n in enumerate(layer):
            where = f"neuron ({li},{j})"
            if n.kind == INPUT:
                if li != 0:
                    out.append(f"{where}: input neuron outside layer 0")
                continue
            if li == 0:
                out.append(f"{where}: non-input neuron in layer 0")
            if li == len(layers) - 1 and n.kind != WEIGHTED_SUM:
                out.append(f"{where}: output neuron is not a weighted sum")
            if n.kind == ACTIVATION:
                if n.fn is None or n.source is None:
                    out.append(f"{where}: activation without source or function")
                    continue
                for msg in n.fn.violations():
                    out.append(f"{where}: {msg}")
            elif n.kind != WEIGHTED_SUM:
                out.append(f"{where}: unknown kind {n.kind!r}")
                continue
            for src in n.inputs():
                if src.layer >= li:
                    out.append(f"{where}: forward reference to {src}")
                elif not (0 <= src.layer and 0 <= src.index < len(layers[src.layer])):
                    out.append(f"{where}: reference to missing neuron {src}")
    return out


# ---------------------------------------------------------------------------
# surgery


class _Graph:
    """Mutable working copy used while deleting neurons; keys are original refs."""

    def __init__(self, net: Network):
        self.net = net
        self.nodes: dict[NeuronRef, Neuron] = {r: net[r] for r in net.refs()}
        self.last = len(net.layers) - 1
        self.users: dict[NeuronRef, set[NeuronRef]] = {r: set() for r in self.nodes}
        for r, n in self.nodes.items():
            for s in n.inputs():
                self.users[s].add(r)

    def eligible(self, ref: NeuronRef) -> bool:
        n = self.nodes[ref]
        if n.kind != WEIGHTED_SUM or ref.layer in (0, self.last):
            return False
        return all(self.nodes[u].kind == WEIGHTED_SUM for u in self.users[ref])

    def eliminate(self, ref: NeuronRef) -> None:
        v = self.nodes[ref]
        for u_ref in sorted(self.users[ref]):
            u = self.nodes[u_ref]
            c = sum(coef for s, coef in u.terms if s == ref)
            merged: dict[NeuronRef, float] = {}
            for s, coef in u.terms:
                if s != ref:
                    merged[s] = merged.get(s, 0.0) + coef
            for s, coef in v.terms:
                merged[s] = merged.get(s, 0.0) + c * coef
                self.users[s].add(u_ref)
            self.nodes[u_ref] = Neuron(WEIGHTED_SUM, bias=u.bias + c * v.bias,
                                       terms=tuple(merged.items()), name=u.name)
        for s in v.inputs():
            self.users[s].discard(ref)
        del self.nodes[ref]
        del self.users[ref]

    def build(self) -> Network:
        old_layers = len(self.net.layers)
        keep = [[r for r in sorted(self.nodes) if r.layer == li] for li in range(old_layers)]
        keep = [refs for refs in keep if refs]
        mapping = {r: NeuronRef(li, j) for li, refs in enumerate(keep) for j, r in enumerate(refs)}

        def remap(n: Neuron) -> Neuron:
            if n.kind == WEIGHTED_SUM:
                return Neuron(WEIGHTED_SUM, bias=n.bias,
                              terms=tuple((mapping[s], c) for s, c in n.terms), name=n.name)
            if n.kind == ACTIVATION:
                return Neuron(ACTIVATION, source=mapping[n.source], fn=n.fn, name=n.name)
            return n

        layers = tuple(tuple(remap(self.nodes[r]) for r in refs) for refs in keep)
        return Network(layers, self.net.name, dict(self.net.metadata))


def eliminate_ws_neuron(network: Network, v: NeuronRef) -> Network:
    """Substitute weighted-sum neuron ``v`` into all its consumers and delete it."""
    if v.layer == 0 or v.layer == len(network.layers) - 1:
        raise PreconditionError(f"{v} is in the input or output layer")
    if network[v].kind != WEIGHTED_SUM:
        raise PreconditionError(f"{v} is not a weighted-sum neuron")
    g = _Graph(network)
    if not g.eligible(v):
        raise PreconditionError(f"{v} feeds an activation neuron")
    g.eliminate(v)
    return g.build()


def replace_activation(network: Network, v: NeuronRef, line: tuple[float, float]) -> Network:
    """Turn activation ``v = f(x)`` into the weighted sum ``v = a*x + b``."""
    n = network[v]
    if n.kind != ACTIVATION:
        raise PreconditionError(f"{v} is not an activation neuron")
    a, b = line
    new = Neuron(WEIGHTED_SUM, bias=float(b), terms=((n.source, float(a)),), name=n.name)
    layers = list(network.layers)
    layer = list(layers[v.layer])
    layer[v.index] = new
    layers[v.layer] = tuple(layer)
    return Network(tuple(layers), network.name, dict(network.metadata))


def saturate_ws_elimination(network: Network) -> Network:
    g = _Graph(network)
    changed = True
    while changed:
        changed = False
        for ref in sorted(g.nodes, key=lambda r: (-r.layer, r.index)):
            if ref in g.nodes and g.eligible(ref):
                g.eliminate(ref)
                changed = True
    return g.build()


def to_affine(network: Network) -> AffineMap | None:
    """The exact affine map computed by an activation-free network, else None."""
    net = saturate_ws_elimination(network)
    if net.activation_refs():
        return None
    # every hidden weighted sum is eligible, so only input and output layers remain
    matrix = np.zeros((net.output_dim, net.input_dim))
    offset = np.zeros(net.output_dim)
    for j, n in enumerate(net.layers[-1]):
        offset[j] = n.bias
        for s, coef in n.terms:
            matrix[j, s.index] += coef
    return AffineMap(matrix, offset)


def count_neurons(network: Network) -> dict[str, int]:
    return {
        "hidden": network.hidden_count(),
        "activation": len(network.activation_refs()),
        "layers": len(network.layers),
    }


# ---------------------------------------------------------------------------
# JSON


def _num_to_json(x: float):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _fn_to_json(fn: PiecewiseLinearFn):
    if fn.is_relu:
        return "relu"
    return {"breakpoints": [_num_to_json(b) for b in fn.breakpoints],
            "slopes": list(fn.slopes), "intercepts": list(fn.intercepts)}


def _neuron_to_json(n: Neuron, with_kind: bool) -> dict:
    if n.kind == WEIGHTED_SUM:
        d = {"bias": n.bias,
             "terms": [{"layer": s.layer, "index": s.index, "coeff": c} for s, c in n.terms]}
    else:
        d = {"source": {"layer": n.source.layer, "index": n.source.index}, "fn": _fn_to_json(n.fn)}
    if with_kind:
        d = {"kind": n.kind, **d}
    if n.name is not None:
        d["name"] = n.name
    return d


def network_to_dict(network: Network) -> dict:
    layers = []
    for li, layer in enumerate(network.layers):
        kind = network.layer_kind(li)
        if kind == INPUT:
            layers.append({"kind": "input", "size": len(layer)})
        else:
            layers.append({"kind": kind,
                           "neurons": [_neuron_to_json(n, kind == "mixed") for n in layer]})
    return {"name": network.name, "layers": layers}


def serialize_network(network: Network, indent: int | None = None) -> str:
    return json.dumps(network_to_dict(network), indent=indent)


def _expect(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ParseError(path, msg)


def _number(value: Any, path: str, allow_inf: bool = False) -> float:
    if allow_inf and value in ("inf", "+inf", "-inf"):
        return -math.inf if value == "-inf" else math.inf
    _expect(isinstance(value, (int, float)) and not isinstance(value, bool), path,
            f"expected a number, got {value!r}")
    return float(value)


def _int(value: Any, path: str) -> int:
    _expect(isinstance(value, int) and not isinstance(value, bool), path,
            f"expected an integer, got {value!r}")
    return value


def _ref(obj: Any, path: str) -> NeuronRef:
    _expect(isinstance(obj, dict), path, "expected an object with layer/index")
    _expect("layer" in obj, f"{path}.layer", "missing key")
    _expect("index" in obj, f"{path}.index", "missing key")
    return NeuronRef(_int(obj["layer"], f"{path}.layer"), _int(obj["index"], f"{path}.index"))


def _parse_fn(obj: Any, path: str) -> PiecewiseLinearFn:
    if obj == "relu":
        return RELU
    _expect(isinstance(obj, dict), path, "expected \"relu\" or a breakpoints object")
    for key in ("breakpoints", "slopes", "intercepts"):
        _expect(isinstance(obj.get(key), list), f"{path}.{key}", "missing or not a list")
    fn = PiecewiseLinearFn(
        tuple(_number(b, f"{path}.breakpoints[{i}]", True) for i, b in enumerate(obj["breakpoints"])),
        tuple(_number(s, f"{path}.slopes[{i}]") for i, s in enumerate(obj["slopes"])),
        tuple(_number(c, f"{path}.intercepts[{i}]") for i, c in enumerate(obj["intercepts"])),
    )
    return RELU if fn == RELU else fn


def _parse_neuron(obj: Any, kind: str, path: str) -> Neuron:
    _expect(isinstance(obj, dict), path, "expected an object")
    if kind == "mixed":
        kind = obj.get("kind")
        _expect(kind in (WEIGHTED_SUM, ACTIVATION), f"{path}.kind", f"unknown neuron kind {kind!r}")
    name = obj.get("name")
    if kind == WEIGHTED_SUM:
        _expect("bias" in obj, f"{path}.bias", "missing key")
        _expect(isinstance(obj.get("terms"), list), f"{path}.terms", "missing or not a list")
        terms = []
        for t, term in enumerate(obj["terms"]):
            tp = f"{path}.terms[{t}]"
            ref = _ref(term, tp)
            _expect("coeff" in term, f"{tp}.coeff", "missing key")
            terms.append((ref, _number(term["coeff"], f"{tp}.coeff")))
        return Neuron.weighted_sum(_number(obj["bias"], f"{path}.bias"), terms, name=name)
    _expect("source" in obj, f"{path}.source", "missing key")
    _expect("fn" in obj, f"{path}.fn", "missing key")
    return Neuron.activation(_ref(obj["source"], f"{path}.source"),
                             _parse_fn(obj["fn"], f"{path}.fn"), name=name)


def network_from_dict(doc: Any) -> Network:
    _expect(isinstance(doc, dict), "$", "expected a JSON object")
    _expect(isinstance(doc.get("layers"), list), "$.layers", "missing or not a list")
    layers = []
    for li, layer in enumerate(doc["layers"]):
        lp = f"$.layers[{li}]"
        _expect(isinstance(layer, dict), lp, "expected an object")
        kind = layer.get("kind")
        if kind == "input":
            size = _int(layer.get("size"), f"{lp}.size")
            layers.append(tuple(Neuron.input() for _ in range(size)))
            continue
        _expect(kind in (WEIGHTED_SUM, ACTIVATION, "mixed"), f"{lp}.kind", f"unknown layer kind {kind!r}")
        _expect(isinstance(layer.get("neurons"), list), f"{lp}.neurons", "missing or not a list")
        layers.append(tuple(_parse_neuron(n, kind, f"{lp}.neurons[{j}]")
                            for j, n in enumerate(layer["neurons"])))
    name = doc.get("name", "network")
    _expect(isinstance(name, str), "$.name", "expected a string")
    net = Network(tuple(layers), name)
    problems = [p for p in validate(net) if "reference" in p]
    if problems:
        raise ParseError("$.layers", problems[0])
    return net


def parse_network(text: str) -> Network:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError("$", f"invalid JSON: {e}") from None
    return network_from_dict(doc)


def name_neurons(network: Network) -> Network:
    """Give every unnamed non-input neuron a stable ``L<layer>N<index>`` name."""
    layers = tuple(
        tuple(n if n.name is not None or n.kind == INPUT else Neuron(n.kind, n.bias, n.terms, n.source, n.fn,
                                                  f"L{li}N{j}")
              for j, n in enumerate(layer))
        for li, layer in enumerate(network.layers))
    return Network(layers, network.name, dict(network.metadata))


def dense_network(weights: Sequence[np.ndarray], biases: Sequence[np.ndarray],
                  name: str = "network", fn: PiecewiseLinearFn = RELU) -> Network:
    """Alternating weighted-sum / activation network from dense weight matrices.

    ``weights[i]`` has shape (out, in).  An activation layer follows every
    weight layer except the last.
    """
    layers: list[tuple[Neuron, ...]] = [tuple(Neuron.input() for _ in range(weights[0].shape[1]))]
    prev = 0
    for i, (W, b) in enumerate(zip(weights, biases)):
        W = np.asarray(W, dtype=float)
        ws = tuple(Neuron.weighted_sum(b[r], [(NeuronRef(prev, c), W[r, c]) for c in range(W.shape[1])])
                   for r in range(W.shape[0]))
        layers.append(ws)
        ws_layer = len(layers) - 1
        if i < len(weights) - 1:
            layers.append(tuple(Neuron.activation(NeuronRef(ws_layer, r), fn) for r in range(W.shape[0])))
            prev = len(layers) - 1
    return Network(tuple(layers), name)
