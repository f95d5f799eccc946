"""Network descriptors: layers and connections declared independently.

A descriptor is a named set of layer specs plus directed edges between them.
It can be validated as a single-source, single-sink DAG, measured (trainable
parameter count) and compiled into an executable :class:`Network`. Layers
with several inbound edges receive their inputs concatenated on the channel
(or feature) axis, in edge-declaration order.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from nasf import engine


class DescriptorError(ValueError):
    pass


class DeclarationError(DescriptorError):
    """Duplicate layer name or duplicate connection."""


class UnknownLayerError(DescriptorError):
    """A connection names a layer that was never added."""


class CompileError(DescriptorError):
    """Shape inference or graph structure prevents building a network."""


class LayerKind(str, Enum):
    CONV2D = "conv2d"
    DENSE = "dense"
    RELU = "relu"
    FLATTEN = "flatten"


# required and optional integer parameters per kind
_PARAMS = {
    LayerKind.CONV2D: ({"out_channels", "kernel"}, {"in_channels"}),
    LayerKind.DENSE: ({"out_features"}, {"in_features"}),
    LayerKind.RELU: (set(), set()),
    LayerKind.FLATTEN: (set(), set()),
}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: LayerKind
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind.value, "params": dict(self.params)}


def _check_params(kind: LayerKind, params: dict) -> dict:
    required, optional = _PARAMS[kind]
    missing = required - params.keys()
    unknown = params.keys() - required - optional
    if missing:
        raise DeclarationError(f"{kind.value} needs parameters {sorted(missing)}")
    if unknown:
        raise DeclarationError(f"{kind.value} does not take parameters {sorted(unknown)}")
    out = {}
    for key, value in params.items():
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
            raise DeclarationError(f"{kind.value} parameter {key} must be a positive integer, got {value!r}")
        out[key] = int(value)
    return out


@dataclass
class ValidationReport:
    valid: bool
    errors: list[str]
    order: list[str] | None = None
    source: str | None = None
    sink: str | None = None

    def __bool__(self):
        return self.valid


class Descriptor:
    """Mutable network declaration. Treat as read-only once validated."""

    def __init__(self):
        self.layers: dict[str, LayerSpec] = {}
        self.connections: list[tuple[str, str]] = []
        self._sequential_counter = 0
        self._last_added: str | None = None

    def __repr__(self):
        return f"Descriptor(layers={list(self.layers)}, connections={self.connections})"

    def __eq__(self, other):
        if not isinstance(other, Descriptor):
            return NotImplemented
        return (list(self.layers.values()) == list(other.layers.values())
                and self.connections == other.connections)

    @property
    def insertion_order(self) -> list[str]:
        return list(self.layers)

    def add_layer(self, kind, params: dict | None = None, name: str | None = None) -> str:
        kind = LayerKind(kind)
        if not name or not isinstance(name, str):
            raise DeclarationError("layer name must be a non-empty string")
        if name in self.layers:
            raise DeclarationError(f"layer {name!r} already declared")
        self.layers[name] = LayerSpec(name, kind, _check_params(kind, dict(params or {})))
        self._last_added = name
        return name

    def connect(self, source: str, target: str) -> None:
        for name in (source, target):
            if name not in self.layers:
                raise UnknownLayerError(f"no layer named {name!r}")
        if (source, target) in self.connections:
            raise DeclarationError(f"connection {source!r} -> {target!r} already declared")
        self.connections.append((source, target))

    def add_layer_sequential(self, kind, params: dict | None = None) -> str:
        """Add an auto-named layer wired after the previously added one."""
        kind = LayerKind(kind)
        previous = self._last_added
        while True:
            name = f"{kind.value}_{self._sequential_counter}"
            self._sequential_counter += 1
            if name not in self.layers:
                break
        self.add_layer(kind, params, name)
        if previous is not None:
            self.connect(previous, name)
        return name

    # ---- structure -------------------------------------------------------

    def predecessors(self, name: str) -> list[str]:
        return [a for a, b in self.connections if b == name]

    def successors(self, name: str) -> list[str]:
        return [b for a, b in self.connections if a == name]

    def validate(self) -> ValidationReport:
        errors = []
        names = list(self.layers)
        if not names:
            return ValidationReport(False, ["descriptor has no layers"])
        indegree = {n: 0 for n in names}
        for _, b in self.connections:
            indegree[b] += 1
        # Kahn's algorithm, ties broken by insertion order
        ready = deque(n for n in names if indegree[n] == 0)
        remaining = dict(indegree)
        order = []
        while ready:
            node = ready.popleft()
            order.append(node)
            for nxt in self.successors(node):
                remaining[nxt] -= 1
                if remaining[nxt] == 0:
                    ready.append(nxt)
        if len(order) != len(names):
            stuck = [n for n in names if n not in order]
            errors.append(f"cycle through layers {stuck}")
        sources = [n for n in names if indegree[n] == 0]
        sinks = [n for n in names if not self.successors(n)]
        if len(sources) != 1:
            errors.append(f"expected exactly one source layer, found {sources}")
        if len(sinks) != 1:
            errors.append(f"expected exactly one sink layer, found {sinks}")
        if len(sources) == 1:
            seen = _reachable(sources[0], self.successors)
            unreachable = [n for n in names if n not in seen]
            if unreachable:
                errors.append(f"layers unreachable from source {sources[0]!r}: {unreachable}")
        if len(sinks) == 1:
            seen = _reachable(sinks[0], self.predecessors)
            dead = [n for n in names if n not in seen]
            if dead:
                errors.append(f"layers that never reach sink {sinks[0]!r}: {dead}")
        if errors:
            return ValidationReport(False, errors)
        return ValidationReport(True, [], order, sources[0], sinks[0])

    # ---- shapes and parameters ------------------------------------------

    def infer_shapes(self, input_shape) -> dict[str, tuple[tuple[int, ...], tuple[int, ...]]]:
        """Map each layer to its (input_shape, output_shape)."""
        report = self.validate()
        if not report:
            raise CompileError("invalid descriptor: " + "; ".join(report.errors))
        shapes = {}
        for name in report.order:
            preds = self.predecessors(name)
            if not preds:
                in_shape = tuple(int(d) for d in input_shape)
            else:
                in_shape = _merge_shapes(name, [shapes[p][1] for p in preds])
            shapes[name] = (in_shape, _layer_output_shape(self.layers[name], in_shape))
        return shapes

    def count_parameters(self, input_shape) -> int:
        total = 0
        for name, (in_shape, out_shape) in self.infer_shapes(input_shape).items():
            kind = self.layers[name].kind
            if kind is LayerKind.CONV2D:
                k = self.layers[name].params["kernel"]
                total += out_shape[0] * (in_shape[0] * k * k + 1)
            elif kind is LayerKind.DENSE:
                total += out_shape[0] * (in_shape[0] + 1)
        return total

    def compile(self, input_shape, seed: int = 0) -> "Network":
        shapes = self.infer_shapes(input_shape)
        order = self.validate().order
        rng = np.random.default_rng(seed)
        layers = {}
        for name in order:
            spec = self.layers[name]
            in_shape = shapes[name][0]
            if spec.kind is LayerKind.CONV2D:
                layers[name] = engine.Conv2d(in_shape[0], spec.params["out_channels"],
                                             spec.params["kernel"], rng)
            elif spec.kind is LayerKind.DENSE:
                layers[name] = engine.Dense(in_shape[0], spec.params["out_features"], rng)
            elif spec.kind is LayerKind.RELU:
                layers[name] = engine.ReLU()
            else:
                layers[name] = engine.Flatten()
        preds = {name: self.predecessors(name) for name in order}
        return Network(order, layers, preds, tuple(int(d) for d in input_shape),
                       {n: shapes[n][1] for n in order})

    # ---- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {"layers": [spec.to_dict() for spec in self.layers.values()],
                "connections": [[a, b] for a, b in self.connections]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, doc: dict) -> "Descriptor":
        if not isinstance(doc, dict) or set(doc) != {"layers", "connections"}:
            raise DescriptorError("descriptor document needs exactly 'layers' and 'connections'")
        desc = cls()
        for entry in doc["layers"]:
            desc.add_layer(entry["kind"], entry.get("params", {}), entry["name"])
        for pair in doc["connections"]:
            if len(pair) != 2:
                raise DescriptorError(f"connection must be [from, to], got {pair!r}")
            desc.connect(pair[0], pair[1])
        return desc

    @classmethod
    def from_json(cls, text: str) -> "Descriptor":
        return cls.from_dict(json.loads(text))


def _reachable(start: str, neighbours) -> set[str]:
    seen = {start}
    stack = [start]
    while stack:
        for nxt in neighbours(stack.pop()):
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def _merge_shapes(name: str, shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    if len(shapes) == 1:
        return shapes[0]
    ranks = {len(s) for s in shapes}
    if len(ranks) != 1:
        raise CompileError(f"layer {name!r} merges inputs of different ranks: {shapes}")
    if ranks == {3}:
        spatial = {s[1:] for s in shapes}
        if len(spatial) != 1:
            raise CompileError(f"layer {name!r} merges mismatched spatial sizes: {shapes}")
        return (sum(s[0] for s in shapes),) + shapes[0][1:]
    if ranks == {1}:
        return (sum(s[0] for s in shapes),)
    raise CompileError(f"layer {name!r} cannot merge inputs of shape {shapes}")


def _layer_output_shape(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    p = spec.params
    if spec.kind is LayerKind.CONV2D:
        if len(in_shape) != 3:
            raise CompileError(f"conv2d {spec.name!r} needs a [C,H,W] input, got {in_shape}")
        if "in_channels" in p and p["in_channels"] != in_shape[0]:
            raise CompileError(f"conv2d {spec.name!r} declares {p['in_channels']} input "
                               f"channels but receives {in_shape[0]}")
        return (p["out_channels"],) + in_shape[1:]
    if spec.kind is LayerKind.DENSE:
        if len(in_shape) != 1:
            raise CompileError(f"dense {spec.name!r} fed non-flattened input of shape {in_shape}")
        if "in_features" in p and p["in_features"] != in_shape[0]:
            raise CompileError(f"dense {spec.name!r} declares {p['in_features']} input "
                               f"features but receives {in_shape[0]}")
        return (p["out_features"],)
    if spec.kind is LayerKind.FLATTEN:
        return (int(np.prod(in_shape)),)
    return in_shape


class Network:
    """Executable graph compiled from a descriptor.

    Confined to one thread at a time: layers cache forward inputs.
    """

    def __init__(self, order, layers, predecessors, input_shape, output_shapes):
        self.order = list(order)
        self.layers = layers
        self.predecessors = predecessors
        self.input_shape = input_shape
        self.output_shapes = output_shapes
        self._split = {}
        for name in self.order:
            preds = predecessors[name]
            if len(preds) > 1:
                self._split[name] = [output_shapes[p][0] for p in preds]

    @property
    def states(self) -> list[engine.LayerState]:
        """Parameter states in topological order."""
        return [self.layers[n].state for n in self.order if self.layers[n].state is not None]

    def parameter_count(self) -> int:
        return sum(s.size for s in self.states)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=engine.DTYPE)
        if x.shape[1:] != self.input_shape:
            raise engine.ShapeError(f"network expects [N,{self.input_shape}] input, got {x.shape}")
        outputs = {}
        for name in self.order:
            preds = self.predecessors[name]
            if not preds:
                inp = x
            elif len(preds) == 1:
                inp = outputs[preds[0]]
            else:
                inp = np.concatenate([outputs[p] for p in preds], axis=1)
            outputs[name] = self.layers[name].forward(inp)
        return outputs[self.order[-1]]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        """Backpropagate the sink gradient; return the gradient w.r.t. the input."""
        grads = {self.order[-1]: grad}
        input_grad = None
        for name in reversed(self.order):
            g = self.layers[name].backward(grads.pop(name))
            preds = self.predecessors[name]
            if not preds:
                input_grad = g
                continue
            parts = [g] if len(preds) == 1 else np.split(g, np.cumsum(self._split[name])[:-1], axis=1)
            for p, part in zip(preds, parts):
                grads[p] = grads[p] + part if p in grads else part
        return input_grad

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        preds = [np.argmax(self.forward(x[i:i + batch_size]), axis=1)
                 for i in range(0, len(x), batch_size)]
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
