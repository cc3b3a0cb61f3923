"""DNN computation graph: JSON ingestion, validation and shape inference.

The graph format is a small documented JSON schema (see README):

    {"inputs":  [{"dims": [3, 32, 32], "precision_bits": 8}],
     "nodes":   [{"id": 0, "kind": "Conv", "attrs": {...}, "inputs": ["in0"]}],
     "outputs": [1]}

Node inputs reference either producer node ids (integers) or graph inputs
("in0", "in1", ...).  Activations are logically (C, H, W); weights are
(K, C, R, S).  Batch is fixed to 1.  Precision defaults to 8 bits.

Graphs are immutable after validation; scheduling passes return separate
annotation records instead of mutating nodes.
"""

from __future__ import annotations

import copy
import heapq
import json
import math
from dataclasses import dataclass, field

from .errors import CycleError, ParseError, ShapeError, UnsupportedOp, ValidationError

CIM_KINDS = ("Conv", "FC")
DIGITAL_KINDS = ("Relu", "MaxPool", "AvgPool", "Add")
OP_KINDS = CIM_KINDS + DIGITAL_KINDS


@dataclass(frozen=True)
class TensorSpec:
    """Shape plus per-element precision of one tensor."""

    dims: tuple
    precision_bits: int = 8

    def __post_init__(self):
        if not self.dims or any((not isinstance(d, int)) or d < 1 for d in self.dims):
            raise ValidationError(f"tensor dims must be positive integers, got {self.dims}")
        if not 1 <= self.precision_bits <= 32:
            raise ValidationError(f"precision_bits must be in 1..32, got {self.precision_bits}")

    @property
    def elems(self) -> int:
        return math.prod(self.dims)

    @property
    def bits(self) -> int:
        return self.elems * self.precision_bits

    def to_json(self):
        return {"dims": list(self.dims), "precision_bits": self.precision_bits}

    @staticmethod
    def from_json(obj) -> "TensorSpec":
        if not isinstance(obj, dict) or "dims" not in obj:
            raise ParseError(f"tensor spec must be an object with 'dims', got {obj!r}")
        return TensorSpec(tuple(obj["dims"]), int(obj.get("precision_bits", 8)))


@dataclass
class OpNode:
    """One operator.  `anno` holds scheduling results added by later passes."""

    id: int
    kind: str
    attrs: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)
    out_spec: TensorSpec | None = None
    anno: dict = field(default_factory=dict)

    @property
    def is_cim(self) -> bool:
        return self.kind in CIM_KINDS

    def weight_spec(self) -> TensorSpec:
        if self.kind == "Conv":
            return self.attrs["kernel"]
        if self.kind == "FC":
            return self.attrs["weight"]
        raise UnsupportedOp(f"node {self.id} ({self.kind}) has no weights")


class CompGraph:
    """Validated, shape-inferred DAG of OpNodes."""

    def __init__(self, inputs, nodes, outputs):
        self.inputs: list[TensorSpec] = list(inputs)
        self.nodes: dict[int, OpNode] = {n.id: n for n in nodes}
        self.outputs: list[int] = list(outputs)
        if len(self.nodes) != len(nodes):
            raise ValidationError("duplicate node ids")
        self._validate_refs()
        self._order = topo_order(self)
        self._infer_shapes()
        self._validate_outputs()

    # -- construction helpers -------------------------------------------------

    def _validate_refs(self):
        for node in self.nodes.values():
            if node.kind not in OP_KINDS:
                raise ValidationError(f"node {node.id}: unknown op kind {node.kind!r}")
            for ref in node.inputs:
                if isinstance(ref, int):
                    if ref not in self.nodes:
                        raise ValidationError(f"node {node.id}: dangling input {ref}")
                elif isinstance(ref, str) and ref.startswith("in"):
                    idx = _graph_input_index(ref)
                    if idx >= len(self.inputs):
                        raise ValidationError(f"node {node.id}: no graph input {ref!r}")
                else:
                    raise ValidationError(f"node {node.id}: bad input reference {ref!r}")

    def _infer_shapes(self):
        for nid in self._order:
            node = self.nodes[nid]
            specs = [self.input_spec_of(ref) for ref in node.inputs]
            node.out_spec = infer_output_shape(node, *specs)

    def _validate_outputs(self):
        for nid in self.outputs:
            if nid not in self.nodes:
                raise ValidationError(f"graph output references missing node {nid}")

    # -- queries ---------------------------------------------------------------

    def input_spec_of(self, ref) -> TensorSpec:
        """Resolve an edge reference to the tensor spec flowing along it."""
        if isinstance(ref, str):
            return self.inputs[_graph_input_index(ref)]
        spec = self.nodes[ref].out_spec
        if spec is None:
            raise ValidationError(f"node {ref} used before its shape was inferred")
        return spec

    def topo(self) -> list[int]:
        return list(self._order)

    def cim_nodes(self) -> list[int]:
        return [nid for nid in self._order if self.nodes[nid].is_cim]

    def consumers(self, nid: int) -> list[int]:
        out = []
        for other in self._order:
            if nid in self.nodes[other].inputs:
                out.append(other)
        return out

    def edges(self):
        """(producer id | 'in<k>', consumer id, TensorSpec) triples."""
        out = []
        for nid in self._order:
            for ref in self.nodes[nid].inputs:
                out.append((ref, nid, self.input_spec_of(ref)))
        return out

    def copy_with_annotations(self, annos: dict) -> "CompGraph":
        """New graph whose nodes carry the given annotation records."""
        g = copy.deepcopy(self)
        for nid, anno in annos.items():
            g.nodes[nid].anno = dict(anno)
        return g

    def to_json(self):
        return {
            "inputs": [t.to_json() for t in self.inputs],
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind,
                    "attrs": _attrs_to_json(n.attrs),
                    "inputs": list(n.inputs),
                }
                for nid, n in sorted(self.nodes.items())
            ],
            "outputs": list(self.outputs),
        }


def _graph_input_index(ref: str) -> int:
    try:
        return int(ref[2:])
    except ValueError:
        raise ValidationError(f"bad graph input reference {ref!r}") from None


def _attrs_to_json(attrs: dict):
    out = {}
    for key, val in attrs.items():
        out[key] = val.to_json() if isinstance(val, TensorSpec) else val
    return out


def _attrs_from_json(kind: str, attrs: dict) -> dict:
    attrs = dict(attrs or {})
    if kind == "Conv":
        if "kernel" not in attrs:
            raise ParseError("Conv node missing 'kernel' attr")
        attrs["kernel"] = TensorSpec.from_json(attrs["kernel"])
        attrs.setdefault("stride", 1)
        attrs.setdefault("padding", 0)
    elif kind == "FC":
        if "weight" not in attrs:
            raise ParseError("FC node missing 'weight' attr")
        attrs["weight"] = TensorSpec.from_json(attrs["weight"])
    elif kind in ("MaxPool", "AvgPool"):
        attrs.setdefault("kernel", 2)
        attrs.setdefault("stride", attrs["kernel"])
    return attrs


def load_graph(path) -> CompGraph:
    """Load, validate and shape-infer a graph from its JSON file."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read graph {path}: {exc}") from exc
    return graph_from_json(doc)


def graph_from_json(doc) -> CompGraph:
    if not isinstance(doc, dict):
        raise ParseError("graph document must be a JSON object")
    for key in ("inputs", "nodes", "outputs"):
        if key not in doc:
            raise ParseError(f"graph document missing {key!r}")
    inputs = [TensorSpec.from_json(t) for t in doc["inputs"]]
    nodes = []
    for item in doc["nodes"]:
        if not isinstance(item, dict) or "id" not in item or "kind" not in item:
            raise ParseError(f"bad node entry {item!r}")
        kind = item["kind"]
        if kind == "MatMul":  # accepted alias
            kind = "FC"
        nodes.append(
            OpNode(
                id=int(item["id"]),
                kind=kind,
                attrs=_attrs_from_json(kind, item.get("attrs", {})),
                inputs=list(item.get("inputs", [])),
            )
        )
    return CompGraph(inputs, nodes, doc["outputs"])


def serialize_graph(graph: CompGraph) -> str:
    return json.dumps(graph.to_json(), indent=2, sort_keys=True)


def infer_output_shape(node: OpNode, *input_specs: TensorSpec) -> TensorSpec:
    """Output tensor spec of one node given its input specs."""
    if node.kind == "Conv":
        (spec,) = input_specs
        if len(spec.dims) != 3:
            raise ShapeError(f"Conv input must be (C,H,W), got {spec.dims}")
        c, h, w = spec.dims
        kern = node.attrs["kernel"]
        if len(kern.dims) != 4:
            raise ShapeError(f"Conv kernel must be (K,C,R,S), got {kern.dims}")
        k, kc, r, s = kern.dims
        if kc != c:
            raise ShapeError(f"Conv channel mismatch: input {c}, kernel {kc}")
        stride, pad = node.attrs["stride"], node.attrs["padding"]
        h_out = (h + 2 * pad - r) // stride + 1
        w_out = (w + 2 * pad - s) // stride + 1
        if h_out < 1 or w_out < 1:
            raise ShapeError(f"kernel {r}x{s} larger than padded input {h}x{w}")
        return TensorSpec((k, h_out, w_out), 8)
    if node.kind == "FC":
        (spec,) = input_specs
        weight = node.attrs["weight"]
        if len(weight.dims) != 2:
            raise ShapeError(f"FC weight must be (out,in), got {weight.dims}")
        out_f, in_f = weight.dims
        if spec.elems != in_f:
            raise ShapeError(f"FC expects {in_f} input elements, got {spec.elems}")
        return TensorSpec((out_f,), 8)
    if node.kind in ("MaxPool", "AvgPool"):
        (spec,) = input_specs
        if len(spec.dims) != 3:
            raise ShapeError(f"{node.kind} input must be (C,H,W), got {spec.dims}")
        c, h, w = spec.dims
        k, stride = node.attrs["kernel"], node.attrs["stride"]
        if k > h or k > w:
            raise ShapeError(f"pool window {k} larger than input {h}x{w}")
        return TensorSpec((c, (h - k) // stride + 1, (w - k) // stride + 1), spec.precision_bits)
    if node.kind == "Relu":
        (spec,) = input_specs
        return spec
    if node.kind == "Add":
        a, b = input_specs
        if a.dims != b.dims:
            raise ShapeError(f"Add operands disagree: {a.dims} vs {b.dims}")
        # 8-bit operands can reach +-2^8; the sum is carried at 32 bits.
        return TensorSpec(a.dims, 32)
    raise ValidationError(f"unknown op kind {node.kind!r}")


def topo_order(graph: CompGraph) -> list[int]:
    """Producer-before-consumer order, ties broken by ascending node id."""
    indeg = {nid: 0 for nid in graph.nodes}
    succs = {nid: [] for nid in graph.nodes}
    for node in graph.nodes.values():
        for ref in node.inputs:
            if isinstance(ref, int):
                indeg[node.id] += 1
                succs[ref].append(node.id)
    ready = [nid for nid, deg in sorted(indeg.items()) if deg == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for succ in succs[nid]:
            indeg[succ] -= 1
            if indeg[succ] == 0:
                heapq.heappush(ready, succ)
    if len(order) != len(graph.nodes):
        raise CycleError("computation graph contains a cycle")
    return order
