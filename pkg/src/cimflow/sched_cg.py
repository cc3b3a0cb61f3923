"""Computation-graph-grained optimization for core mode.

Three passes:

* cg_duplicate -- dynamic program choosing per-operator duplication so the
  pipeline initiation interval II = max_i ceil(work_i / D_i) is minimal under
  the chip core budget.  Deterministic tie-breaks: smaller total cores, then
  extra replicas go to the smaller node id.
* balance_pipeline -- lowers duplication wherever the implied output traffic
  or a digital successor would outrun the L0 bandwidth / NoC / ALU.
* segment_graph -- splits a model that exceeds chip capacity into subgraphs,
  popping trailing nodes while the DP interval keeps improving, and charges
  crossbar reprogramming cycles at each boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .arch import HwSpec, cycles_per_mvm
from .errors import CapacityError
from .graph import CompGraph, OpNode
from .lowering import DEFAULT_BINDING, mvm_count, vxb_plan, weight_matrix_of


def digital_element_ops(node: OpNode) -> int:
    """ALU operations a digital node performs over its whole output."""
    out = node.out_spec.elems
    if node.kind in ("MaxPool", "AvgPool"):
        k = node.attrs["kernel"]
        return out * k * k
    return out  # Relu, Add: one op per element


def node_work(node: OpNode, hw: HwSpec, graph: CompGraph) -> int:
    """Total cycles one un-duplicated instance of the node needs.

    CIM nodes: every sliding window activates each vertical tile of the
    weight matrix once (horizontal tiles and bit planes fire in parallel).
    Digital nodes: element ops over the ALU width; an unbounded ALU is free.
    """
    if node.is_cim:
        wm = weight_matrix_of(node, hw, DEFAULT_BINDING)
        plan = vxb_plan(wm, hw)
        in_bits = graph.input_spec_of(node.inputs[0]).precision_bits
        per_window = sum(cycles_per_mvm(hw, rows, in_bits) for rows in plan.row_tiles)
        return mvm_count(node) * per_window
    alu = hw.chip.alu_ops_per_cycle
    if alu is None:
        return 0
    return math.ceil(digital_element_ops(node) / alu)


@dataclass
class DupAssignment:
    """Per-node duplication and core placement decided at CG level."""

    D: dict = field(default_factory=dict)
    cores_per_replica: dict = field(default_factory=dict)
    core_ids: dict = field(default_factory=dict)
    work: dict = field(default_factory=dict)
    initiation_interval: int = 0

    def total_cores(self) -> int:
        return sum(len(v) for v in self.core_ids.values())

    def stage_cycles(self, nid: int) -> int:
        """Per-replica time of a node at its assigned duplication."""
        return math.ceil(self.work[nid] / self.D[nid]) if self.D[nid] > 1 else self.work[nid]

    def to_json(self):
        return {
            "initiation_interval": self.initiation_interval,
            "nodes": {
                str(n): {
                    "D": self.D[n],
                    "cores_per_replica": self.cores_per_replica[n],
                    "core_ids": self.core_ids[n],
                    "work_cycles": self.work[n],
                }
                for n in sorted(self.D)
            },
        }


def _min_ii(works, costs, budget, max_ds):
    """Minimize max_i ceil(w_i/d_i) s.t. sum d_i*c_i <= budget, 1 <= d_i <= max_d_i.

    The constraint separates per node: an interval II is feasible iff every
    node can reach it within its replica cap and the per-node minimal
    replica counts fit the budget.  Feasibility is monotone in II, so the
    optimum falls to a binary search.  d_i = ceil(w_i / II*) is then the
    unique minimal-cores optimal assignment (any smaller d_i violates II*,
    any larger one only spends cores).
    """
    if not works:
        return 0, []
    if sum(costs) > budget:
        raise CapacityError("graph does not fit the core budget even at D=1")

    def d_for(w, md, ii):
        return min(md, max(1, math.ceil(w / ii)))

    def feasible(ii):
        total = 0
        for w, c, md in zip(works, costs, max_ds):
            d = d_for(w, md, ii)
            if math.ceil(w / d) > ii:
                return False
            total += c * d
        return total <= budget

    lo = max(math.ceil(w / md) for w, md in zip(works, max_ds))
    hi = max(max(works), lo)
    while lo < hi:
        mid = (lo + hi) // 2
        if feasible(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo, [d_for(w, md, lo) for w, md in zip(works, max_ds)]


def cores_per_replica_of(node: OpNode, hw: HwSpec) -> int:
    plan = vxb_plan(weight_matrix_of(node, hw, DEFAULT_BINDING), hw)
    return plan.cores_per_replica


def cg_duplicate(graph: CompGraph, hw: HwSpec, node_ids=None) -> DupAssignment:
    """Duplication DP over the given nodes (whole graph by default)."""
    node_ids = list(node_ids) if node_ids is not None else graph.topo()
    cim = sorted(n for n in node_ids if graph.nodes[n].is_cim)
    works = {n: node_work(graph.nodes[n], hw, graph) for n in node_ids}
    costs = {n: cores_per_replica_of(graph.nodes[n], hw) for n in cim}
    budget = hw.chip.core_number
    if sum(costs.values()) > budget:
        raise CapacityError(
            f"nodes {cim} need {sum(costs.values())} cores at D=1; chip has {budget}"
        )
    max_ds = {n: mvm_count(graph.nodes[n]) for n in cim}
    ii, ds = _min_ii(
        [works[n] for n in cim], [costs[n] for n in cim], budget, [max_ds[n] for n in cim]
    )
    dup = DupAssignment(initiation_interval=ii)
    next_core = 0
    for nid in node_ids:
        node = graph.nodes[nid]
        dup.work[nid] = works[nid]
        if not node.is_cim:
            dup.D[nid] = 1
            dup.cores_per_replica[nid] = 0
            dup.core_ids[nid] = []
            continue
        d = ds[cim.index(nid)]
        cpr = costs[nid]
        dup.D[nid] = d
        dup.cores_per_replica[nid] = cpr
        dup.core_ids[nid] = list(range(next_core, next_core + d * cpr))
        next_core += d * cpr
    return dup


def balance_pipeline(graph: CompGraph, dup: DupAssignment, hw: HwSpec) -> DupAssignment:
    """Lower duplication where data movement or digital successors lag.

    For each CIM node with stage time T(d) = ceil(work/d), keep the largest
    d <= D such that T(d) covers: the node's output transfer over L0
    bandwidth, its NoC cost, and every digital successor's ALU time.
    Ideal (unbounded) resources impose nothing.
    """
    out = DupAssignment(
        D=dict(dup.D),
        cores_per_replica=dict(dup.cores_per_replica),
        core_ids={k: list(v) for k, v in dup.core_ids.items()},
        work=dict(dup.work),
        initiation_interval=dup.initiation_interval,
    )
    chip = hw.chip
    next_core = 0
    for nid in graph.topo():
        node = graph.nodes[nid]
        if not node.is_cim:
            continue
        floor_cycles = 0
        out_bits = node.out_spec.bits
        if chip.l0_bw_bits_per_cycle is not None:
            floor_cycles = max(floor_cycles, math.ceil(out_bits / chip.l0_bw_bits_per_cycle))
        if chip.noc_cost_cycles_per_bit:
            floor_cycles = max(floor_cycles, math.ceil(out_bits * chip.noc_cost_cycles_per_bit))
        if chip.alu_ops_per_cycle is not None:
            for succ in graph.consumers(nid):
                snode = graph.nodes[succ]
                if not snode.is_cim:
                    floor_cycles = max(
                        floor_cycles,
                        math.ceil(digital_element_ops(snode) / chip.alu_ops_per_cycle),
                    )
        d = out.D[nid]
        work = out.work[nid]
        while d > 1 and math.ceil(work / d) < floor_cycles:
            d -= 1
        out.D[nid] = d
        out.core_ids[nid] = list(range(next_core, next_core + d * out.cores_per_replica[nid]))
        next_core += d * out.cores_per_replica[nid]
    out.initiation_interval = max(
        (math.ceil(out.work[n] / out.D[n]) for n in out.D if graph.nodes[n].is_cim),
        default=0,
    )
    return out


@dataclass
class SubgraphPlan:
    """Partition of the graph into chip-sized pieces with reprogram costs."""

    subgraphs: list  # list of node-id lists, topo order
    assignments: list  # DupAssignment per subgraph
    boundary_cycles: list  # reprogram cost entering subgraph i (0 for the first)

    def total_latency(self, graph: CompGraph) -> int:
        total = sum(self.boundary_cycles)
        for nodes, dup in zip(self.subgraphs, self.assignments):
            total += _sequential_latency(nodes, dup)
        return total

    def to_json(self):
        return {
            "subgraphs": [list(s) for s in self.subgraphs],
            "boundary_cycles": list(self.boundary_cycles),
            "assignments": [a.to_json() for a in self.assignments],
        }


def _sequential_latency(node_ids, dup: DupAssignment) -> int:
    """Core-mode model latency: stages execute in sequence."""
    return sum(dup.stage_cycles(n) for n in node_ids)


def reprogram_cycles(graph: CompGraph, hw: HwSpec, node_ids, dup: DupAssignment) -> int:
    """Cycles to write the subgraph's weights into crossbars."""
    total_rows = 0
    for nid in node_ids:
        node = graph.nodes[nid]
        if not node.is_cim:
            continue
        plan = vxb_plan(weight_matrix_of(node, hw, DEFAULT_BINDING), hw)
        rows_per_replica = sum(plan.row_tiles) * plan.h_tiles * plan.bit_planes
        total_rows += rows_per_replica * dup.D[nid]
    return total_rows * hw.xbar.write_cycles


def _fits(graph: CompGraph, hw: HwSpec, node_ids) -> bool:
    need = sum(
        cores_per_replica_of(graph.nodes[n], hw) for n in node_ids if graph.nodes[n].is_cim
    )
    if need > hw.chip.core_number:
        return False
    if hw.chip.l0_size_bits is not None:
        # working set: graph inputs plus every intermediate produced so far
        bits = sum(graph.nodes[n].out_spec.bits for n in node_ids)
        bits += sum(t.bits for t in graph.inputs)
        if bits > hw.chip.l0_size_bits:
            return False
    return True


def _greedy_segments(graph: CompGraph, hw: HwSpec, pop: bool):
    order = graph.topo()
    segments = []
    current = []
    idx = 0
    while idx < len(order):
        nid = order[idx]
        if not _fits(graph, hw, current + [nid]):
            if not current:
                raise CapacityError(f"node {nid} alone exceeds chip capacity")
            if pop:
                current = _pop_refine(graph, hw, current, segments)
            segments.append(current)
            current = []
            continue
        current.append(nid)
        idx += 1
    if current:
        if pop and idx < len(order):
            current = _pop_refine(graph, hw, current, segments)
        segments.append(current)
    # re-walk: popped nodes must re-enter following segments in topo order
    covered = [n for seg in segments for n in seg]
    missing = [n for n in order if n not in covered]
    while missing:
        seg = []
        for nid in missing:
            if _fits(graph, hw, seg + [nid]):
                seg.append(nid)
            else:
                break
        if not seg:
            raise CapacityError(f"node {missing[0]} alone exceeds chip capacity")
        segments.append(seg)
        missing = missing[len(seg):]
    return segments


def _pop_refine(graph: CompGraph, hw: HwSpec, seg, _done):
    """Pop trailing nodes while the DP initiation interval improves."""
    best = list(seg)
    best_ii = cg_duplicate(graph, hw, best).initiation_interval
    while len(best) > 1:
        candidate = best[:-1]
        ii = cg_duplicate(graph, hw, candidate).initiation_interval
        if ii < best_ii:
            best, best_ii = candidate, ii
        else:
            break
    return best


def segment_graph(graph: CompGraph, hw: HwSpec) -> SubgraphPlan:
    """Partition the graph so every subgraph fits the chip at D=1.

    Builds both the pop-refined plan and the plain greedy plan and returns
    whichever has the lower modelled latency (reprogramming included), so
    popping can never lose to the naive split.
    """
    plans = []
    for pop in (True, False):
        segments = _greedy_segments(graph, hw, pop)
        assignments = [
            balance_pipeline(graph, cg_duplicate(graph, hw, seg), hw) for seg in segments
        ]
        boundaries = [0]
        for seg, dup in zip(segments[1:], assignments[1:]):
            boundaries.append(reprogram_cycles(graph, hw, seg, dup))
        plans.append(SubgraphPlan(segments, assignments, boundaries))
        if len(segments) == 1:
            return plans[0]  # whole graph fits; nothing to compare
    return min(plans, key=lambda p: p.total_latency(graph))
