"""MVM-grained optimization for crossbar mode.

Duplication is refined from cores to virtual crossbars (VXBs):

    D' = floor(cores_per_replica * D * core_vxb / num_vxb), at least D.

The crossbar-activation pipeline then schedules every (replica, window,
vertical-tile) unit.  Two policies:

* traditional -- a replica fires all of its crossbars together once the
  window's whole input vector is ready;
* staged -- each vertical tile fires as soon as its own row slice of the
  input is ready, which staggers activations and lowers the number of
  crossbars lit at once.

The schedule is deterministic and drives both code emission order and the
peak-active accounting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .arch import HwSpec, cycles_per_mvm
from .errors import CapacityError
from .graph import CompGraph
from .lowering import DEFAULT_BINDING, VxbPlan, mvm_count, vxb_plan, weight_matrix_of
from .sched_cg import DupAssignment, digital_element_ops


def mvm_duplicate(cores_per_replica: int, d: int, core_vxb: int, num_vxb: int) -> int:
    """Refined duplication per the VXB-count relation, never below D."""
    return max(d, (cores_per_replica * d * core_vxb) // num_vxb)


def refine_duplication(graph: CompGraph, dup: DupAssignment, hw: HwSpec) -> dict:
    """D' for every CIM node covered by the CG assignment."""
    refined = {}
    for nid in (n for n in graph.cim_nodes() if n in dup.D):
        plan = vxb_plan(weight_matrix_of(graph.nodes[nid], hw, DEFAULT_BINDING), hw)
        if plan.core_vxb < 1 and plan.cores_per_replica <= 1:
            raise CapacityError(f"node {nid}: VXB does not fit a core")
        d_ref = mvm_duplicate(
            dup.cores_per_replica[nid], dup.D[nid], plan.core_vxb, plan.num_vxb
        )
        windows = mvm_count(graph.nodes[nid])
        refined[nid] = min(max(d_ref, dup.D[nid]), max(windows, dup.D[nid]))
    return refined


# -- placement ----------------------------------------------------------------


def replica_crossbars(cores, plan: VxbPlan, hw: HwSpec, replica: int):
    """(core, xb) pairs of one replica, tile order (v, h, plane)."""
    xpv = plan.xbars_per_vxb
    if plan.core_vxb >= 1:
        core = cores[replica // plan.core_vxb]
        slot = replica % plan.core_vxb
        return [(core, slot * xpv + t) for t in range(xpv)]
    span = plan.cores_per_replica
    sub = cores[replica * span:(replica + 1) * span]
    return [(sub[t // hw.core.xb_number], t % hw.core.xb_number) for t in range(xpv)]


def tile_index(plan: VxbPlan, v: int, h: int, plane: int) -> int:
    return (v * plan.h_tiles + h) * plan.bit_planes + plane


def vtile_crossbars(xbars, plan: VxbPlan, v: int):
    """Crossbars of one vertical tile: all its h tiles and bit planes."""
    return [xbars[tile_index(plan, v, h, p)]
            for h in range(plan.h_tiles) for p in range(plan.bit_planes)]


def band_ranges(windows: int, d: int):
    """Contiguous window ranges of the D output bands."""
    return [(windows * b // d, windows * (b + 1) // d) for b in range(d)]


def assign_windows(windows: int, d_cg: int, units: int):
    """Window id -> owning replica, CG bands split round-robin.

    Replicas are dealt to bands as evenly as possible; when there are fewer
    replicas than bands, bands share replicas round-robin.
    """
    owner = [0] * windows
    if units >= d_cg:
        counts = [units // d_cg + (1 if b < units % d_cg else 0) for b in range(d_cg)]
        first = [sum(counts[:b]) for b in range(d_cg)]
        for b, (lo, hi) in enumerate(band_ranges(windows, d_cg)):
            for i, w in enumerate(range(lo, hi)):
                owner[w] = first[b] + i % counts[b]
    else:
        for b, (lo, hi) in enumerate(band_ranges(windows, d_cg)):
            unit = b % units
            for w in range(lo, hi):
                owner[w] = unit
    return owner


# -- input availability --------------------------------------------------------


class AvailabilityModel:
    """When is each element of a node's input tensor produced?

    Walks elementwise digital nodes (Relu) back to the CIM producer so window
    outputs stream through them; Pool/Add act as barriers (their output is
    available only when fully computed).  Graph inputs are ready at cycle 0.
    """

    def __init__(self, graph: CompGraph, hw: HwSpec):
        self.graph = graph
        self.hw = hw
        self.window_done: dict = {}  # (nid, window) -> cycle
        self.node_done: dict = {}  # nid -> cycle

    def record(self, nid: int, window: int, cycle: int):
        self.window_done[(nid, window)] = cycle
        self.node_done[nid] = max(self.node_done.get(nid, 0), cycle)

    def finish_digital(self, nid: int):
        """Barrier completion time of a digital node (ideal ALU: free)."""
        node = self.graph.nodes[nid]
        start = max((self._ref_done(ref) for ref in node.inputs), default=0)
        alu = self.hw.chip.alu_ops_per_cycle
        cost = 0 if alu is None else math.ceil(digital_element_ops(node) / alu)
        self.node_done[nid] = start + cost

    def _ref_done(self, ref) -> int:
        if isinstance(ref, str):
            return 0
        return self.node_done.get(ref, 0)

    def _trace(self, ref):
        """Resolve an edge to (kind, id, streams) crossing elementwise nodes."""
        streams = True
        while isinstance(ref, int):
            node = self.graph.nodes[ref]
            if node.is_cim:
                return "node", ref, streams
            if node.kind == "Relu":
                ref = node.inputs[0]
                continue
            return "barrier", ref, False
        return "input", ref, False

    def element_time(self, ref, c: int, h: int, w: int) -> int:
        """Cycle when element (c, h, w) of the tensor on edge `ref` exists."""
        kind, src, _ = self._trace(ref)
        if kind == "input":
            return 0
        if kind == "barrier":
            return self.node_done.get(src, 0)
        dims = self.graph.nodes[src].out_spec.dims
        window = h * dims[2] + w
        return self.window_done.get((src, window), 0)

    def slice_time(self, node, row_lo: int, row_hi: int, window: int) -> int:
        """Readiness of matrix rows [row_lo, row_hi) of one window's vector."""
        ref = node.inputs[0]
        spec = self.graph.input_spec_of(ref)
        t = 0
        if node.kind == "FC":
            w_dim, c_dim = (spec.dims[2], spec.dims[0]) if len(spec.dims) == 3 else (1, 1)
            for row in range(row_lo, row_hi):
                if len(spec.dims) == 3:
                    h, rem = divmod(row, w_dim * c_dim)
                    w, c = divmod(rem, c_dim)
                    t = max(t, self.element_time(ref, c, h, w))
                else:
                    t = max(t, self.element_time(ref, row, 0, 0))
            return t
        c_in, _, w_in = spec.dims
        kern = node.attrs["kernel"].dims
        _, _, taps_r, taps_s = kern
        stride, pad = node.attrs["stride"], node.attrs["padding"]
        w_out = node.out_spec.dims[2]
        oh, ow = divmod(window, w_out)
        for row in range(row_lo, row_hi):
            rs, c = divmod(row, c_in)
            r, s = divmod(rs, taps_s)
            ih = oh * stride - pad + r
            iw = ow * stride - pad + s
            if 0 <= ih < spec.dims[1] and 0 <= iw < w_in:
                t = max(t, self.element_time(ref, c, ih, iw))
        return t


# -- the schedule ---------------------------------------------------------------


@dataclass(frozen=True)
class Activation:
    """One firing: a set of crossbars working [start, end) on one window."""

    node: int
    replica: int
    vtile: int
    window: int
    start: int
    end: int
    crossbars: tuple
    slice_rows: tuple  # (row_lo, row_hi) of the weight matrix covered
    slice_bits: int
    group_reads: tuple = ()  # WLM: (xb_index_in_crossbars, row_lo, row_hi) per group


@dataclass
class VxbSchedule:
    """Deterministic activation timeline for one compiled graph."""

    policy: str
    activations: list = field(default_factory=list)
    window_done: dict = field(default_factory=dict)
    makespan: int = 0
    dups: dict = field(default_factory=dict)

    def peak_and_trace(self):
        events = []
        for act in self.activations:
            if act.start == act.end:
                continue
            events.append((act.start, len(act.crossbars)))
            events.append((act.end, -len(act.crossbars)))
        events.sort()
        peak = level = 0
        trace = []
        for cycle, delta in events:
            level += delta
            trace.append((cycle, level))
            peak = max(peak, level)
        return peak, trace

    def to_json(self):
        return {
            "policy": self.policy,
            "makespan": self.makespan,
            "duplication": {str(k): v for k, v in sorted(self.dups.items())},
            "activations": [
                {
                    "node": a.node,
                    "replica": a.replica,
                    "vtile": a.vtile,
                    "window": a.window,
                    "start": a.start,
                    "end": a.end,
                    "crossbars": [list(x) for x in a.crossbars],
                    "rows": list(a.slice_rows),
                }
                for a in self.activations
            ],
        }


def peak_active(schedule: VxbSchedule) -> int:
    """Most crossbars lit in any single cycle."""
    return schedule.peak_and_trace()[0]


@dataclass(frozen=True)
class NodeUnits:
    """Firing units of one node: per replica, the per-vtile crossbar sets."""

    nid: int
    plan: VxbPlan
    units: tuple  # units[replica][vtile] -> (crossbars, duration, groups)
    owner: tuple  # window id -> replica


def _xbm_units(graph, hw, dup, refined):
    out = {}
    for nid in (n for n in graph.cim_nodes() if n in refined):
        node = graph.nodes[nid]
        plan = vxb_plan(weight_matrix_of(node, hw, DEFAULT_BINDING), hw)
        in_bits = graph.input_spec_of(node.inputs[0]).precision_bits
        d_ref = refined[nid]
        cores = dup.core_ids[nid]
        need_cores = (
            math.ceil(d_ref / plan.core_vxb) if plan.core_vxb >= 1
            else d_ref * plan.cores_per_replica
        )
        if need_cores > len(cores):
            raise CapacityError(f"node {nid}: D'={d_ref} exceeds granted cores")
        units = []
        for r in range(d_ref):
            xbars = replica_crossbars(cores, plan, hw, r)
            per_vtile = []
            for v, rows in enumerate(plan.row_tiles):
                per_vtile.append(
                    (
                        tuple(vtile_crossbars(xbars, plan, v)),
                        cycles_per_mvm(hw, rows, in_bits),
                        (),
                    )
                )
            units.append(tuple(per_vtile))
        owner = assign_windows(mvm_count(node), dup.D[nid], d_ref)
        out[nid] = NodeUnits(nid, plan, tuple(units), tuple(owner))
    return out


def run_pipeline(graph: CompGraph, hw: HwSpec, node_units: dict, *, staged: bool) -> VxbSchedule:
    """Event-driven schedule over prepared node units.

    Nodes are processed in topological order (they own disjoint crossbars,
    so cross-node resource conflicts cannot arise); inside a node each
    replica walks its windows in ascending id.
    """
    avail = AvailabilityModel(graph, hw)
    sched = VxbSchedule(policy="staged" if staged else "traditional")
    row_offsets = {}
    for nid, nu in node_units.items():
        offs, total = [], 0
        for rows in nu.plan.row_tiles:
            offs.append((total, total + rows))
            total += rows
        row_offsets[nid] = offs
        sched.dups[nid] = len(nu.units)

    for nid in graph.topo():
        node = graph.nodes[nid]
        if not node.is_cim:
            avail.finish_digital(nid)
            continue
        if nid not in node_units:  # scheduled in another subgraph
            continue
        nu = node_units[nid]
        in_bits = graph.input_spec_of(node.inputs[0]).precision_bits
        xbar_free = {}
        windows_of = {r: [] for r in range(len(nu.units))}
        for w, r in enumerate(nu.owner):
            windows_of[r].append(w)
        acts = []
        for r, wins in windows_of.items():
            for w in wins:
                starts_ends = []
                if staged:
                    for v, (xbars, dur, groups) in enumerate(nu.units[r]):
                        lo, hi = row_offsets[nid][v]
                        ready = avail.slice_time(node, lo, hi, w)
                        start = max(
                            ready, max((xbar_free.get(x, 0) for x in xbars), default=0)
                        )
                        end = start + dur
                        for x in xbars:
                            xbar_free[x] = end
                        acts.append(
                            Activation(
                                nid, r, v, w, start, end, tuple(xbars),
                                (lo, hi), (hi - lo) * in_bits, groups,
                            )
                        )
                        starts_ends.append(end)
                else:
                    total_rows = row_offsets[nid][-1][1]
                    ready = avail.slice_time(node, 0, total_rows, w)
                    all_xbars = [x for xbars, _, _ in nu.units[r] for x in xbars]
                    start = max(
                        ready, max((xbar_free.get(x, 0) for x in all_xbars), default=0)
                    )
                    for v, (xbars, dur, groups) in enumerate(nu.units[r]):
                        end = start + dur
                        for x in xbars:
                            xbar_free[x] = end
                        lo, hi = row_offsets[nid][v]
                        acts.append(
                            Activation(
                                nid, r, v, w, start, end, tuple(xbars),
                                (lo, hi), total_rows * in_bits, groups,
                            )
                        )
                        starts_ends.append(end)
                avail.record(nid, w, max(starts_ends))
        acts.sort(key=lambda a: (a.start, a.replica, a.vtile, a.window))
        sched.activations.extend(acts)
    sched.window_done = dict(avail.window_done)
    sched.makespan = max((a.end for a in sched.activations), default=0)
    return sched


def mvm_pipeline(graph: CompGraph, hw: HwSpec, dup: DupAssignment,
                 refined: dict | None = None, *, staged: bool = True) -> VxbSchedule:
    """Crossbar-mode schedule; `refined` overrides computed D' for fixtures."""
    if refined is None:
        refined = refine_duplication(graph, dup, hw)
    return run_pipeline(graph, hw, _xbm_units(graph, hw, dup, refined), staged=staged)
