"""VVM-grained optimization for wordline mode.

With only `parallel_row` rows active per cycle, a matrix taller than that
needs several serial row waves per MVM.  The remapping pass spreads the row
groups that feed one accumulation across g different crossbars so they all
fire in the same cycle; a digital add then folds the g partial sums.

Remapping consumes g crossbars per mapped instance, so the D' replicas fold
into D'' = floor(D'/g) remapped instances.  When the pool is short but the
core still has free crossbars, those are drafted; leftover replicas that
cannot form a group stay in the naive serialized mapping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .arch import HwSpec, cycles_per_mvm
from .errors import CapacityError
from .graph import CompGraph
from .lowering import DEFAULT_BINDING, VxbPlan, WeightMatrix, mvm_count, vxb_plan, weight_matrix_of
from .sched_cg import DupAssignment
from .sched_mvm import (
    NodeUnits,
    VxbSchedule,
    assign_windows,
    refine_duplication,
    replica_crossbars,
    run_pipeline,
    tile_index,
)


def row_split(wm: WeightMatrix, hw: HwSpec) -> int:
    """Row groups one full vertical tile needs: g = ceil(rows / parallel_row)."""
    rows = min(wm.phys_rows, hw.xbar.xb_rows)
    return math.ceil(rows / hw.xbar.parallel_row)


def group_ranges(tile_rows: int, parallel_row: int):
    """(row_lo, row_hi) of each group inside one vertical tile."""
    out = []
    lo = 0
    while lo < tile_rows:
        hi = min(lo + parallel_row, tile_rows)
        out.append((lo, hi))
        lo = hi
    return out


@dataclass
class RemapPlan:
    """Row-group redistribution of one node's replicas."""

    node_id: int
    g: int
    d_refined: int  # D' entering the pass
    instances: int  # D'' remapped instances
    leftover: int  # replicas kept in naive serialized mapping
    # placement[i][vtile] -> per row group: (crossbar list over h x planes, lo, hi)
    placement: list = field(default_factory=list)
    leftover_replicas: list = field(default_factory=list)  # replica indices

    @property
    def remapped(self) -> bool:
        return self.g > 1 and self.instances > 0 and bool(self.placement)

    def to_json(self):
        return {
            "node": self.node_id,
            "g": self.g,
            "d_refined": self.d_refined,
            "instances": self.instances,
            "leftover": self.leftover,
            "placement": [
                [
                    [[[list(x) for x in xbs], lo, hi] for xbs, lo, hi in vt]
                    for vt in inst
                ]
                for inst in self.placement
            ],
        }


def remap(graph: CompGraph, nid: int, dup: DupAssignment, d_refined: int, hw: HwSpec) -> RemapPlan:
    """Distribute each vertical tile's row groups over g crossbars.

    The instance pool comes from folding replicas g at a time; a lone
    replica may draft spare crossbars from its core when available.
    Groups of one logical matrix always land on distinct crossbars.
    """
    node = graph.nodes[nid]
    plan = vxb_plan(weight_matrix_of(node, hw, DEFAULT_BINDING), hw)
    wm = weight_matrix_of(node, hw, DEFAULT_BINDING)
    g = row_split(wm, hw)
    cores = dup.core_ids[nid]
    if g == 1:
        return RemapPlan(nid, 1, d_refined, d_refined, 0)
    if plan.core_vxb < 1:
        # a VXB spanning cores cannot fold siblings; keep serialized groups
        return RemapPlan(nid, g, d_refined, 0, d_refined,
                         leftover_replicas=list(range(d_refined)))

    total_slots = plan.core_vxb * len(cores)
    instances = d_refined // g
    used_replicas = instances * g
    if instances == 0:
        if total_slots >= g:
            # draft spare in-core crossbar slots beyond the granted replicas
            instances, used_replicas = 1, d_refined
        else:
            return RemapPlan(nid, g, d_refined, 0, d_refined,
                             leftover_replicas=list(range(d_refined)))
    leftover = d_refined - used_replicas

    placement = []
    for inst in range(instances):
        member_xbars = [
            replica_crossbars(cores, plan, hw, inst * g + k) for k in range(g)
        ]
        per_vtile = []
        for v, tile_rows in enumerate(plan.row_tiles):
            groups = group_ranges(tile_rows, hw.xbar.parallel_row)
            entries = []
            for k, (lo, hi) in enumerate(groups):
                xbs = [
                    member_xbars[k][tile_index(plan, v, h, p)]
                    for h in range(plan.h_tiles)
                    for p in range(plan.bit_planes)
                ]
                entries.append((xbs, lo, hi))
            per_vtile.append(entries)
        placement.append(per_vtile)
    return RemapPlan(
        nid, g, d_refined, instances, leftover, placement,
        leftover_replicas=list(range(used_replicas, d_refined)),
    )


def build_remaps(graph: CompGraph, dup: DupAssignment, hw: HwSpec,
                 refined: dict | None = None) -> dict:
    if refined is None:
        refined = refine_duplication(graph, dup, hw)
    return {nid: remap(graph, nid, dup, refined[nid], hw)
            for nid in graph.cim_nodes() if nid in refined}


def _wlm_units(graph: CompGraph, hw: HwSpec, dup: DupAssignment, remaps: dict):
    """Firing units under WLM: remapped instances plus naive leftovers."""
    out = {}
    for nid in (n for n in graph.cim_nodes() if n in remaps):
        node = graph.nodes[nid]
        plan = vxb_plan(weight_matrix_of(node, hw, DEFAULT_BINDING), hw)
        in_bits = graph.input_spec_of(node.inputs[0]).precision_bits
        rp = remaps[nid]
        cores = dup.core_ids[nid]
        dac = hw.xbar.dac_bits if hw.xbar.dac_bits is not None else in_bits
        wave = math.ceil(in_bits / dac)
        units = []
        for inst in range(rp.instances):
            per_vtile = []
            for v, tile_rows in enumerate(plan.row_tiles):
                if rp.remapped:
                    entries = rp.placement[inst][v]
                    xbars, groups = [], []
                    for xbs, lo, hi in entries:
                        for j, xb in enumerate(xbs):
                            h, p = divmod(j, plan.bit_planes)
                            groups.append((len(xbars), lo, hi, h, p))
                            xbars.append(xb)
                    per_vtile.append((tuple(xbars), wave, tuple(groups)))
                else:
                    xbars = replica_crossbars(cores, plan, hw, inst)
                    per_vtile.append(
                        (
                            tuple(
                                xbars[tile_index(plan, v, h, p)]
                                for h in range(plan.h_tiles)
                                for p in range(plan.bit_planes)
                            ),
                            cycles_per_mvm(hw, tile_rows, in_bits),
                            (),
                        )
                    )
            units.append(tuple(per_vtile))
        for extra in rp.leftover_replicas:
            xbars = replica_crossbars(cores, plan, hw, extra)
            per_vtile = []
            for v, tile_rows in enumerate(plan.row_tiles):
                per_vtile.append(
                    (
                        tuple(
                            xbars[tile_index(plan, v, h, p)]
                            for h in range(plan.h_tiles)
                            for p in range(plan.bit_planes)
                        ),
                        cycles_per_mvm(hw, tile_rows, in_bits),
                        (),
                    )
                )
            units.append(tuple(per_vtile))
        if not units:
            raise CapacityError(f"node {nid}: no schedulable units")
        owner = assign_windows(mvm_count(node), dup.D[nid], len(units))
        out[nid] = NodeUnits(nid, plan, tuple(units), tuple(owner))
    return out


def vvm_pipeline(graph: CompGraph, hw: HwSpec, dup: DupAssignment, remaps: dict,
                 *, staged: bool = True) -> VxbSchedule:
    """Wordline-mode schedule: remapped row groups of one MVM fire together."""
    return run_pipeline(graph, hw, _wlm_units(graph, hw, dup, remaps), staged=staged)
