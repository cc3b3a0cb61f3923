"""Pass orchestration: computation graph in, meta-operator flow out.

Scheduling always starts at graph granularity; crossbar-mode hardware adds
the MVM refinement and wordline-mode hardware the row remapping on top, so
the pass ladder is CG, CG+MVM or CG+MVM+VVM depending on the computing mode.
A model larger than the chip is segmented first and each subgraph is
compiled back to back with reprogramming boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .arch import HwSpec
from .emit import emit_cm, emit_wlm, emit_xbm
from .errors import ValidationError
from .flow import Flow, Reprogram
from .graph import CompGraph
from .sched_cg import SubgraphPlan, segment_graph
from .sched_mvm import mvm_pipeline, refine_duplication
from .sched_vvm import build_remaps, vvm_pipeline
from .simulator import perf_model


@dataclass
class CompileResult:
    flow: Flow
    mode: str
    subplan: SubgraphPlan
    refined: dict = field(default_factory=dict)
    schedules: list = field(default_factory=list)
    remaps: dict = field(default_factory=dict)

    def pass_dump(self, name: str):
        if name == "sched-cg":
            return self.subplan.to_json()
        if name == "sched-mvm":
            return {
                "refined_duplication": {str(k): v for k, v in sorted(self.refined.items())},
                "schedules": [s.to_json() for s in self.schedules],
            }
        if name == "sched-vvm":
            return {str(k): r.to_json() for k, r in sorted(self.remaps.items())}
        raise ValidationError(f"unknown pass dump {name!r}")


def _merge(flows, boundary_rows) -> Flow:
    if len(flows) == 1:
        return flows[0]
    merged = Flow()
    for i, fl in enumerate(flows):
        if i > 0:
            merged.append(Reprogram(boundary_rows[i]))
        merged.statements.extend(fl.statements)
        merged.symbols.update(fl.symbols)
    return merged


def compile_graph(graph: CompGraph, hw: HwSpec, mode: str | None = None, *,
                  staged: bool = True) -> CompileResult:
    """Compile under the hardware's computing mode (or an explicit override)."""
    mode = (mode or hw.mode).lower()
    if mode not in ("cm", "xbm", "wlm"):
        raise ValidationError(f"unknown mode {mode!r}")
    if mode != hw.mode:
        hw = replace(hw, mode=mode)
    subplan = segment_graph(graph, hw)
    result = CompileResult(flow=Flow(), mode=mode, subplan=subplan)
    if mode == "cm":
        result.flow = emit_cm(graph, subplan, hw)
        return result

    flows = []
    for seg, dup in zip(subplan.subgraphs, subplan.assignments):
        refined = refine_duplication(graph, dup, hw)
        result.refined.update(refined)
        if mode == "xbm":
            sched = mvm_pipeline(graph, hw, dup, refined, staged=staged)
            result.schedules.append(sched)
            flows.append(emit_xbm(graph, sched, hw, subset=set(seg)))
        else:
            remaps = build_remaps(graph, dup, hw, refined)
            result.remaps.update(remaps)
            sched = vvm_pipeline(graph, hw, dup, remaps, staged=staged)
            result.schedules.append(sched)
            flows.append(emit_wlm(graph, remaps, sched, hw, subset=set(seg)))
    boundary_rows = [b // max(1, hw.xbar.write_cycles) for b in subplan.boundary_cycles]
    result.flow = _merge(flows, boundary_rows)
    return result


def compare_modes(graph: CompGraph, hw_base: HwSpec):
    """(latency_cm, latency_xbm, latency_wlm) on the same hardware."""
    out = []
    for mode in ("cm", "xbm", "wlm"):
        res = compile_graph(graph, hw_base, mode)
        out.append(perf_model(res.flow, replace(hw_base, mode=mode)).compute_cycles)
    return tuple(out)
