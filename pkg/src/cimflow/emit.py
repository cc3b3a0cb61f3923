"""Meta-operator flow emission for the three computing modes.

Shared conventions (documented in the README):

* L0 holds activations channel-last (H, W, C), one region per tensor,
  bump-allocated: graph inputs first, then node outputs in topo order.
  Byte addresses; element width = ceil(precision/8); partial sums 4 bytes.
* The weight matrix row order is (kernel row, kernel column, channel), so a
  sliding window gathers one contiguous channel run per kernel tap and a
  vertical crossbar tile covers a contiguous run of taps.
* Window epilogue on the replica's primary core: partial vectors of the
  vertical tiles / row groups are added, shift_acc folds bit slices, requant
  saturates to the output precision, a mov scatters the window to L0, and
  any directly-fed Relu fires per window so consumers can stream.
* Symbols: p<node> carries operator attributes (shared by every replica;
  per-replica bands are matched through their src/des addresses), w<node>...
  names one programmed weight tile, p<node>.add/.fold carry epilogue attrs.

Emission order follows the activation schedule, so staged pipelines
interleave statements of adjacent operators exactly as they overlap in time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .arch import HwSpec, cycles_per_mvm
from .errors import EmitError
from .flow import (
    Dcom,
    Flow,
    Mov,
    ReadCore,
    ReadRows,
    ReadXb,
    Reprogram,
    WriteRows,
    WriteXb,
    elem_bytes,
)
from .graph import CompGraph
from .lowering import DEFAULT_BINDING, DimBinding, XB, mvm_count, vxb_plan, weight_matrix_of
from .sched_cg import SubgraphPlan
from .sched_mvm import VxbSchedule, band_ranges
from .sched_vvm import group_ranges


def requant_shift(node, in_bits: int) -> int:
    """Arithmetic right shift bringing a node's accumulator into 8 bits.

    Sized from the worst-case accumulator width; the node attr `out_shift`
    overrides.
    """
    if "out_shift" in node.attrs:
        return node.attrs["out_shift"]
    wspec = node.weight_spec()
    if node.kind == "Conv":
        _, c, r, s = wspec.dims
        rows = c * r * s
    else:
        rows = wspec.dims[1]
    acc_bits = in_bits + wspec.precision_bits - 1 + max(0, rows - 1).bit_length()
    return max(0, acc_bits - 8)


class Bump:
    """Deterministic bump allocator, 4-byte aligned."""

    def __init__(self):
        self.top = 0

    def take(self, nbytes: int) -> int:
        addr = self.top
        self.top += (nbytes + 3) & ~3
        return addr


class Emitter:
    """Allocation state and symbol table shared by all emission paths."""

    def __init__(self, graph: CompGraph, hw: HwSpec, binding: DimBinding = DEFAULT_BINDING):
        self.graph = graph
        self.hw = hw
        self.binding = binding
        self.flow = Flow()
        self.l1 = {}
        self.win_buf = {}
        self.partials = {}
        self._ctx_cache = {}
        self.regions = {}
        bump = Bump()
        for i, spec in enumerate(graph.inputs):
            self.regions[f"in{i}"] = (
                bump.take(spec.elems * elem_bytes(spec.precision_bits)),
                spec.dims,
                spec.precision_bits,
            )
        for nid in graph.topo():
            spec = graph.nodes[nid].out_spec
            self.regions[nid] = (
                bump.take(spec.elems * elem_bytes(spec.precision_bits)),
                spec.dims,
                spec.precision_bits,
            )
        self.flow.symbols["meta"] = self._meta(bump.top)

    def _meta(self, l0_top):
        meta = {"mode": self.hw.mode, "l0_top": l0_top,
                "inputs": {}, "outputs": {}, "regions": {}}
        for i in range(len(self.graph.inputs)):
            addr, dims, bits = self.regions[f"in{i}"]
            meta["inputs"][f"in{i}"] = {"addr": addr, "dims": list(dims), "bits": bits}
        for nid in self.graph.topo():
            addr, dims, bits = self.regions[nid]
            meta["regions"][str(nid)] = {"addr": addr, "dims": list(dims), "bits": bits}
        for k, nid in enumerate(self.graph.outputs):
            addr, dims, bits = self.regions[nid]
            meta["outputs"][f"out{k}"] = {
                "node": nid, "addr": addr, "dims": list(dims), "bits": bits
            }
        return meta

    def l1_take(self, core: int, nbytes: int) -> int:
        return self.l1.setdefault(core, Bump()).take(nbytes)

    def node_ctx(self, nid: int):
        if nid not in self._ctx_cache:
            node = self.graph.nodes[nid]
            in_spec = self.graph.input_spec_of(node.inputs[0])
            wm = weight_matrix_of(node, self.hw, self.binding)
            self._ctx_cache[nid] = (node, in_spec, wm, vxb_plan(wm, self.hw))
        return self._ctx_cache[nid]

    # -- symbols -----------------------------------------------------------

    def params_sym(self, nid: int, extra=None) -> str:
        name = f"p{nid}"
        if name not in self.flow.symbols:
            node = self.graph.nodes[nid]
            in_spec = self.graph.input_spec_of(node.inputs[0])
            entry = {
                "node": nid,
                "kind": node.kind,
                "in_dims": list(in_spec.dims),
                "in_bits": in_spec.precision_bits,
                "out_dims": list(node.out_spec.dims),
                "out_bits": node.out_spec.precision_bits,
                "level": "L0",
                "in_per_out": 1,
            }
            if node.is_cim:
                wspec = node.weight_spec()
                entry["weight_dims"] = list(wspec.dims)
                entry["weight_bits"] = wspec.precision_bits
                entry["out_shift"] = requant_shift(node, in_spec.precision_bits)
                entry["binding"] = self.binding.b_to
                if node.kind == "Conv":
                    entry["stride"] = node.attrs["stride"]
                    entry["padding"] = node.attrs["padding"]
            elif node.kind in ("MaxPool", "AvgPool"):
                entry["kernel"] = node.attrs["kernel"]
                entry["stride"] = node.attrs["stride"]
                entry["in_per_out"] = node.attrs["kernel"] ** 2
                entry["in_elems"] = in_spec.elems
            self.flow.symbols[name] = entry
        if extra:
            self.flow.symbols[name].update(extra)
        return name

    def tile_sym(self, nid: int, tag: str, row_lo: int, rows: int,
                 col_lo: int, cols: int, plane: int) -> str:
        name = f"w{nid}.{tag}"
        if name not in self.flow.symbols:
            in_bits = self.graph.input_spec_of(self.graph.nodes[nid].inputs[0]).precision_bits
            self.flow.symbols[name] = {
                "node": nid,
                "row_lo": row_lo,
                "rows": rows,
                "col_lo": col_lo,
                "cols": cols,
                "plane": plane,
                "xb_row_lo": 0,
                "in_bits": in_bits,
                "binding": self.binding.b_to,
            }
        return name

    def epi_sym(self, nid: int, kind: str, level: str, **attrs) -> str:
        name = f"p{nid}.{kind}.{level}"
        entry = {"node": nid, "level": level, "in_bits": 32, "out_bits": 32,
                 "in_per_out": 1}
        entry.update(attrs)
        self.flow.symbols[name] = entry
        return name

    # -- window gather -------------------------------------------------------

    def window_rows(self, nid: int, window: int):
        """L0 gather runs of one window: (l0_byte_addr, matrix_row0, elems)."""
        node, in_spec, wm, _ = self.node_ctx(nid)
        in_addr, in_dims, in_bits = self.regions[node.inputs[0] if isinstance(
            node.inputs[0], int) else node.inputs[0]]
        ebytes = elem_bytes(in_bits)
        if node.kind == "FC":
            return [(in_addr, 0, wm.logical_rows)]
        c_in, h_in, w_in = in_dims
        _, _, taps_r, taps_s = node.attrs["kernel"].dims
        stride, pad = node.attrs["stride"], node.attrs["padding"]
        w_out = node.out_spec.dims[2]
        oh, ow = divmod(window, w_out)
        runs = []
        for r in range(taps_r):
            ih = oh * stride - pad + r
            if not 0 <= ih < h_in:
                continue
            for s in range(taps_s):
                iw = ow * stride - pad + s
                if not 0 <= iw < w_in:
                    continue
                runs.append(
                    (in_addr + ((ih * w_in + iw) * c_in) * ebytes,
                     (r * taps_s + s) * c_in,
                     c_in)
                )
        return runs

    def gather_window(self, nid: int, window: int, core: int, row_lo: int, row_hi: int):
        """Movs delivering matrix rows [row_lo, row_hi) of a window to a core.

        One window-vector buffer per (node, window, core); each run is moved
        at most once.  Padded taps stay zero (buffers are zero-initialised).
        """
        node, in_spec, wm, _ = self.node_ctx(nid)
        ebytes = elem_bytes(in_spec.precision_bits)
        key = (nid, window, core)
        if key not in self.win_buf:
            self.win_buf[key] = (self.l1_take(core, wm.logical_rows * ebytes), set())
        base, done = self.win_buf[key]
        movs = []
        for l0, row0, count in self.window_rows(nid, window):
            lo, hi = max(row0, row_lo), min(row0 + count, row_hi)
            if lo >= hi or (lo, hi) in done:
                continue
            done.add((lo, hi))
            movs.append(
                Mov("L0", l0 + (lo - row0) * ebytes, f"L1.{core}",
                    base + lo * ebytes, (hi - lo) * in_spec.precision_bits)
            )
        return base, movs

    def partial_addr(self, key, core: int, nbytes: int) -> int:
        if key not in self.partials:
            self.partials[key] = self.l1_take(core, nbytes)
        return self.partials[key]


# -- digital nodes ----------------------------------------------------------------


def is_streamed_relu(graph: CompGraph, nid: int) -> bool:
    node = graph.nodes[nid]
    ref = node.inputs[0]
    return node.kind == "Relu" and isinstance(ref, int) and graph.nodes[ref].is_cim


def streamed_relus(graph: CompGraph, nid: int):
    return [cid for cid in graph.consumers(nid) if is_streamed_relu(graph, cid)
            and graph.nodes[cid].inputs[0] == nid]


def emit_digital_whole(em: Emitter, nid: int):
    """One whole-region DCOM for a digital node (pool, add, barrier relu)."""
    node = em.graph.nodes[nid]
    out_addr, _, _ = em.regions[nid]
    src_addr, _, _ = em.regions[node.inputs[0]]
    extra = {}
    func = {"Relu": "relu", "MaxPool": "maxpool", "AvgPool": "avgpool", "Add": "add"}[node.kind]
    if node.kind == "Add":
        extra["src2"] = em.regions[node.inputs[1]][0]
    em.flow.append(
        Dcom(func, em.params_sym(nid, extra), src_addr, out_addr, node.out_spec.elems)
    )


def emit_relu_window(em: Emitter, relu_id: int, window: int):
    node = em.graph.nodes[relu_id]
    out_addr, out_dims, out_bits = em.regions[relu_id]
    src_addr = em.regions[node.inputs[0]][0]
    k = out_dims[0]
    off = window * k * elem_bytes(out_bits)
    em.flow.append(
        Dcom("relu", em.params_sym(relu_id), src_addr + off, out_addr + off, k)
    )


# -- CM ---------------------------------------------------------------------------


def band_geometry(em: Emitter, nid: int, lo: int, hi: int):
    """(src, des, in_elems, out_elems, cycles) of one window band."""
    node, in_spec, wm, plan = em.node_ctx(nid)
    in_addr, in_dims, in_bits = em.regions[node.inputs[0]]
    out_addr, _, out_bits = em.regions[nid]
    in_eb, out_eb = elem_bytes(in_bits), elem_bytes(out_bits)
    per_window = sum(cycles_per_mvm(em.hw, rows, in_bits) for rows in plan.row_tiles)
    if node.kind == "FC":
        return in_addr, out_addr, in_spec.elems, node.out_spec.elems, per_window
    k, _, w_out = node.out_spec.dims
    c_in, h_in, w_in = in_dims
    stride, pad = node.attrs["stride"], node.attrs["padding"]
    taps_r = node.attrs["kernel"].dims[2]
    oh_lo, oh_hi = lo // w_out, (hi - 1) // w_out
    ih_lo = max(0, oh_lo * stride - pad)
    ih_hi = min(h_in - 1, oh_hi * stride - pad + taps_r - 1)
    return (
        in_addr + (ih_lo * w_in * c_in) * in_eb,
        out_addr + lo * k * out_eb,
        (ih_hi - ih_lo + 1) * w_in * c_in,
        (hi - lo) * k,
        (hi - lo) * per_window,
    )


def emit_cm(graph: CompGraph, subplan: SubgraphPlan, hw: HwSpec) -> Flow:
    """Core-mode flow: per CIM node one parallel block of D ReadCore ops."""
    if hw.mode != "cm":
        raise EmitError(f"emit_cm invoked under mode {hw.mode!r}")
    em = Emitter(graph, hw)
    emitted = set()
    for si, (seg, dup) in enumerate(zip(subplan.subgraphs, subplan.assignments)):
        if si > 0:
            rows = subplan.boundary_cycles[si] // max(1, hw.xbar.write_cycles)
            em.flow.append(Reprogram(rows))
        for nid in seg:
            node = graph.nodes[nid]
            if not node.is_cim:
                if nid not in emitted:
                    emit_digital_whole(em, nid)
                    emitted.add(nid)
                continue
            _, in_spec, wm, plan = em.node_ctx(nid)
            bands = band_ranges(mvm_count(node), dup.D[nid])
            geo = [band_geometry(em, nid, lo, hi) for lo, hi in bands]
            in_addr, in_dims, in_bits = em.regions[node.inputs[0]]
            params = em.params_sym(
                nid,
                {
                    "bands": [
                        {"lo": lo, "hi": hi, "src": g[0], "des": g[1],
                         "in_elems": g[2], "out_elems": g[3], "cycles": g[4]}
                        for (lo, hi), g in zip(bands, geo)
                    ],
                    "xbars_active": plan.xbars_per_vxb,
                    "in_region": {"addr": in_addr, "dims": list(in_dims), "bits": in_bits},
                },
            )
            cores = dup.core_ids[nid]
            cpr = max(1, dup.cores_per_replica[nid])
            em.flow.parallel(
                [ReadCore(node.kind.lower(), params, cores[r * cpr], g[0], g[1])
                 for r, g in enumerate(geo)]
            )
            for relu_id in streamed_relus(graph, nid):
                if relu_id not in emitted:
                    emit_digital_whole(em, relu_id)
                    emitted.add(relu_id)
    for nid in graph.topo():
        if not graph.nodes[nid].is_cim and nid not in emitted:
            emit_digital_whole(em, nid)
            emitted.add(nid)
    return em.flow


# -- XBM / WLM ----------------------------------------------------------------------


def _node_done_times(graph: CompGraph, schedule: VxbSchedule) -> dict:
    done = {}
    for nid in graph.topo():
        node = graph.nodes[nid]
        if node.is_cim:
            done[nid] = max(
                (schedule.window_done.get((nid, w), 0) for w in range(mvm_count(node))),
                default=0,
            )
        else:
            done[nid] = max(
                (done[r] for r in node.inputs if isinstance(r, int)), default=0
            )
    return done


def _schedule_events(graph: CompGraph, schedule: VxbSchedule, subset):
    """Activation groups and barrier digital nodes, in firing order."""
    idx = {nid: i for i, nid in enumerate(graph.topo())}
    groups = {}
    for a in schedule.activations:
        groups.setdefault((a.start, idx[a.node]), []).append(a)
    events = [(start, 1, order, ("acts", ops)) for (start, order), ops in groups.items()]
    done = _node_done_times(graph, schedule)
    for nid in graph.topo():
        node = graph.nodes[nid]
        if node.is_cim or nid not in subset:
            continue
        if is_streamed_relu(graph, nid) and node.inputs[0] in subset:
            continue  # emitted per window with its producer
        events.append((done[nid], 0, idx[nid], ("digital", nid)))
    events.sort(key=lambda e: (e[0], e[1], e[2]))
    return events


class BodyEmitter:
    """Walks a schedule, emitting gathers, reads and window epilogues."""

    def __init__(self, em: Emitter, subset=None):
        self.em = em
        self.subset = subset if subset is not None else set(em.graph.nodes)
        self.pending = {}  # (nid, window) -> vtiles left
        self.parts = {}  # (nid, window) -> list of (addr, cols, core, h, plane)

    def run(self, schedule: VxbSchedule):
        self.write_preamble(schedule)
        for _, _, _, payload in _schedule_events(self.em.graph, schedule, self.subset):
            if payload[0] == "acts":
                self.activation_group(payload[1])
            else:
                emit_digital_whole(self.em, payload[1])

    # -- weight programming -----------------------------------------------

    def write_preamble(self, schedule: VxbSchedule):
        em = self.em
        seen = set()
        for act in schedule.activations:
            _, _, wm, plan = em.node_ctx(act.node)
            em.params_sym(act.node, {"xbars_active": plan.xbars_per_vxb})
            lo, hi = act.slice_rows
            if act.group_reads:
                for xi, g_lo, g_hi, h, p in act.group_reads:
                    core, xb = act.crossbars[xi]
                    if (core, xb) in seen:
                        continue
                    seen.add((core, xb))
                    sym = em.tile_sym(
                        act.node, f"r{act.replica}.v{act.vtile}.h{h}.b{p}.g{xi}",
                        lo + g_lo, g_hi - g_lo, sum(plan.col_tiles[:h]),
                        plan.col_tiles[h], p,
                    )
                    em.flow.append(WriteRows(core, xb, 0, g_hi - g_lo - 1, sym))
                continue
            for t, (core, xb) in enumerate(act.crossbars):
                if (core, xb) in seen:
                    continue
                seen.add((core, xb))
                h, p = divmod(t, plan.bit_planes)
                sym = em.tile_sym(
                    act.node, f"r{act.replica}.v{act.vtile}.h{h}.b{p}",
                    lo, hi - lo, sum(plan.col_tiles[:h]), plan.col_tiles[h], p,
                )
                if em.hw.mode == "xbm":
                    em.flow.append(WriteXb(core, xb, sym))
                else:
                    em.flow.append(WriteRows(core, xb, 0, hi - lo - 1, sym))

    # -- activations -----------------------------------------------------------

    def activation_group(self, acts):
        em = self.em
        movs, par_reads, seq_reads, finished = [], [], [], []
        for act in acts:
            node, in_spec, wm, plan = em.node_ctx(act.node)
            ebytes = elem_bytes(in_spec.precision_bits)
            lo, hi = act.slice_rows
            primary = act.crossbars[0][0]
            bases = {}

            def slice_base(core):
                if core not in bases:
                    b, ms = em.gather_window(act.node, act.window, core, lo, hi)
                    movs.extend(ms)
                    bases[core] = b
                return bases[core]

            key = (act.node, act.window)
            store = self.parts.setdefault(key, [])
            if act.group_reads:
                for xi, g_lo, g_hi, h, p in act.group_reads:
                    core, xb = act.crossbars[xi]
                    cols = plan.col_tiles[h]
                    des = em.partial_addr(("g", key, act.vtile, xi), core, cols * 4)
                    par_reads.append(
                        ReadRows(core, xb, 0, g_hi - g_lo - 1,
                                 slice_base(core) + (lo + g_lo) * ebytes, des)
                    )
                    store.append((des, cols, core, h, p))
            else:
                for t, (core, xb) in enumerate(act.crossbars):
                    h, p = divmod(t, plan.bit_planes)
                    cols = plan.col_tiles[h]
                    src = slice_base(core) + lo * ebytes
                    if em.hw.mode == "xbm":
                        des = em.partial_addr(("t", key, act.vtile, t), core, cols * 4)
                        par_reads.append(ReadXb(core, xb, src, des))
                        store.append((des, cols, core, h, p))
                    else:
                        # naive wordline mapping: serial row waves on one crossbar
                        for g_lo, g_hi in group_ranges(hi - lo, em.hw.xbar.parallel_row):
                            des = em.partial_addr(
                                ("v", key, act.vtile, t, g_lo), core, cols * 4
                            )
                            seq_reads.append(
                                ReadRows(core, xb, g_lo, g_hi - 1,
                                         slice_base(core) + (lo + g_lo) * ebytes, des)
                            )
                            store.append((des, cols, core, h, p))
            left = self.pending.setdefault(key, plan.v_tiles)
            self.pending[key] = left - 1
            if self.pending[key] == 0:
                finished.append(act)
        for m in movs:
            em.flow.append(m)
        em.flow.parallel(par_reads)
        for op in seq_reads:
            em.flow.append(op)
        for act in finished:
            self.window_epilogue(act)

    # -- epilogue ---------------------------------------------------------------

    def window_epilogue(self, act):
        em = self.em
        nid, w = act.node, act.window
        node, in_spec, wm, plan = em.node_ctx(nid)
        primary = act.crossbars[0][0]
        level = f"L1.{primary}"
        key = (nid, w)
        entries = self.parts.pop(key)
        slices = wm.slices
        planes = plan.bit_planes
        cols_total = wm.phys_cols  # per plane for XB binding, full row otherwise

        by_slot = {}
        for addr, cols, core, h, p in entries:
            if core != primary:
                moved = em.partial_addr(("mv", key, addr), primary, cols * 4)
                em.flow.append(Mov(f"L1.{core}", addr, level, moved, cols * 32))
                addr = moved
            by_slot.setdefault((h, p), []).append((addr, cols))

        if len(by_slot) == 1 and len(next(iter(by_slot.values()))) == 1:
            acc = next(iter(by_slot.values()))[0][0]
        else:
            # fold partial vectors into one (plane, column) block by
            # copying the first and accumulating the rest in place
            block = em.partial_addr(("final", key), primary, cols_total * planes * 4)
            acc_sym = em.epi_sym(nid, "acc", level)
            for (h, p), parts in sorted(by_slot.items()):
                cols = parts[0][1]
                slot = block + (p * cols_total + sum(plan.col_tiles[:h])) * 4
                em.flow.append(Mov(level, parts[0][0], level, slot, cols * 32))
                for nxt, _ in parts[1:]:
                    em.flow.append(Dcom("add", acc_sym, nxt, slot, cols))
            acc = block
        k = wm.logical_cols
        if slices > 1:
            folded = em.partial_addr(("fold", key), primary, k * 4)
            em.flow.append(
                Dcom(
                    "shift_acc",
                    em.epi_sym(
                        nid, "fold", level,
                        group=slices,
                        cell_bits=em.hw.xbar.cell_precision_bits,
                        layout="blocked" if em.binding.b_to == XB else "interleaved",
                        in_per_out=slices,
                    ),
                    acc, folded, k,
                )
            )
            acc = folded
        out_addr, _, out_bits = em.regions[nid]
        quant = em.partial_addr(("q", key), primary, k * elem_bytes(out_bits))
        em.flow.append(
            Dcom("requant",
                 em.epi_sym(nid, "req", level,
                            shift=requant_shift(node, in_spec.precision_bits),
                            out_bits=out_bits),
                 acc, quant, k)
        )
        em.flow.append(
            Mov(level, quant, "L0", out_addr + w * k * elem_bytes(out_bits), k * out_bits)
        )
        for relu_id in streamed_relus(em.graph, nid):
            if relu_id in self.subset:
                emit_relu_window(em, relu_id, w)


def emit_xbm(graph: CompGraph, schedule: VxbSchedule, hw: HwSpec, subset=None) -> Flow:
    """Crossbar-mode flow ordered by the staged (or lockstep) schedule."""
    if hw.mode != "xbm":
        raise EmitError(f"emit_xbm invoked under mode {hw.mode!r}")
    em = Emitter(graph, hw)
    BodyEmitter(em, subset).run(schedule)
    return em.flow


def emit_wlm(graph: CompGraph, remaps: dict, schedule: VxbSchedule, hw: HwSpec,
             subset=None) -> Flow:
    """Wordline-mode flow; remapped row groups read in the same parallel block."""
    if hw.mode != "wlm":
        raise EmitError(f"emit_wlm invoked under mode {hw.mode!r}")
    em = Emitter(graph, hw)
    BodyEmitter(em, subset).run(schedule)
    return em.flow
