"""Functional and performance simulation of meta-operator flows.

Functional semantics are exact integer arithmetic:

* crossbar reads compute per-column dot products of the activated rows over
  the raw cell values, with top-slice columns sign-weighted per the
  two's-complement slicing convention;
* shift_acc folds bit slices, requant arithmetic-right-shifts and saturates,
  relu clamps at zero, add either sums two operand regions (32-bit
  saturating) or accumulates a partial vector into its destination;
* buffers are byte arrays (activations ceil(bits/8) bytes, partials 4);
  unwritten buffer bytes read zero, unwritten crossbar cells are an error.

The performance model is event driven: an op starts once every region it
reads has been produced, regions it writes are free, and its crossbar/core
is idle; members of a parallel block start together.  Durations follow the
hardware query layer.  The initial weight-programming preamble is timed but
reported separately (weights are frozen before inference on
non-volatile CIM), so latency comparisons read `compute_cycles`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .arch import HwSpec, cycles_per_mvm
from .errors import (
    AddressOutOfRange,
    ParallelConflictError,
    SemanticError,
    SimulationError,
    UnwrittenCellError,
)
from .flow import (
    Dcom,
    Flow,
    FlowContext,
    Mov,
    ReadCore,
    ReadRows,
    ReadXb,
    Reprogram,
    WriteRows,
    WriteXb,
    elem_bytes,
    op_regions,
)
from .graph import OpNode, TensorSpec
from .kernels import mac_columns
from .lowering import DEFAULT_BINDING, DimBinding, XB, sliced_cell_matrix

INT32_MIN, INT32_MAX = -(1 << 31), (1 << 31) - 1


class ByteBuffer:
    """Growable byte-addressed buffer; unwritten bytes read as zero."""

    def __init__(self, limit_bits=None):
        self.data = np.zeros(256, dtype=np.uint8)
        self.limit = None if limit_bits is None else (limit_bits + 7) // 8

    def _ensure(self, hi: int):
        if self.limit is not None and hi > self.limit:
            raise AddressOutOfRange(f"address {hi} exceeds buffer of {self.limit} bytes")
        if hi > len(self.data):
            grown = np.zeros(max(hi, 2 * len(self.data)), dtype=np.uint8)
            grown[: len(self.data)] = self.data
            self.data = grown

    def read_bytes(self, addr: int, n: int) -> np.ndarray:
        self._ensure(addr + n)
        return self.data[addr:addr + n].copy()

    def write_bytes(self, addr: int, raw: np.ndarray):
        self._ensure(addr + len(raw))
        self.data[addr:addr + len(raw)] = raw

    def read_ints(self, addr: int, count: int, bits: int) -> np.ndarray:
        eb = elem_bytes(bits)
        raw = self.read_bytes(addr, count * eb)
        if eb == 1:
            return raw.view(np.int8).astype(np.int64)
        if eb == 2:
            return raw.view("<i2").astype(np.int64)
        return raw.view("<i4").astype(np.int64)

    def write_ints(self, addr: int, values: np.ndarray, bits: int):
        eb = elem_bytes(bits)
        values = np.asarray(values, dtype=np.int64)
        if eb == 1:
            raw = values.astype(np.int8).view(np.uint8)
        elif eb == 2:
            raw = values.astype("<i2").view(np.uint8)
        else:
            raw = values.astype("<i4").view(np.uint8)
        self.write_bytes(addr, raw)


class CrossbarState:
    def __init__(self, rows: int, cols: int):
        self.cells = np.zeros((rows, cols), dtype=np.uint8)
        self.written = np.zeros((rows, cols), dtype=bool)
        self.top_flag = np.zeros(cols, dtype=np.uint8)
        self.rows_used = 0
        self.cols_used = 0
        self.in_bits = 8


def _saturate(values: np.ndarray, bits: int) -> np.ndarray:
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return np.clip(values, lo, hi)


def _hwc_flat(arr: np.ndarray) -> np.ndarray:
    """(C, H, W) logical array -> channel-last flattening; 1-D passes through."""
    arr = np.asarray(arr)
    if arr.ndim == 3:
        return arr.transpose(1, 2, 0).reshape(-1)
    return arr.reshape(-1)


def _hwc_unflat(flat: np.ndarray, dims) -> np.ndarray:
    if len(dims) == 3:
        c, h, w = dims
        return flat.reshape(h, w, c).transpose(2, 0, 1)
    return flat.reshape(dims)


def _node_from_params(meta: dict) -> OpNode:
    kind = meta["kind"]
    attrs = {}
    if kind == "Conv":
        attrs["kernel"] = TensorSpec(tuple(meta["weight_dims"]), meta["weight_bits"])
        attrs["stride"] = meta["stride"]
        attrs["padding"] = meta["padding"]
    elif kind == "FC":
        attrs["weight"] = TensorSpec(tuple(meta["weight_dims"]), meta["weight_bits"])
    node = OpNode(id=meta["node"], kind=kind, attrs=attrs)
    node.out_spec = TensorSpec(tuple(meta["out_dims"]), meta["out_bits"])
    return node


class MachineState:
    """Buffers plus crossbar cell arrays for one functional run."""

    def __init__(self, flow: Flow, hw: HwSpec, weights: dict):
        self.flow = flow
        self.hw = hw
        self.ctx = FlowContext(flow)
        self.l0 = ByteBuffer(hw.chip.l0_size_bits)
        self.l1: dict = {}
        self.xbars: dict = {}
        self.weights = {int(str(k).lstrip("w")): np.asarray(v) for k, v in weights.items()}
        self._cells_cache: dict = {}

    def buffer(self, level: str) -> ByteBuffer:
        if level == "L0":
            return self.l0
        core = int(level.split(".")[1])
        if core not in self.l1:
            self.l1[core] = ByteBuffer(self.hw.core.l1_size_bits)
        return self.l1[core]

    def xbar(self, core: int, xb: int) -> CrossbarState:
        key = (core, xb)
        if key not in self.xbars:
            self.xbars[key] = CrossbarState(self.hw.xbar.xb_rows, self.hw.xbar.xb_cols)
        return self.xbars[key]

    def node_cells(self, meta: dict):
        """Sliced cell planes of one node's full weight matrix (cached)."""
        nid = meta["node"]
        if nid not in self._cells_cache:
            if nid not in self.weights:
                raise SimulationError(f"no weights provided for node {nid}")
            node = _node_from_params(self.flow.symbols[f"p{nid}"])
            binding = DimBinding(b_to=meta.get("binding", "XBC"))
            self._cells_cache[nid] = sliced_cell_matrix(
                node, self.weights[nid], self.hw, binding
            )
        return self._cells_cache[nid]


def _program(state: MachineState, op):
    """Apply WriteXb / WriteRows."""
    meta = state.ctx.tile_meta(op.src)
    cells, flags = state.node_cells(meta)
    plane = meta["plane"]
    r0, rows = meta["row_lo"], meta["rows"]
    c0, cols = meta["col_lo"], meta["cols"]
    tile = cells[plane, r0:r0 + rows, c0:c0 + cols]
    xb = state.xbar(op.core, op.xb)
    row_base = op.row_lo if isinstance(op, WriteRows) else 0
    if xb.written[row_base:row_base + rows, :cols].any():
        # reprogramming for a new subgraph: previous contents vanish
        xb.written[:] = False
        xb.rows_used = xb.cols_used = 0
    xb.cells[row_base:row_base + rows, :cols] = tile
    xb.written[row_base:row_base + rows, :cols] = True
    xb.top_flag[:cols] = flags[plane, c0:c0 + cols]
    xb.rows_used = max(xb.rows_used, row_base + rows)
    xb.cols_used = max(xb.cols_used, cols)
    xb.in_bits = meta.get("in_bits", 8)


def _mac(state: MachineState, core: int, row_lo: int, row_hi: int, src: int, des: int,
         xb: CrossbarState):
    cols = xb.cols_used
    if not xb.written[row_lo:row_hi, :cols].all():
        raise UnwrittenCellError(
            f"read of rows {row_lo}..{row_hi - 1} touches unwritten cells"
        )
    buf = state.buffer(f"L1.{core}")
    inp = buf.read_ints(src, row_hi - row_lo, xb.in_bits)
    out = mac_columns(
        np.ascontiguousarray(xb.cells[row_lo:row_hi, :cols]),
        xb.top_flag[:cols],
        inp,
        state.hw.xbar.cell_precision_bits,
    )
    if out.size and (out.max() > INT32_MAX or out.min() < INT32_MIN):
        raise SimulationError("MVM partial sum overflows 32 bits")
    buf.write_ints(des, out, 32)


def _window_vector(state, params, window, weights_rows, in_region):
    """Gather one sliding window's input vector from L0 (pads stay zero)."""
    in_addr, in_dims, in_bits = in_region
    vec = np.zeros(weights_rows, dtype=np.int64)
    if params["kind"] == "FC":
        vec[:] = state.l0.read_ints(in_addr, weights_rows, in_bits)
        return vec
    c_in, h_in, w_in = in_dims
    _, _, taps_r, taps_s = params["weight_dims"]
    stride, pad = params["stride"], params["padding"]
    w_out = params["out_dims"][2]
    oh, ow = divmod(window, w_out)
    eb = elem_bytes(in_bits)
    for r in range(taps_r):
        ih = oh * stride - pad + r
        if not 0 <= ih < h_in:
            continue
        for s in range(taps_s):
            iw = ow * stride - pad + s
            if not 0 <= iw < w_in:
                continue
            row0 = (r * taps_s + s) * c_in
            addr = in_addr + ((ih * w_in + iw) * c_in) * eb
            vec[row0:row0 + c_in] = state.l0.read_ints(addr, c_in, in_bits)
    return vec


def _fold_slices(partials: np.ndarray, slices: int, cell_bits: int, blocked: bool):
    if slices == 1:
        return partials.copy()
    if blocked:
        planes = partials.reshape(slices, -1)
        return sum(planes[j] << (j * cell_bits) for j in range(slices))
    cols = partials.reshape(-1, slices)
    return sum(cols[:, j] << (j * cell_bits) for j in range(slices))


def _exec_read_core(state: MachineState, op: ReadCore):
    params = state.ctx.tile_meta(op.param)
    band = next((b for b in params.get("bands", []) if b["des"] == op.des), None)
    if band is None:
        raise SemanticError(f"read_core des {op.des} matches no band of p{params['node']}")
    cells, flags = state.node_cells(params)
    planes, phys_rows, phys_cols = cells.shape
    reg = params["in_region"]
    in_region_meta = (reg["addr"], reg["dims"], reg["bits"])
    xb_rows = state.hw.xbar.xb_rows
    blocked = params.get("binding", "XBC") == XB
    slices = planes if blocked else (phys_cols // params["out_dims"][0])
    k = params["out_dims"][0]
    out_bits = params["out_bits"]
    shift = params["out_shift"]
    eb_out = elem_bytes(out_bits)
    out_base_des = band["des"]
    for w in range(band["lo"], band["hi"]):
        vec = _window_vector(state, params, w, phys_rows, in_region_meta)
        partial = np.zeros(phys_cols * planes, dtype=np.int64)
        for p in range(planes):
            for v0 in range(0, phys_rows, xb_rows):
                v1 = min(v0 + xb_rows, phys_rows)
                partial[p * phys_cols:(p + 1) * phys_cols] += mac_columns(
                    np.ascontiguousarray(cells[p, v0:v1]),
                    flags[p],
                    vec[v0:v1],
                    state.hw.xbar.cell_precision_bits,
                )
        folded = _fold_slices(partial, max(slices, 1), state.hw.xbar.cell_precision_bits,
                              blocked)
        quant = _saturate(folded >> shift, out_bits)
        state.l0.write_ints(out_base_des + (w - band["lo"]) * k * eb_out, quant, out_bits)


def _exec_dcom(state: MachineState, op: Dcom):
    params = state.ctx.tile_meta(op.param) if op.param != "-" else {}
    level = params.get("level", "L0")
    buf = state.buffer(level)
    in_bits = params.get("in_bits", 32)
    out_bits = params.get("out_bits", 32)
    if op.func == "relu":
        x = buf.read_ints(op.src, op.len, in_bits)
        buf.write_ints(op.des, np.maximum(x, 0), out_bits)
    elif op.func == "add":
        if "src2" in params:
            a = buf.read_ints(op.src, op.len, in_bits)
            b = buf.read_ints(params["src2"], op.len, in_bits)
            buf.write_ints(op.des, _saturate(a + b, 32), out_bits)
        else:
            acc = buf.read_ints(op.des, op.len, 32)
            buf.write_ints(op.des, acc + buf.read_ints(op.src, op.len, 32), 32)
    elif op.func == "shift_acc":
        group = params["group"]
        x = buf.read_ints(op.src, op.len * group, 32)
        folded = _fold_slices(x, group, params["cell_bits"],
                              params.get("layout") == "blocked")
        buf.write_ints(op.des, folded, out_bits)
    elif op.func == "requant":
        x = buf.read_ints(op.src, op.len, in_bits)
        buf.write_ints(op.des, _saturate(x >> params["shift"], out_bits), out_bits)
    elif op.func in ("maxpool", "avgpool"):
        c, h, w = params["in_dims"]
        k, stride = params["kernel"], params["stride"]
        arr = buf.read_ints(op.src, c * h * w, in_bits).reshape(h, w, c)
        oh = (h - k) // stride + 1
        ow = (w - k) // stride + 1
        out = np.full((oh, ow, c), np.iinfo(np.int64).min, dtype=np.int64)
        if op.func == "avgpool":
            out = np.zeros((oh, ow, c), dtype=np.int64)
        for dr in range(k):
            for dc in range(k):
                piece = arr[dr:dr + (oh - 1) * stride + 1:stride,
                            dc:dc + (ow - 1) * stride + 1:stride]
                if op.func == "maxpool":
                    out = np.maximum(out, piece)
                else:
                    out += piece
        if op.func == "avgpool":
            out = out // (k * k)
        buf.write_ints(op.des, out.reshape(-1), out_bits)
    else:
        raise SimulationError(f"unknown dcom func {op.func!r}")


def _exec_one(state: MachineState, op):
    if isinstance(op, Mov):
        nbytes = (op.len_bits + 7) // 8
        raw = state.buffer(op.src_level).read_bytes(op.src_addr, nbytes)
        state.buffer(op.des_level).write_bytes(op.des_addr, raw)
    elif isinstance(op, (WriteXb, WriteRows)):
        _program(state, op)
    elif isinstance(op, ReadXb):
        xb = state.xbar(op.core, op.xb)
        _mac(state, op.core, 0, xb.rows_used, op.src, op.des, xb)
    elif isinstance(op, ReadRows):
        xb = state.xbar(op.core, op.xb)
        _mac(state, op.core, op.row_lo, op.row_hi + 1, op.src, op.des, xb)
    elif isinstance(op, ReadCore):
        _exec_read_core(state, op)
    elif isinstance(op, Dcom):
        _exec_dcom(state, op)
    elif isinstance(op, Reprogram):
        pass
    else:
        raise SimulationError(f"cannot execute {op!r}")


def exec_flow(flow: Flow, hw: HwSpec, inputs: dict, weights: dict) -> dict:
    """Run a flow functionally; returns logical (C, H, W) int64 output arrays."""
    meta = flow.symbols.get("meta")
    if meta is None:
        raise SemanticError("flow has no meta symbol; was it produced by this compiler?")
    state = MachineState(flow, hw, weights)
    for name, reg in meta["inputs"].items():
        if name not in inputs:
            raise SimulationError(f"missing input tensor {name!r}")
        arr = np.asarray(inputs[name])
        if math.prod(arr.shape) != math.prod(reg["dims"]):
            raise SimulationError(f"input {name!r} has wrong element count")
        state.l0.write_ints(reg["addr"], _hwc_flat(arr), reg["bits"])
    for stmt in flow.statements:
        if isinstance(stmt, tuple):
            _check_block_independence(state, stmt)
            for op in stmt:
                _exec_one(state, op)
        else:
            _exec_one(state, stmt)
    outputs = {}
    for name, reg in meta["outputs"].items():
        flat = state.l0.read_ints(
            reg["addr"], math.prod(reg["dims"]), reg["bits"]
        )
        outputs[name] = _hwc_unflat(flat, tuple(reg["dims"]))
    return outputs


def _check_block_independence(state: MachineState, block):
    sets = [op_regions(op, state.ctx) for op in block]
    for i in range(len(sets)):
        for j in range(len(sets)):
            if i == j:
                continue
            for wr in sets[i][1]:
                for other in sets[j][1]:
                    if wr[0] == other[0] and wr[1] < other[2] and other[1] < wr[2]:
                        raise ParallelConflictError(
                            f"parallel ops both write {wr[0]}"
                        )
                for rd in sets[j][0]:
                    if wr[0] == rd[0] and wr[1] < rd[2] and rd[1] < wr[2]:
                        raise ParallelConflictError(
                            f"parallel op reads a sibling's destination {wr[0]}"
                        )


# -- performance model -----------------------------------------------------------


@dataclass
class SimReport:
    total_cycles: int = 0
    setup_cycles: int = 0
    compute_cycles: int = 0
    peak_active_crossbars: int = 0
    peak_power_proxy: float = 0.0
    utilization: float = 0.0
    crossbar_busy_cycles: int = 0
    active_trace: list = field(default_factory=list)
    op_times: list = field(default_factory=list)

    def to_json(self):
        return {
            "total_cycles": self.total_cycles,
            "setup_cycles": self.setup_cycles,
            "compute_cycles": self.compute_cycles,
            "peak_active_crossbars": self.peak_active_crossbars,
            "peak_power_proxy": round(self.peak_power_proxy, 6),
            "utilization": round(self.utilization, 6),
            "crossbar_busy_cycles": self.crossbar_busy_cycles,
        }

    def summary(self) -> str:
        rows = [
            ("total cycles", self.total_cycles),
            ("setup cycles", self.setup_cycles),
            ("compute cycles", self.compute_cycles),
            ("peak active crossbars", self.peak_active_crossbars),
            ("peak power proxy", f"{self.peak_power_proxy:.4f}"),
            ("crossbar utilization", f"{self.utilization:.4f}"),
        ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {val}" for name, val in rows)


class _RegionClock:
    """Per-byte last-writer / last-reader times for one address space."""

    def __init__(self):
        self.w = np.zeros(256, dtype=np.int64)
        self.r = np.zeros(256, dtype=np.int64)

    def _ensure(self, hi):
        if hi > len(self.w):
            n = max(hi, 2 * len(self.w))
            w2 = np.zeros(n, dtype=np.int64)
            w2[: len(self.w)] = self.w
            r2 = np.zeros(n, dtype=np.int64)
            r2[: len(self.r)] = self.r
            self.w, self.r = w2, r2

    def ready(self, reads, writes) -> int:
        t = 0
        for lo, hi in reads:
            self._ensure(hi)
            if hi > lo:
                t = max(t, int(self.w[lo:hi].max()))
        for lo, hi in writes:
            self._ensure(hi)
            if hi > lo:
                t = max(t, int(self.w[lo:hi].max()), int(self.r[lo:hi].max()))
        return t

    def commit(self, reads, writes, end):
        for lo, hi in reads:
            np.maximum(self.r[lo:hi], end, out=self.r[lo:hi])
        for lo, hi in writes:
            self.w[lo:hi] = end


class PerfEngine:
    def __init__(self, flow: Flow, hw: HwSpec, record_ops=False):
        self.flow = flow
        self.hw = hw
        self.ctx = FlowContext(flow)
        self.clocks: dict = {}
        self.resource_free: dict = {}
        self.intervals = []  # (start, end, category, count)
        self.barrier = 0
        self.record_ops = record_ops
        self.op_times = []

    def clock(self, space) -> _RegionClock:
        if space not in self.clocks:
            self.clocks[space] = _RegionClock()
        return self.clocks[space]

    def _resource(self, op):
        if isinstance(op, (ReadXb, ReadRows, WriteXb, WriteRows)):
            return ("xb", op.core, op.xb)
        if isinstance(op, ReadCore):
            return ("core", op.core)
        return None

    def duration(self, op) -> int:
        hw = self.hw
        if isinstance(op, ReadXb):
            xb = self.ctx.xb_extent(op.core, op.xb)
            syms = self.ctx.xb_writes.get((op.core, op.xb), [])
            in_bits = self.ctx.tile_meta(syms[0]).get("in_bits", 8) if syms else 8
            return cycles_per_mvm(hw, max(1, xb[0]), in_bits)
        if isinstance(op, ReadRows):
            syms = self.ctx.xb_writes.get((op.core, op.xb), [])
            in_bits = self.ctx.tile_meta(syms[0]).get("in_bits", 8) if syms else 8
            return cycles_per_mvm(hw, op.row_hi - op.row_lo + 1, in_bits)
        if isinstance(op, (WriteXb, WriteRows)):
            meta = self.ctx.tile_meta(op.src)
            return meta["rows"] * hw.xbar.write_cycles
        if isinstance(op, ReadCore):
            params = self.ctx.tile_meta(op.param)
            band = next((b for b in params.get("bands", []) if b["des"] == op.des), None)
            return band["cycles"] if band else 0
        if isinstance(op, Mov):
            bws = []
            for level in (op.src_level, op.des_level):
                bw = (hw.chip.l0_bw_bits_per_cycle if level == "L0"
                      else hw.core.l1_bw_bits_per_cycle)
                if bw is not None:
                    bws.append(bw)
            cycles = math.ceil(op.len_bits / min(bws)) if bws else 0
            if op.src_level != op.des_level and hw.chip.noc_cost_cycles_per_bit:
                cycles += math.ceil(op.len_bits * hw.chip.noc_cost_cycles_per_bit)
            return cycles
        if isinstance(op, Dcom):
            params = self.ctx.tile_meta(op.param) if op.param != "-" else {}
            level = params.get("level", "L0")
            alu = (hw.chip.alu_ops_per_cycle if level == "L0"
                   else hw.core.alu_ops_per_cycle)
            if alu is None:
                return 0
            return math.ceil(op.len * params.get("in_per_out", 1) / alu)
        if isinstance(op, Reprogram):
            return op.rows * hw.xbar.write_cycles
        return 0

    def _category(self, op):
        if isinstance(op, (ReadXb, ReadRows)):
            return "xb", 1
        if isinstance(op, ReadCore):
            params = self.ctx.tile_meta(op.param)
            return "xb", params.get("xbars_active", 1)
        if isinstance(op, Mov):
            return "mov", 1
        if isinstance(op, (WriteXb, WriteRows)):
            return "mov", 1
        return None

    def ready_time(self, op) -> int:
        reads, writes = op_regions(op, self.ctx)
        t = self.barrier
        by_space: dict = {}
        for space, lo, hi in reads:
            by_space.setdefault(space, ([], []))[0].append((lo, hi))
        for space, lo, hi in writes:
            by_space.setdefault(space, ([], []))[1].append((lo, hi))
        for space, (rd, wr) in by_space.items():
            t = max(t, self.clock(space).ready(rd, wr))
        res = self._resource(op)
        if res is not None:
            t = max(t, self.resource_free.get(res, 0))
        return t

    def commit(self, op, start: int):
        end = start + self.duration(op)
        reads, writes = op_regions(op, self.ctx)
        by_space: dict = {}
        for space, lo, hi in reads:
            by_space.setdefault(space, ([], []))[0].append((lo, hi))
        for space, lo, hi in writes:
            by_space.setdefault(space, ([], []))[1].append((lo, hi))
        for space, (rd, wr) in by_space.items():
            self.clock(space).commit(rd, wr, end)
        res = self._resource(op)
        if res is not None:
            self.resource_free[res] = end
        cat = self._category(op)
        if cat and end > start:
            self.intervals.append((start, end, cat[0], cat[1]))
        if isinstance(op, Reprogram):
            self.barrier = end
        if self.record_ops:
            self.op_times.append((op, start, end))
        return end

    def run(self) -> SimReport:
        total = 0
        setup = 0
        in_preamble = True
        for stmt in self.flow.statements:
            ops = stmt if isinstance(stmt, tuple) else (stmt,)
            if in_preamble and not all(isinstance(o, (WriteXb, WriteRows)) for o in ops):
                in_preamble = False
            start = max(self.ready_time(op) for op in ops)
            for op in ops:
                total = max(total, self.commit(op, start))
            if in_preamble:
                setup = total
        report = SimReport(total_cycles=total, setup_cycles=setup,
                           compute_cycles=total - setup)
        self._finalize(report)
        return report

    def _finalize(self, report: SimReport):
        weights = self.hw.power_weights
        cat_w = {"xb": weights["xb_active"] + weights["adc_dac"],
                 "mov": weights["data_move"]}
        events = []
        busy = 0
        for start, end, cat, count in self.intervals:
            events.append((start, cat, count))
            events.append((end, cat, -count))
            if cat == "xb":
                busy += (end - start) * count
        # ends before starts at the same cycle: intervals are half-open
        events.sort(key=lambda e: (e[0], e[2]))
        level = {"xb": 0, "mov": 0}
        peak_xb, peak_proxy = 0, 0.0
        trace = []
        for cycle, cat, delta in events:
            level[cat] += delta
            proxy = cat_w["xb"] * level["xb"] + cat_w["mov"] * level["mov"]
            peak_xb = max(peak_xb, level["xb"])
            peak_proxy = max(peak_proxy, proxy)
            trace.append((cycle, level["xb"], level["mov"]))
        report.peak_active_crossbars = peak_xb
        report.peak_power_proxy = peak_proxy
        report.crossbar_busy_cycles = busy
        report.active_trace = trace
        denom = report.total_cycles * self.hw.total_crossbars
        report.utilization = busy / denom if denom else 0.0
        report.op_times = self.op_times


def perf_model(flow: Flow, hw: HwSpec, record_ops: bool = False) -> SimReport:
    """Cycle estimate plus active-unit trace and peak-power proxy."""
    return PerfEngine(flow, hw, record_ops=record_ops).run()
