"""Meta-operator flow: typed instructions, textual form, static checks.

A flow is an ordered list of statements; a statement is a single meta-op or
a parallel block of meta-ops that execute simultaneously.  The textual `.mof`
form is line oriented:

    !arch <sha256 of the arch file>
    !sym p0 {"kind":"Conv",...}          # symbol-table entry (compact JSON)
    !reprogram 128                       # subgraph boundary: rows to rewrite
    # comment
    mov(L0,0,L1.0,0,216)
    cim.write_xb(0,1,w0.r0.v0.h0.b0)
    parallel{cim.read_xb(0,0,0,108),cim.read_xb(0,1,108,216)}
    dcom(relu,-,3072,35840,32768)

Addresses are byte offsets inside a buffer level ("L0" or "L1.<core>");
mov lengths are bits.  Activations occupy ceil(precision/8) bytes per
element, MVM partial sums 4 bytes.  The symbol table makes a flow file
self-contained: `p<n>` entries carry operator attributes, `w<n>...` entries
describe which weight-matrix tile a crossbar write places.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass

from .errors import FlowSyntaxError, SemanticError

DCOM_FUNCS = ("relu", "add", "shift_acc", "maxpool", "avgpool", "requant")


@dataclass(frozen=True)
class ReadCore:
    """MOP_CM: one core executes a whole operator band."""

    op_kind: str
    param: str
    core: int
    src: int
    des: int


@dataclass(frozen=True)
class ReadXb:
    """MOP_XBM: one crossbar performs an MVM over its written rows."""

    core: int
    xb: int
    src: int
    des: int


@dataclass(frozen=True)
class WriteXb:
    """MOP_XBM: program a crossbar with the weight tile named by `src`."""

    core: int
    xb: int
    src: str


@dataclass(frozen=True)
class ReadRows:
    """MOP_WLM: activate rows [row_lo, row_hi] of one crossbar."""

    core: int
    xb: int
    row_lo: int
    row_hi: int
    src: int
    des: int


@dataclass(frozen=True)
class WriteRows:
    """MOP_WLM: program rows [row_lo, row_hi] with the tile named by `src`."""

    core: int
    xb: int
    row_lo: int
    row_hi: int
    src: str


@dataclass(frozen=True)
class Dcom:
    """Digital compute on a buffer region.  `param` names func attributes."""

    func: str
    param: str
    src: int
    des: int
    len: int


@dataclass(frozen=True)
class Mov:
    """Data movement of `len_bits` bits between buffer levels."""

    src_level: str
    src_addr: int
    des_level: str
    des_addr: int
    len_bits: int


@dataclass(frozen=True)
class Reprogram:
    """Subgraph boundary marker: crossbars are rewritten before continuing."""

    rows: int


READ_OPS = (ReadCore, ReadXb, ReadRows)
WRITE_OPS = (WriteXb, WriteRows)

MODE_ALLOWED = {
    "cm": (ReadCore, Dcom, Mov, Reprogram),
    "xbm": (ReadXb, WriteXb, Dcom, Mov, Reprogram),
    "wlm": (ReadRows, WriteRows, Dcom, Mov, Reprogram),
}


class Flow:
    """Ordered meta-op statements plus the symbol table they reference."""

    def __init__(self, statements=None, symbols=None, arch_hash=None):
        self.statements: list = list(statements or [])
        self.symbols: dict = dict(symbols or {})
        self.arch_hash: str | None = arch_hash

    def append(self, op):
        self.statements.append(op)

    def parallel(self, ops):
        ops = list(ops)
        if len(ops) == 1:
            self.statements.append(ops[0])
        elif ops:
            self.statements.append(tuple(ops))

    def ops(self):
        """All meta-ops in program order, parallel blocks flattened."""
        for stmt in self.statements:
            if isinstance(stmt, tuple):
                yield from stmt
            else:
                yield stmt

    def parallel_blocks(self):
        return [stmt for stmt in self.statements if isinstance(stmt, tuple)]

    def count(self, op_type) -> int:
        return sum(isinstance(op, op_type) for op in self.ops())

    def __eq__(self, other):
        return (
            isinstance(other, Flow)
            and self.statements == other.statements
            and self.symbols == other.symbols
            and self.arch_hash == other.arch_hash
        )

    def __len__(self):
        return len(self.statements)


def arch_file_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# -- serialization -------------------------------------------------------------


def _render(op) -> str:
    if isinstance(op, ReadCore):
        return f"cim.read_core({op.op_kind},{op.param},{op.core},{op.src},{op.des})"
    if isinstance(op, ReadXb):
        return f"cim.read_xb({op.core},{op.xb},{op.src},{op.des})"
    if isinstance(op, WriteXb):
        return f"cim.write_xb({op.core},{op.xb},{op.src})"
    if isinstance(op, ReadRows):
        return f"cim.read_rows({op.core},{op.xb},{op.row_lo},{op.row_hi},{op.src},{op.des})"
    if isinstance(op, WriteRows):
        return f"cim.write_rows({op.core},{op.xb},{op.row_lo},{op.row_hi},{op.src})"
    if isinstance(op, Dcom):
        return f"dcom({op.func},{op.param},{op.src},{op.des},{op.len})"
    if isinstance(op, Mov):
        return f"mov({op.src_level},{op.src_addr},{op.des_level},{op.des_addr},{op.len_bits})"
    if isinstance(op, Reprogram):
        return f"!reprogram {op.rows}"
    raise TypeError(f"not a meta-op: {op!r}")


def serialize_flow(flow: Flow) -> str:
    lines = []
    if flow.arch_hash:
        lines.append(f"!arch {flow.arch_hash}")
    for name in sorted(flow.symbols):
        body = json.dumps(flow.symbols[name], separators=(",", ":"), sort_keys=True)
        lines.append(f"!sym {name} {body}")
    for stmt in flow.statements:
        if isinstance(stmt, tuple):
            lines.append("parallel{" + ",".join(_render(op) for op in stmt) + "}")
        else:
            lines.append(_render(stmt))
    return "\n".join(lines) + ("\n" if lines else "")


# -- parsing -------------------------------------------------------------------

_LEVEL = r"L0|L1\.\d+"
_SYM = r"[A-Za-z_][A-Za-z0-9_.]*"
_INT = r"-?\d+"

_PATTERNS = [
    (
        re.compile(rf"cim\.read_core\(({_SYM}),({_SYM}),({_INT}),({_INT}),({_INT})\)"),
        lambda m: ReadCore(m[1], m[2], int(m[3]), int(m[4]), int(m[5])),
    ),
    (
        re.compile(rf"cim\.read_xb\(({_INT}),({_INT}),({_INT}),({_INT})\)"),
        lambda m: ReadXb(int(m[1]), int(m[2]), int(m[3]), int(m[4])),
    ),
    (
        re.compile(rf"cim\.write_xb\(({_INT}),({_INT}),({_SYM})\)"),
        lambda m: WriteXb(int(m[1]), int(m[2]), m[3]),
    ),
    (
        re.compile(
            rf"cim\.read_rows\(({_INT}),({_INT}),({_INT}),({_INT}),({_INT}),({_INT})\)"
        ),
        lambda m: ReadRows(int(m[1]), int(m[2]), int(m[3]), int(m[4]), int(m[5]), int(m[6])),
    ),
    (
        re.compile(rf"cim\.write_rows\(({_INT}),({_INT}),({_INT}),({_INT}),({_SYM})\)"),
        lambda m: WriteRows(int(m[1]), int(m[2]), int(m[3]), int(m[4]), m[5]),
    ),
    (
        re.compile(rf"dcom\(({_SYM}),({_SYM}|-),({_INT}),({_INT}),({_INT})\)"),
        lambda m: Dcom(m[1], m[2], int(m[3]), int(m[4]), int(m[5])),
    ),
    (
        re.compile(rf"mov\(({_LEVEL}),({_INT}),({_LEVEL}),({_INT}),({_INT})\)"),
        lambda m: Mov(m[1], int(m[2]), m[3], int(m[4]), int(m[5])),
    ),
]


def _parse_instr(text: str, lineno: int, col: int):
    for pattern, build in _PATTERNS:
        m = pattern.fullmatch(text)
        if m:
            op = build(m)
            if isinstance(op, Dcom) and op.func not in DCOM_FUNCS:
                raise FlowSyntaxError(f"unknown dcom func {op.func!r}", lineno, col)
            return op
    raise FlowSyntaxError(f"unrecognised instruction {text!r}", lineno, col)


def _split_parallel(body: str, lineno: int, col0: int):
    """Split a parallel block body on top-level commas."""
    parts, depth, start = [], 0, 0
    for i, ch in enumerate(body):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise FlowSyntaxError("unbalanced ')'", lineno, col0 + i)
        elif ch == "," and depth == 0:
            parts.append((body[start:i], start))
            start = i + 1
    if depth != 0:
        raise FlowSyntaxError("unbalanced '('", lineno, col0 + len(body))
    parts.append((body[start:], start))
    return parts


def parse_flow(text: str) -> Flow:
    """Inverse of serialize_flow; raises FlowSyntaxError with position."""
    flow = Flow()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("!arch"):
            parts = line.split()
            if len(parts) != 2:
                raise FlowSyntaxError("!arch expects one hash", lineno, 1)
            flow.arch_hash = parts[1]
            continue
        if line.startswith("!sym"):
            parts = line.split(None, 2)
            if len(parts) != 3:
                raise FlowSyntaxError("!sym expects a name and a JSON body", lineno, 1)
            try:
                flow.symbols[parts[1]] = json.loads(parts[2])
            except json.JSONDecodeError as exc:
                raise FlowSyntaxError(f"bad symbol body: {exc}", lineno, 1) from exc
            continue
        if line.startswith("!reprogram"):
            parts = line.split()
            if len(parts) != 2 or not parts[1].isdigit():
                raise FlowSyntaxError("!reprogram expects a row count", lineno, 1)
            flow.append(Reprogram(int(parts[1])))
            continue
        if line.startswith("parallel{"):
            if not line.endswith("}"):
                raise FlowSyntaxError("unbalanced 'parallel{'", lineno, len(line))
            body = line[len("parallel{"):-1]
            ops = [
                _parse_instr(part.strip(), lineno, len("parallel{") + off + 1)
                for part, off in _split_parallel(body, lineno, len("parallel{") + 1)
            ]
            flow.parallel(ops)
            continue
        flow.append(_parse_instr(line, lineno, 1))
    return flow


# -- regions and static checks --------------------------------------------------


def elem_bytes(bits: int) -> int:
    return max(1, (bits + 7) // 8)


class FlowContext:
    """Resolves crossbar programming state needed to size op regions."""

    def __init__(self, flow: Flow):
        self.symbols = flow.symbols
        self.xb_writes: dict = {}  # (core, xb) -> list of write symbols
        for op in flow.ops():
            if isinstance(op, WriteXb):
                self.xb_writes.setdefault((op.core, op.xb), []).append(op.src)
            elif isinstance(op, WriteRows):
                self.xb_writes.setdefault((op.core, op.xb), []).append(op.src)

    def tile_meta(self, sym: str) -> dict:
        try:
            return self.symbols[sym]
        except KeyError:
            raise SemanticError(f"flow references undefined symbol {sym!r}") from None

    def xb_extent(self, core: int, xb: int):
        """(rows, cols) spanned by everything written to one crossbar."""
        rows = cols = 0
        for sym in self.xb_writes.get((core, xb), []):
            meta = self.tile_meta(sym)
            rows = max(rows, meta.get("xb_row_lo", 0) + meta["rows"])
            cols = max(cols, meta["cols"])
        return rows, cols


def op_regions(op, ctx: FlowContext):
    """(reads, writes) as lists of (space, lo, hi) byte extents."""
    reads, writes = [], []
    if isinstance(op, Mov):
        bytes_ = (op.len_bits + 7) // 8
        reads.append((op.src_level, op.src_addr, op.src_addr + bytes_))
        writes.append((op.des_level, op.des_addr, op.des_addr + bytes_))
    elif isinstance(op, ReadXb):
        rows, cols = ctx.xb_extent(op.core, op.xb)
        meta0 = ctx.tile_meta(ctx.xb_writes[(op.core, op.xb)][0]) if ctx.xb_writes.get(
            (op.core, op.xb)
        ) else {}
        in_bytes = elem_bytes(meta0.get("in_bits", 8))
        level = f"L1.{op.core}"
        reads.append((level, op.src, op.src + rows * in_bytes))
        reads.append((f"XBCELLS.{op.core}.{op.xb}", 0, rows))
        writes.append((level, op.des, op.des + cols * 4))
    elif isinstance(op, ReadRows):
        span = op.row_hi - op.row_lo + 1
        rows, cols = ctx.xb_extent(op.core, op.xb)
        meta0 = ctx.tile_meta(ctx.xb_writes[(op.core, op.xb)][0]) if ctx.xb_writes.get(
            (op.core, op.xb)
        ) else {}
        in_bytes = elem_bytes(meta0.get("in_bits", 8))
        level = f"L1.{op.core}"
        reads.append((level, op.src, op.src + span * in_bytes))
        reads.append((f"XBCELLS.{op.core}.{op.xb}", op.row_lo, op.row_hi + 1))
        writes.append((level, op.des, op.des + cols * 4))
    elif isinstance(op, (WriteXb, WriteRows)):
        meta = ctx.tile_meta(op.src)
        lo = getattr(op, "row_lo", meta.get("xb_row_lo", 0))
        writes.append((f"XBCELLS.{op.core}.{op.xb}", lo, lo + meta["rows"]))
    elif isinstance(op, ReadCore):
        meta = ctx.tile_meta(op.param)
        band = next((b for b in meta.get("bands", []) if b["des"] == op.des), None)
        if band is None:
            raise SemanticError(f"read_core des {op.des} matches no band of {op.param}")
        in_bytes = elem_bytes(meta.get("in_bits", 8))
        out_bytes = elem_bytes(meta.get("out_bits", 8))
        reads.append(("L0", op.src, op.src + band["in_elems"] * in_bytes))
        writes.append(("L0", op.des, op.des + band["out_elems"] * out_bytes))
    elif isinstance(op, Dcom):
        meta = ctx.tile_meta(op.param) if op.param != "-" else {}
        in_bytes = elem_bytes(meta.get("in_bits", 32))
        out_bytes = elem_bytes(meta.get("out_bits", 32))
        level = meta.get("level", "L0")
        n_in = meta.get("in_elems", op.len * meta.get("in_per_out", 1))
        reads.append((level, op.src, op.src + n_in * in_bytes))
        writes.append((level, op.des, op.des + op.len * out_bytes))
    elif isinstance(op, Reprogram):
        pass
    else:
        raise TypeError(f"not a meta-op: {op!r}")
    return reads, writes


def _overlap(a, b) -> bool:
    return a[0] == b[0] and a[1] < b[2] and b[1] < a[2]


def check_parallel_independence(flow: Flow):
    """Static check: members of a parallel block touch disjoint regions."""
    ctx = FlowContext(flow)
    for stmt in flow.statements:
        if not isinstance(stmt, tuple):
            continue
        sets = [op_regions(op, ctx) for op in stmt]
        for i in range(len(sets)):
            for j in range(len(sets)):
                if i == j:
                    continue
                for wr in sets[i][1]:
                    for other in sets[j][1]:
                        if _overlap(wr, other):
                            raise SemanticError(
                                f"parallel block: {stmt[i]} and {stmt[j]} both write "
                                f"{wr[0]}[{max(wr[1], other[1])}..)"
                            )
                    for rd in sets[j][0]:
                        if _overlap(wr, rd):
                            raise SemanticError(
                                f"parallel block: {stmt[j]} reads what {stmt[i]} writes"
                            )


def check_mode(flow: Flow, mode: str):
    """Instruction variants must match the computing mode."""
    allowed = MODE_ALLOWED[mode]
    for op in flow.ops():
        if not isinstance(op, allowed):
            raise SemanticError(
                f"{type(op).__name__} is not available in {mode.upper()} mode"
            )


def check_semantics(flow: Flow, hw):
    """Index ranges against a hardware spec, plus write-before-read order."""
    written = set()
    for op in flow.ops():
        core = getattr(op, "core", None)
        if core is not None and not 0 <= core < hw.chip.core_number:
            raise SemanticError(f"core {core} out of range in {_render(op)}")
        xb = getattr(op, "xb", None)
        if xb is not None and not 0 <= xb < hw.core.xb_number:
            raise SemanticError(f"crossbar {xb} out of range in {_render(op)}")
        if isinstance(op, (ReadRows, WriteRows)):
            if not 0 <= op.row_lo <= op.row_hi < hw.xbar.xb_rows:
                raise SemanticError(f"row range invalid in {_render(op)}")
            if isinstance(op, ReadRows) and op.row_hi - op.row_lo + 1 > hw.xbar.parallel_row:
                raise SemanticError(
                    f"read spans {op.row_hi - op.row_lo + 1} rows; "
                    f"parallel_row is {hw.xbar.parallel_row}"
                )
        if isinstance(op, WRITE_OPS):
            written.add((op.core, op.xb))
        if isinstance(op, (ReadXb, ReadRows)) and (op.core, op.xb) not in written:
            raise SemanticError(
                f"{_render(op)} reads a crossbar no earlier write programmed"
            )
