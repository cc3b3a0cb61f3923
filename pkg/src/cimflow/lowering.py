"""Weight-matrix derivation, bit slicing and virtual-crossbar (VXB) tiling.

A CIM-supported operator contributes one logical weight matrix:

* Conv (K,C,R,S): rows ordered (r, s, c) lexicographic -- all input channels
  of one kernel tap are adjacent, matching the channel-contiguous activation
  layout so a sliding window gathers one contiguous run per tap.  Columns are
  the K output channels.
* FC (out,in): rows are the flattened input, columns the outputs.

Bit slicing follows the dimension binding.  With B->XBC the ceil(wb/cb)
slices of one weight sit in adjacent physical columns, least-significant
first; with B->XB each slice plane becomes a separate crossbar.  Signed
weights use two's complement with the top slice sign-weighted negative, so a
shift-add over the slices reconstructs the exact signed value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .arch import HwSpec
from .errors import CapacityError, UnsupportedOp, ValidationError
from .graph import OpNode

XBR, XBC, XB = "XBR", "XBC", "XB"


@dataclass(frozen=True)
class DimBinding:
    """Where matrix rows, columns and weight bits land on crossbars."""

    r_to: str = XBR
    c_to: str = XBC
    b_to: str = XBC  # XBC: bits in adjacent columns; XB: one crossbar per plane

    def __post_init__(self):
        if self.r_to != XBR or self.c_to != XBC:
            raise ValidationError("rows must bind to XBR and columns to XBC")
        if self.b_to not in (XBC, XB):
            raise ValidationError(f"bits must bind to XBC or XB, got {self.b_to!r}")


DEFAULT_BINDING = DimBinding()


@dataclass(frozen=True)
class WeightMatrix:
    """Logical matrix of one operator plus its bit-sliced physical extent."""

    node_id: int
    logical_rows: int
    logical_cols: int
    weight_bits: int
    phys_rows: int
    phys_cols: int
    bit_planes: int  # > 1 only for the B->XB binding
    binding: DimBinding

    @property
    def slices(self) -> int:
        """Cell slices per weight value, independent of where they land."""
        return self.phys_cols // self.logical_cols if self.bit_planes == 1 else self.bit_planes


@dataclass(frozen=True)
class VxbPlan:
    """Crossbar tiling of one replica of an operator."""

    node_id: int
    num_vxb: int
    xbars_per_vxb: int
    v_tiles: int
    h_tiles: int
    bit_planes: int
    core_vxb: int
    cores_per_replica: int
    row_tiles: tuple  # per vertical tile: rows occupied
    col_tiles: tuple  # per horizontal tile: physical columns occupied


def conv_row_index(r: int, s: int, c: int, kern_dims) -> int:
    """Matrix row of kernel tap (r, s) and input channel c."""
    _, channels, _, taps_s = kern_dims
    return (r * taps_s + s) * channels + c


def weight_matrix_of(node: OpNode, hw: HwSpec, binding: DimBinding = DEFAULT_BINDING) -> WeightMatrix:
    """Logical and bit-sliced physical dimensions of a node's weight matrix."""
    if not node.is_cim:
        raise UnsupportedOp(f"node {node.id} ({node.kind}) runs on the ALU, not crossbars")
    wspec = node.weight_spec()
    if node.kind == "Conv":
        k, c, r, s = wspec.dims
        rows, cols = c * r * s, k
    else:
        out_f, in_f = wspec.dims
        rows, cols = in_f, out_f
    slices = math.ceil(wspec.precision_bits / hw.xbar.cell_precision_bits)
    if binding.b_to == XBC:
        return WeightMatrix(node.id, rows, cols, wspec.precision_bits,
                            rows, cols * slices, 1, binding)
    return WeightMatrix(node.id, rows, cols, wspec.precision_bits,
                        rows, cols, slices, binding)


def _tile_sizes(total: int, tile: int) -> tuple:
    count = math.ceil(total / tile)
    return tuple(min(tile, total - i * tile) for i in range(count))


def vxb_plan(wm: WeightMatrix, hw: HwSpec) -> VxbPlan:
    """Tile a physical weight matrix onto crossbars.

    One VXB performs one MVM; an operator bigger than a crossbar grows
    xbars_per_vxb (v x h x planes), never num_vxb.
    """
    row_tiles = _tile_sizes(wm.phys_rows, hw.xbar.xb_rows)
    col_tiles = _tile_sizes(wm.phys_cols, hw.xbar.xb_cols)
    v, h = len(row_tiles), len(col_tiles)
    xbars = v * h * wm.bit_planes
    if xbars > hw.total_crossbars:
        raise CapacityError(
            f"node {wm.node_id} needs {xbars} crossbars; chip has {hw.total_crossbars}"
        )
    return VxbPlan(
        node_id=wm.node_id,
        num_vxb=1,
        xbars_per_vxb=xbars,
        v_tiles=v,
        h_tiles=h,
        bit_planes=wm.bit_planes,
        core_vxb=hw.core.xb_number // xbars,
        cores_per_replica=max(1, math.ceil(xbars / hw.core.xb_number)),
        row_tiles=row_tiles,
        col_tiles=col_tiles,
    )


def mvm_count(node: OpNode) -> int:
    """MVMs needed by one replica: sliding windows for conv, 1 for FC."""
    if not node.is_cim:
        raise UnsupportedOp(f"node {node.id} ({node.kind}) performs no MVMs")
    if node.kind == "FC":
        return 1
    if node.out_spec is None:
        raise ValidationError(f"node {node.id} has no inferred output shape")
    _, h_out, w_out = node.out_spec.dims
    return h_out * w_out


# -- bit slicing -------------------------------------------------------------


def slice_planes(weights: np.ndarray, weight_bits: int, cell_bits: int) -> np.ndarray:
    """Split signed integer weights into unsigned cell slices.

    Returns an array of shape (slices,) + weights.shape with values in
    [0, 2^cell_bits); slice 0 is least significant.  Reassembly applies
    2^(i*cell_bits) per slice with the top slice interpreted as a signed
    cell_bits-wide value.
    """
    n = math.ceil(weight_bits / cell_bits)
    unsigned = np.asarray(weights, dtype=np.int64) & ((1 << weight_bits) - 1)
    mask = (1 << cell_bits) - 1
    return np.stack([(unsigned >> (i * cell_bits)) & mask for i in range(n)]).astype(np.uint8)


def assemble_planes(planes: np.ndarray, weight_bits: int, cell_bits: int) -> np.ndarray:
    """Inverse of slice_planes; exact for all representable signed values."""
    n = planes.shape[0]
    half = 1 << (cell_bits - 1)
    acc = np.zeros(planes.shape[1:], dtype=np.int64)
    for i in range(n - 1):
        acc += planes[i].astype(np.int64) << (i * cell_bits)
    top = planes[n - 1].astype(np.int64)
    top = top - ((top >= half).astype(np.int64) << cell_bits)
    acc += top << ((n - 1) * cell_bits)
    return acc


def node_weight_matrix_values(node: OpNode, weights: np.ndarray) -> np.ndarray:
    """Arrange a node's weight tensor as its logical (rows, cols) matrix."""
    wspec = node.weight_spec()
    weights = np.asarray(weights, dtype=np.int64).reshape(wspec.dims)
    if node.kind == "Conv":
        k, c, r, s = wspec.dims
        # (K,C,R,S) -> rows (r,s,c), cols k
        return weights.transpose(2, 3, 1, 0).reshape(r * s * c, k)
    out_f, in_f = wspec.dims
    return weights.transpose(1, 0).reshape(in_f, out_f)


def sliced_cell_matrix(node: OpNode, weights: np.ndarray, hw: HwSpec,
                       binding: DimBinding = DEFAULT_BINDING):
    """Physical cell values plus per-column top-plane flags.

    Returns (cells, top_flags) where cells has shape (planes, phys_rows,
    phys_cols_per_plane) and top_flags marks columns whose cells carry the
    sign-weighted top slice.
    """
    wm = weight_matrix_of(node, hw, binding)
    logical = node_weight_matrix_values(node, weights)
    planes = slice_planes(logical, wm.weight_bits, hw.xbar.cell_precision_bits)
    n = planes.shape[0]
    if binding.b_to == XB:
        flags = np.zeros((n, wm.logical_cols), dtype=bool)
        flags[n - 1, :] = True
        return planes, flags
    # interleave slices of one weight into adjacent columns
    cells = np.empty((1, wm.phys_rows, wm.phys_cols), dtype=np.uint8)
    for i in range(n):
        cells[0, :, i::n] = planes[i]
    flags = np.zeros((1, wm.phys_cols), dtype=bool)
    flags[0, n - 1::n] = True
    return cells, flags


def mvm_count_bruteforce(node: OpNode, input_dims) -> int:
    """Independent sliding-window enumeration used as a test oracle."""
    if node.kind != "Conv":
        raise UnsupportedOp("brute-force window count is defined for Conv only")
    _, h, w = input_dims
    _, _, r, s = node.attrs["kernel"].dims
    stride, pad = node.attrs["stride"], node.attrs["padding"]
    count = 0
    top = -pad
    while top + r <= h + pad:
        left = -pad
        while left + s <= w + pad:
            count += 1
            left += stride
        top += stride
    return count
