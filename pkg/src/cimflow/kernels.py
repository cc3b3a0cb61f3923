"""Crossbar MAC kernel with a compiled fast path.

The per-column dot product over activated rows is the hot loop of functional
simulation: every ReadCore/ReadXb/ReadRows lands here once per activation.
When the Cython extension `cimflow._kernels` has been built it is selected at
import time; otherwise a vectorised numpy implementation with identical
integer semantics takes over.  Set CIMFLOW_KERNEL=numpy|cython to force a
backend (useful for the benchmark and for differential tests).

Semantics: given unsigned cell values in [0, 2^cell_bits) and per-column
top-plane flags, a flagged column's cells are read as signed cell_bits-wide
values (two's complement).  The result is the exact int64 dot product of the
input slice with each column.
"""

from __future__ import annotations

import os

import numpy as np

_FORCED = os.environ.get("CIMFLOW_KERNEL", "auto").lower()

_compiled = None
if _FORCED in ("auto", "cython"):
    try:
        from . import _kernels as _compiled  # noqa: F401
    except ImportError:
        _compiled = None
        if _FORCED == "cython":
            raise ImportError(
                "CIMFLOW_KERNEL=cython but the compiled extension is not built; "
                "run `pip install -e . --no-build-isolation` or `python setup.py build_ext --inplace`"
            )

BACKEND = "cython" if _compiled is not None else "numpy"


def mac_columns_numpy(cells: np.ndarray, top_flags: np.ndarray, inp: np.ndarray,
                      cell_bits: int) -> np.ndarray:
    """Reference numpy implementation of the column MAC."""
    cells64 = cells.astype(np.int64)
    inp = np.ascontiguousarray(inp, dtype=np.int64)
    base = inp @ cells64
    half = 1 << (cell_bits - 1)
    if top_flags.any():
        sign_bias = (cells64 >= half).astype(np.int64) << cell_bits
        correction = inp @ sign_bias
        base = base - np.where(top_flags, correction, 0)
    return base


if BACKEND == "cython":

    def mac_columns(cells, top_flags, inp, cell_bits):
        out = np.zeros(cells.shape[1], dtype=np.int64)
        _compiled.mac_columns(
            np.ascontiguousarray(cells, dtype=np.uint8),
            np.ascontiguousarray(top_flags, dtype=np.uint8),
            np.ascontiguousarray(inp, dtype=np.int64),
            cell_bits,
            out,
        )
        return out

else:
    mac_columns = mac_columns_numpy


mac_columns.__doc__ = "Per-column signed dot product of `inp` with `cells`."
