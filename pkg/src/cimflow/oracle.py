"""Reference evaluator: direct integer execution of a computation graph.

This is the verification oracle for the functional simulator.  It works on
logical (C, H, W) arrays with full-precision weights and shares nothing with
the crossbar execution path (no bit slicing, no buffers, no meta-ops);
only the per-node requantization rule is common, since that is part of the
operator definition.

Semantics: Conv/FC accumulate in int64, arithmetic-right-shift by the node's
requant amount, saturate to the output precision.  Relu clamps at zero.
Pools slide without padding; average pooling floor-divides.  Add saturates
to 32 bits.
"""

from __future__ import annotations

import numpy as np

from .emit import requant_shift
from .graph import CompGraph


def _saturate(values, bits):
    return np.clip(values, -(1 << (bits - 1)), (1 << (bits - 1)) - 1)


def _conv(node, x, w, shift):
    k, c, taps_r, taps_s = w.shape
    _, h_in, w_in = x.shape
    stride, pad = node.attrs["stride"], node.attrs["padding"]
    h_out = (h_in + 2 * pad - taps_r) // stride + 1
    w_out = (w_in + 2 * pad - taps_s) // stride + 1
    padded = np.zeros((c, h_in + 2 * pad, w_in + 2 * pad), dtype=np.int64)
    padded[:, pad:pad + h_in, pad:pad + w_in] = x
    out = np.zeros((k, h_out, w_out), dtype=np.int64)
    for oh in range(h_out):
        for ow in range(w_out):
            window = padded[:, oh * stride:oh * stride + taps_r,
                            ow * stride:ow * stride + taps_s]
            out[:, oh, ow] = np.tensordot(w, window, axes=([1, 2, 3], [0, 1, 2]))
    return _saturate(out >> shift, 8)


def _fc(node, x, w, shift):
    flat = x.transpose(1, 2, 0).reshape(-1) if x.ndim == 3 else x.reshape(-1)
    acc = w.astype(np.int64) @ flat
    return _saturate(acc >> shift, 8)


def _pool(node, x, op):
    k, stride = node.attrs["kernel"], node.attrs["stride"]
    c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    out = np.zeros((c, oh, ow), dtype=np.int64)
    for i in range(oh):
        for j in range(ow):
            patch = x[:, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, i, j] = patch.max(axis=(1, 2)) if op == "max" else (
                patch.sum(axis=(1, 2)) // (k * k)
            )
    return out


def reference_oracle(graph: CompGraph, inputs: dict, weights: dict) -> dict:
    """Evaluate the graph; returns {"out<k>": int64 array in logical layout}."""
    values: dict = {}
    weights = {int(str(k).lstrip("w")): np.asarray(v, dtype=np.int64)
               for k, v in weights.items()}

    def fetch(ref):
        if isinstance(ref, str):
            return np.asarray(inputs[ref], dtype=np.int64)
        return values[ref]

    for nid in graph.topo():
        node = graph.nodes[nid]
        ins = [fetch(r) for r in node.inputs]
        if node.kind == "Conv":
            in_bits = graph.input_spec_of(node.inputs[0]).precision_bits
            values[nid] = _conv(node, ins[0], weights[nid], requant_shift(node, in_bits))
        elif node.kind == "FC":
            in_bits = graph.input_spec_of(node.inputs[0]).precision_bits
            values[nid] = _fc(node, ins[0], weights[nid], requant_shift(node, in_bits))
        elif node.kind == "Relu":
            values[nid] = np.maximum(ins[0], 0)
        elif node.kind == "MaxPool":
            values[nid] = _pool(node, ins[0], "max")
        elif node.kind == "AvgPool":
            values[nid] = _pool(node, ins[0], "avg")
        elif node.kind == "Add":
            values[nid] = _saturate(ins[0] + ins[1], 32)
    return {f"out{k}": values[nid] for k, nid in enumerate(graph.outputs)}
