# cython: boundscheck=False, wraparound=False, language_level=3
"""Compiled crossbar MAC kernel; semantics mirror kernels.mac_columns_numpy."""


def mac_columns(const unsigned char[:, ::1] cells,
                const unsigned char[::1] top_flags,
                const long long[::1] inp,
                int cell_bits,
                long long[::1] out):
    cdef Py_ssize_t rows = cells.shape[0]
    cdef Py_ssize_t cols = cells.shape[1]
    cdef Py_ssize_t r, c
    cdef long long acc, x, v
    cdef long long half = 1 << (cell_bits - 1)
    cdef long long full = 1 << cell_bits
    for c in range(cols):
        acc = 0
        if top_flags[c]:
            for r in range(rows):
                x = inp[r]
                if x != 0:
                    v = cells[r, c]
                    if v >= half:
                        v -= full
                    acc += x * v
        else:
            for r in range(rows):
                x = inp[r]
                if x != 0:
                    acc += x * <long long> cells[r, c]
        out[c] = acc
