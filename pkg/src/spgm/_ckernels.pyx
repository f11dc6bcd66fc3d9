# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled scatter and resampling loops."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, floor, fabs, M_PI

cnp.import_array()


def scatter_frames(frames, Py_ssize_t hop, Py_ssize_t out_len):
    """Overlap-add ``frames[f, l, :]`` into ``out[f * hop + l, :]``."""
    cdef const double[:, :, ::1] fr = np.ascontiguousarray(frames, dtype=np.float64)
    cdef Py_ssize_t n_frames = fr.shape[0], frame_len = fr.shape[1], channels = fr.shape[2]
    if n_frames and (n_frames - 1) * hop + frame_len > out_len:
        raise ValueError("frames extend past the output length")
    out_arr = np.zeros((out_len, channels))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t f, l, c, t
    for f in range(n_frames):
        for l in range(frame_len):
            t = f * hop + l
            for c in range(channels):
                out[t, c] += fr[f, l, c]
    return out_arr


def sinc_resample(x, double factor, int half_taps=8):
    """Read ``x`` at positions ``n * factor`` through a Hann-windowed sinc."""
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n_in = xv.shape[0]
    cdef Py_ssize_t n_out = <Py_ssize_t>round(n_in / factor)
    cdef double cutoff = 1.0 if factor <= 1.0 else 1.0 / factor
    out_arr = np.zeros(n_out)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t n, j, base
    cdef double pos, u, w, arg, h, acc
    for n in range(n_out):
        pos = n * factor
        base = <Py_ssize_t>floor(pos)
        acc = 0.0
        for j in range(base - half_taps + 1, base + half_taps + 1):
            if j < 0 or j >= n_in:
                continue
            u = pos - j
            if fabs(u) >= half_taps:
                continue
            w = 0.5 * (1.0 + cos(M_PI * u / half_taps))
            arg = M_PI * cutoff * u
            if arg == 0.0:
                h = cutoff
            else:
                h = cutoff * sin(arg) / arg
            acc += xv[j] * h * w
        out[n] = acc
    return out_arr
