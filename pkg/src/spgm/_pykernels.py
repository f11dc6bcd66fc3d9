"""Pure-numpy versions of the compiled kernels in ``_ckernels.pyx``."""
import math

import numpy as np


def scatter_frames(frames, hop, out_len):
    """Overlap-add ``frames[f, l, :]`` into ``out[f * hop + l, :]``."""
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    n_frames, frame_len, channels = frames.shape
    if n_frames and (n_frames - 1) * hop + frame_len > out_len:
        raise ValueError("frames extend past the output length")
    out = np.zeros((out_len, channels))
    stop = (n_frames - 1) * hop + 1
    for l in range(frame_len):
        out[l:l + stop:hop] += frames[:, l, :]
    return out


def sinc_resample(x, factor, half_taps=8):
    """Read ``x`` at positions ``n * factor`` through a Hann-windowed sinc."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    n_in = x.shape[0]
    n_out = int(round(n_in / factor))
    cutoff = min(1.0, 1.0 / factor)
    pos = np.arange(n_out) * factor
    base = np.floor(pos).astype(np.int64)
    taps = np.arange(-half_taps + 1, half_taps + 1)
    idx = base[:, None] + taps[None, :]
    u = pos[:, None] - idx
    win = np.where(np.abs(u) < half_taps, 0.5 * (1.0 + np.cos(math.pi * u / half_taps)), 0.0)
    h = cutoff * np.sinc(cutoff * u) * win
    valid = (idx >= 0) & (idx < n_in)
    vals = np.where(valid, x[np.clip(idx, 0, max(n_in - 1, 0))], 0.0)
    return (vals * h).sum(axis=1)
