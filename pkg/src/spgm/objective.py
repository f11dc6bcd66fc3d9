"""SI-SDR, SI-SDR improvement and utterance-level PIT loss."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from spgm.tensor import (Tensor, ShapeError, as_tensor, center, index, log10, mul,
                         stack, tsum)

EPS = 1e-8
CLAMP_DB = -30.0


def _dot(a: Tensor, b: Tensor) -> Tensor:
    return tsum(a * b)


def si_sdr(est, ref, eps: float = EPS) -> Tensor:
    """Scale-invariant SDR in dB between two 1-D signals."""
    est, ref = as_tensor(est), as_tensor(ref)
    if est.ndim != 1 or est.shape != ref.shape:
        raise ShapeError(f"si_sdr expects equal 1-D signals, got {est.shape}, {ref.shape}")
    if not np.any(ref.data):
        raise ValueError("reference signal is all zeros")
    est, ref = center(est), center(ref)
    ref_energy = _dot(ref, ref)
    if ref_energy.item() == 0.0:
        raise ValueError("reference signal is constant")
    target = ref * (_dot(est, ref) / ref_energy)
    noise = est - target
    ratio = (_dot(target, target) + eps) / (_dot(noise, noise) + eps)
    return mul(log10(ratio), 10.0)


def si_sdr_improvement(est, ref, mix) -> float:
    return si_sdr(est, ref).item() - si_sdr(mix, ref).item()


@dataclass
class PitResult:
    loss: Tensor                     # scalar, clamped if requested
    permutation: tuple[int, ...]     # permutation[c] = reference matched to estimate c
    per_pair_sisdr: np.ndarray       # [C, C], rows = estimates, cols = references
    raw_loss: float                  # before clamping


def upit_loss(ests, refs, clamp: bool = True, clamp_db: float = CLAMP_DB) -> PitResult:
    """Negative mean SI-SDR under the best estimate-to-reference assignment.

    All ``C!`` assignments are scored; ties go to the lexicographically
    smallest permutation. With ``clamp`` the loss is floored at ``clamp_db``
    (the floored value carries no gradient).
    """
    ests, refs = as_tensor(ests), as_tensor(refs)
    if ests.ndim != 2 or ests.shape != refs.shape:
        raise ShapeError(f"upit_loss expects matching [C, T], got {ests.shape}, {refs.shape}")
    c = ests.shape[0]
    if c > 4:
        raise ValueError("factorial PIT supports at most 4 sources")
    pairs = [[si_sdr(index(ests, i), index(refs, j)) for j in range(c)] for i in range(c)]
    table = np.array([[p.item() for p in row] for row in pairs])
    best, best_score = None, -np.inf
    for perm in itertools.permutations(range(c)):
        score = np.mean([table[i, perm[i]] for i in range(c)])
        if score > best_score:
            best, best_score = perm, score
    loss = mul(tsum(stack([pairs[i][best[i]] for i in range(c)])), -1.0 / c)
    raw = loss.item()
    if clamp and raw < clamp_db:
        loss = Tensor(clamp_db)
    return PitResult(loss, tuple(best), table, raw)
