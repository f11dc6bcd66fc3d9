"""Central-difference gradient checks over every differentiable building block."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from spgm.block import PoolingMethod, SpgmParams, spgm_block_forward
from spgm.chunking import make_spec, overlap_add, segment
from spgm.layers import (ConvParams, TransformerLayerParams, conv1d, conv_transpose1d,
                         multi_head_attention, transformer_layer_forward)
from spgm.objective import upit_loss
from spgm.separator import ModelConfig, SeparatorModel, separate_forward
from spgm.tensor import Tensor, finite_diff_grad_check, layer_norm, tsum

LAYER_TOL = 1e-4
END_TO_END_TOL = 1e-3

# parameters whose exact gradient is zero (key bias under softmax; output
# offset under mean removal), where a relative error is meaningless
STRUCTURAL_ZERO_SUFFIXES = (".bk", "decoder.bias")

TINY = ModelConfig(channels=8, ffn=16, heads=2, enc_kernel=4, enc_stride=2, chunk_size=4,
                   num_blocks=1, intra_layers=1)


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.error < self.tolerance


def _probe(fn: Callable[[Tensor], Tensor], rng) -> Callable[[Tensor], Tensor]:
    r = {}

    def f(x):
        y = fn(x)
        if "w" not in r:
            r["w"] = Tensor(rng.normal(size=y.shape))
        return tsum(y * r["w"])

    return f


def _check(fn, x0, rng, max_elements=None):
    return finite_diff_grad_check(_probe(fn, rng), Tensor(x0), max_elements=max_elements,
                                  rng=rng)


def _layer_checks(seed: int) -> Iterable[tuple[str, float]]:
    rng = np.random.default_rng(seed)
    k_conv = rng.normal(size=(3, 2, 4))
    b_conv = rng.normal(size=3)
    x = rng.normal(size=(2, 15))
    yield "conv1d.input", _check(
        lambda t: conv1d(t, ConvParams(Tensor(k_conv), Tensor(b_conv), 2)), x, rng)
    yield "conv1d.kernel", _check(
        lambda t: conv1d(Tensor(x), ConvParams(t, Tensor(b_conv), 2)), k_conv, rng)
    z = rng.normal(size=(3, 6))
    yield "conv_transpose1d.input", _check(
        lambda t: conv_transpose1d(t, ConvParams(Tensor(k_conv), None, 2)), z, rng)
    yield "conv_transpose1d.kernel", _check(
        lambda t: conv_transpose1d(Tensor(z), ConvParams(t, None, 2)), k_conv, rng)

    h = rng.normal(size=(5, 6))
    g, b = rng.normal(size=6), rng.normal(size=6)
    yield "layer_norm.input", _check(lambda t: layer_norm(t, Tensor(g), Tensor(b)), h, rng)

    p = TransformerLayerParams.init(rng, 8, 12, 2)
    for name, w in p.named_parameters():
        w.assign(w.data + 0.1 * rng.normal(size=w.shape))
    seq = rng.normal(size=(2, 5, 8))
    yield "attention.input", _check(lambda t: multi_head_attention(t, p), seq, rng)
    yield "transformer.input", _check(lambda t: transformer_layer_forward(t, p), seq, rng)
    params = dict(p.named_parameters())
    for name in params:
        if name == "bk":
            continue

        def layer_fn(t, name=name):
            q = TransformerLayerParams(**{**params, name: t}, heads=p.heads)
            return transformer_layer_forward(Tensor(seq), q)
        yield f"transformer.{name}", _check(layer_fn, params[name].data, rng, max_elements=6)

    feats = rng.normal(size=(13, 3))
    yield "segment", _check(lambda t: segment(t, 4)[0], feats, rng)
    spec = make_spec(13, 4)
    yield "overlap_add", _check(lambda t: overlap_add(t, spec),
                                rng.normal(size=(4, spec.num_chunks, 3)), rng)

    xf = rng.normal(size=(4, 3, 8))
    for method in PoolingMethod:
        sp = SpgmParams.init(rng, 8, method)
        yield f"spgm_{method.value}.input", _check(
            lambda t, sp=sp, m=method: spgm_block_forward(t, m, sp), xf, rng)
        for pname, w in sp.named_parameters():
            def spgm_fn(t, sp=sp, m=method, pname=pname):
                kw = dict(sp.named_parameters())
                kw[pname] = t
                return spgm_block_forward(Tensor(xf), m, SpgmParams(**kw))
            yield f"spgm_{method.value}.{pname}", _check(spgm_fn, w.data, rng, max_elements=8)


def _end_to_end(seed: int, num_params: int = 10) -> Iterable[tuple[str, float]]:
    rng = np.random.default_rng(seed)
    model = SeparatorModel.init(TINY, seed)
    mix = rng.uniform(-0.5, 0.5, 64)
    refs = rng.uniform(-0.5, 0.5, (2, 64))
    names = [n for n, _ in model.named_parameters() if not n.endswith(STRUCTURAL_ZERO_SUFFIXES)]
    for name in rng.choice(names, size=num_params, replace=False):
        original = model.params[name]

        def loss(t, name=name, original=original):
            model.params[name] = t
            try:
                return upit_loss(separate_forward(model, mix), refs, clamp=False).loss
            finally:
                model.params[name] = original
        err = finite_diff_grad_check(loss, Tensor(original.data), max_elements=3, rng=rng)
        yield f"end_to_end.{name}", err


def run_suite(seeds: Iterable[int] = range(20), end_to_end: bool = True) -> list[CheckResult]:
    results = []
    for seed in seeds:
        for name, err in _layer_checks(seed):
            results.append(CheckResult(name, seed, err, LAYER_TOL))
        if end_to_end:
            for name, err in _end_to_end(seed):
                results.append(CheckResult(name, seed, err, END_TO_END_TOL))
    return results
