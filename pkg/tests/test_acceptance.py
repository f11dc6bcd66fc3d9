"""End-to-end acceptance checks; each prints one PASS/FAIL line."""
import time

import numpy as np
import pytest

from spgm.block import PoolingMethod, SpgmParams, chunk_pool_le, modulate
from spgm.checkpoint import load_checkpoint, save_checkpoint
from spgm.chunking import overlap_add, segment
from spgm.data import AudioBuffer, SynthSpec, build_dataset, read_wav, write_wav
from spgm.gradsuite import run_suite
from spgm.objective import si_sdr, upit_loss
from spgm.profiler import count_macs, count_params, spgm_param_breakdown
from spgm.separator import ModelConfig, SeparatorModel, separate_forward
from spgm.tensor import Tensor
from spgm.training import TrainConfig, TrainState, evaluate_manifest, fit, plateau_step

from test_objective import _brute_force


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail, seconds, limit):
        within = seconds <= limit
        verdict = "PASS" if ok and within else "FAIL"
        with capsys.disabled():
            print(f"\n[acceptance {number}] {verdict} {title}: {detail} "
                  f"({seconds:.1f} s, limit {limit:g} s)")
        assert ok, detail
        assert within, f"took {seconds:.1f} s"
    return emit


def test_1_parameter_accounting(report):
    t0 = time.perf_counter()
    le = spgm_param_breakdown(ModelConfig())
    ap = spgm_param_breakdown(ModelConfig(pooling="ap"))
    delta = count_params(ModelConfig(pooling="ap"))["total"] - count_params(ModelConfig())["total"]
    ok = le["modulation"] == 524_288 and ap["pooling"] == 4 * 256 and delta == 4 * 256
    report(1, "parameter accounting", ok,
           f"modulation {le['modulation']}, AP adds {delta // 4} per block",
           time.perf_counter() - t0, 1)


def test_2_model_size(report):
    t0 = time.perf_counter()
    cases = [("B=4 SPGM", ModelConfig(), 26.2e6),
             ("B=4 no SPGM", ModelConfig(pooling="none"), 25.7e6),
             ("B=2 SPGM", ModelConfig(num_blocks=2), 13.3e6),
             ("B=2 no SPGM", ModelConfig(num_blocks=2, pooling="none"), 13.0e6)]
    parts, ok = [], True
    for label, cfg, target in cases:
        total = count_params(cfg)["total"]
        off = (total - target) / target
        ok &= abs(off) <= 0.03
        parts.append(f"{label} {total / 1e6:.2f}M ({off:+.1%})")
    report(2, "model size", ok, ", ".join(parts), time.perf_counter() - t0, 1)


def test_3_mac_accounting(report):
    t0 = time.perf_counter()
    total = count_macs(ModelConfig(), 1.0)["total"]
    report(3, "MAC accounting", 55e9 <= total <= 95e9, f"{total / 1e9:.2f} GMAC in [55, 95]",
           time.perf_counter() - t0, 1)


def test_4_gradient_suite(report):
    t0 = time.perf_counter()
    results = run_suite(range(20))
    bad = [r for r in results if not r.ok]
    worst_layer = max(r.error for r in results if not r.name.startswith("end_to_end"))
    worst_e2e = max(r.error for r in results if r.name.startswith("end_to_end"))
    report(4, "gradient suite", not bad,
           f"{len(results) - len(bad)}/{len(results)} checks over 20 seeds, worst layer "
           f"{worst_layer:.1e}, worst end-to-end {worst_e2e:.1e}",
           time.perf_counter() - t0, 120)


def test_5_structural_invariants(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    notes, ok = [], True

    x = rng.normal(size=(1003, 16))
    c, spec = segment(Tensor(x), 50)
    err = np.max(np.abs(overlap_add(c, spec).data - x))
    ok &= err <= 1e-10
    notes.append(f"ola(seg) {err:.1e}")

    xf = rng.normal(size=(6, 5, 8))
    zero = SpgmParams(Tensor(np.zeros((8, 8))), Tensor(np.zeros((8, 8))))
    err = np.max(np.abs(modulate(Tensor(xf), Tensor(rng.normal(size=8)), zero).data - 0.5 * xf))
    ok &= err <= 1e-15
    notes.append(f"zero-gain {err:.1e}")

    ok &= np.array_equal(chunk_pool_le(Tensor(xf)).data, xf[-1])

    pit_ok = True
    for c in (2, 3):
        for seed in range(10):
            r = np.random.default_rng(seed)
            refs = r.normal(size=(c, 200))
            est = refs[r.permutation(c)] + r.normal(size=(c, 200)) * r.uniform(0.2, 2.0)
            perm, loss = _brute_force(est, refs)
            res = upit_loss(est, refs, clamp=False)
            pit_ok &= res.permutation == perm and abs(res.loss.item() - loss) < 1e-12
    ok &= pit_ok
    notes.append(f"uPIT brute force {'ok' if pit_ok else 'MISMATCH'}")

    ref = 3000.0 * rng.normal(size=8000)
    est = ref + 1500.0 * rng.normal(size=8000)
    base = si_sdr(est, ref).item()
    drift = max(abs(si_sdr(a * est, ref).item() - base) for a in (1e-3, 1.0, 1e3))
    ok &= drift <= 1e-9
    notes.append(f"SI-SDR scale drift {drift:.1e} dB (PCM16-scale signals)")
    report(5, "structural invariants", ok, ", ".join(notes), time.perf_counter() - t0, 60)


@pytest.mark.slow
def test_6_desk_scale_learning(report, tmp_path):
    t0 = time.perf_counter()
    train = build_dataset(tmp_path / "train", 500, SynthSpec(seed=0))
    valid = build_dataset(tmp_path / "valid", 50, SynthSpec(seed=1))
    test = build_dataset(tmp_path / "test", 50, SynthSpec(seed=2))
    cfg = ModelConfig(channels=32, ffn=64, heads=4, num_blocks=2, intra_layers=2,
                      chunk_size=50, enc_kernel=16, enc_stride=8)
    model = SeparatorModel.init(cfg, seed=0)
    tcfg = TrainConfig(max_epochs=10, lr0=1.5e-4, plateau_patience=3,
                       speed_perturb=(0.95, 1.05), seed=0)
    _, history = fit(model, train, valid, tcfg)
    scores = evaluate_manifest(model, test)
    mean = float(np.mean(scores))
    report(6, "desk-scale learning", mean > 5.0,
           f"mean SI-SDRi {mean:.2f} dB on 50 held-out mixtures after {len(history)} epochs "
           f"(valid loss {history[0][2]:.2f} -> {history[-1][2]:.2f})",
           time.perf_counter() - t0, 1800)


def test_7_recipe_mechanics(report):
    t0 = time.perf_counter()
    state = TrainState(lr=1.5e-4)
    trace = [5.0, 5.0, 5.0, 5.0, 5.0, 4.0, 4.0, 4.0, 4.0, 4.0]
    lrs = [plateau_step(state, v).lr for v in trace]
    expected = [1.5e-4] * 4 + [7.5e-5] * 5 + [3.75e-5]
    ok = lrs == expected
    halvings = 0
    while not state.stopped:
        before = state.lr
        plateau_step(state, 10.0)
        halvings += state.lr < before
    ok &= halvings == 12 and state.lr < 1e-8 <= state.lr * 2
    report(7, "recipe mechanics", ok,
           f"lr trace {['%.3g' % v for v in lrs]}, stop at lr {state.lr:.2e} after "
           f"{halvings + 2} halvings in total", time.perf_counter() - t0, 1)


def test_8_io_contracts(report, tmp_path):
    t0 = time.perf_counter()
    notes, ok = [], True
    x = np.random.default_rng(1).uniform(-1, 1, 8000)
    write_wav(tmp_path / "x.wav", AudioBuffer(x, 8000))
    err = np.max(np.abs(read_wav(tmp_path / "x.wav").samples - x)) * 32767
    ok &= err <= 1.0
    notes.append(f"WAV error {err:.2f} LSB")

    cfg = ModelConfig(channels=8, ffn=16, heads=2, enc_kernel=4, enc_stride=2, chunk_size=4,
                      num_blocks=1, intra_layers=1, pooling="ap")
    model = SeparatorModel.init(cfg, 3)
    save_checkpoint(tmp_path / "m.ckpt", model)
    rounded = SeparatorModel(cfg, {n: Tensor(t.data.astype(np.float32).astype(np.float64))
                                   for n, t in model.named_parameters()})
    mix = x[:400] * 0.5
    same = np.array_equal(separate_forward(load_checkpoint(tmp_path / "m.ckpt"), mix).data,
                          separate_forward(rounded, mix).data)
    ok &= same
    notes.append(f"checkpoint forward {'bit-exact' if same else 'DIFFERS'} at float32 weights")

    train = build_dataset(tmp_path / "tr", 6, SynthSpec(duration_s=0.05, seed=4))
    valid = build_dataset(tmp_path / "va", 2, SynthSpec(duration_s=0.05, seed=5))
    tcfg = TrainConfig(max_epochs=3, lr0=1e-3, batch_size=2, seed=1)
    plain = dict(channels=8, ffn=16, heads=2, enc_kernel=4, enc_stride=2, chunk_size=8,
                 num_blocks=1, intra_layers=1)
    _, full = fit(SeparatorModel.init(ModelConfig(**plain), 3), train, valid, tcfg)
    fit(SeparatorModel.init(ModelConfig(**plain), 3), train, valid, tcfg,
        out_dir=tmp_path / "run", max_epochs=2)
    _, resumed = fit(SeparatorModel.init(ModelConfig(**plain), 9), train, valid, tcfg,
                     out_dir=tmp_path / "run", resume_from=tmp_path / "run" / "last.state.npz")
    gap = max(max(abs(a[1] - b[1]), abs(a[2] - b[2])) for a, b in zip(full, resumed))
    ok &= gap <= 1e-10 and len(resumed) == 3
    notes.append(f"resume gap {gap:.1e}")
    report(8, "I/O contracts", ok, ", ".join(notes), time.perf_counter() - t0, 60)
