"""Compare the compiled and numpy kernel backends on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from spgm import _pykernels

try:
    from spgm import _ckernels
except ImportError:
    _ckernels = None

CASES = {
    # encoder backward on 1 s at 8 kHz: 999 frames of 16 taps, 1 channel
    "scatter enc-grad": lambda rng: ("scatter_frames", (rng.normal(size=(999, 16, 1)), 8, 8000)),
    # overlap-add of toy masks: 11 chunks x 50 frames x 64 channels
    "scatter ola 64ch": lambda rng: ("scatter_frames", (rng.normal(size=(11, 50, 64)), 25, 300)),
    # full-size overlap-add: 9 chunks x 250 frames x 512 channels
    "scatter ola 512ch": lambda rng: ("scatter_frames", (rng.normal(size=(9, 250, 512)), 125, 1250)),
    "resample 1 s @0.95": lambda rng: ("sinc_resample", (rng.normal(size=8000), 0.95)),
    "resample 10 s @1.05": lambda rng: ("sinc_resample", (rng.normal(size=80000), 1.05)),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"{'case':<22}" + "".join(f"{name:>12}" for name, _ in backends) + "     speedup")
    for label, make in CASES.items():
        fn_name, fn_args = make(rng)
        times, outs = [], []
        for _, mod in backends:
            fn = getattr(mod, fn_name)
            number = 3
            t = min(timeit.repeat(lambda: fn(*fn_args), number=number, repeat=args.repeat))
            times.append(t / number)
            outs.append(fn(*fn_args))
        if len(outs) == 2:
            assert np.allclose(outs[0], outs[1], atol=1e-10), label
        row = f"{label:<22}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>11.1f}x"
        print(row)
    if _ckernels is None:
        print("compiled backend not built; only the numpy path was timed")


if __name__ == "__main__":
    main()
