"""Compiled vs pure-numpy kernels: per-kernel timings and one joint training step.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Kernel shapes match the default desk model (batch 32, sequence 16, hidden 32,
4 heads, FFN 64). The training-step comparison swaps the functions on the
``jointkd.kernels`` module, which is where the autodiff ops look them up.
"""

import argparse
import json
import statistics
import sys
import time
from contextlib import contextmanager

import numpy as np

from jointkd import _kernels_py, kernels
from jointkd import distill as D
from jointkd.data import SyntheticSpec, gen_synthetic_classification
from jointkd.encoder import EncoderConfig
from jointkd.tasks import classify as task_classify
from jointkd.train import build_pair, rngs

NAMES = ("layer_norm_fwd", "layer_norm_bwd", "gelu_fwd", "gelu_bwd", "softmax_fwd", "softmax_bwd")


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


@contextmanager
def backend(impl):
    saved = {n: getattr(kernels, n) for n in NAMES}
    for n in NAMES:
        setattr(kernels, n, getattr(impl, n))
    try:
        yield
    finally:
        for n, f in saved.items():
            setattr(kernels, n, f)


def kernel_cases(rng):
    ln_x = rng.normal(size=(512, 32))
    g, b = np.ones(32), np.zeros(32)
    _, xhat, rstd = _kernels_py.layer_norm_fwd(ln_x, g, b, 1e-5)
    ff = rng.normal(size=(512, 64))
    sm = rng.normal(size=(2048, 16))
    mask = np.ones((2048, 16), dtype=np.uint8)
    mask[:, 12:] = 0
    y = _kernels_py.softmax_fwd(sm, mask)
    return {
        "layer_norm_fwd": lambda k: k.layer_norm_fwd(ln_x, g, b, 1e-5),
        "layer_norm_bwd": lambda k: k.layer_norm_bwd(ln_x, xhat, rstd, g),
        "gelu_fwd": lambda k: k.gelu_fwd(ff),
        "gelu_bwd": lambda k: k.gelu_bwd(ff, ff),
        "softmax_fwd": lambda k: k.softmax_fwd(sm, mask),
        "softmax_bwd": lambda k: k.softmax_bwd(y, sm),
    }


def step_time(impl, repeat):
    cfg = EncoderConfig()
    data = gen_synthetic_classification(SyntheticSpec(seed=0, n_train=32, n_valid=1, n_test=1))[0]["train"]
    batch = (data.tokens, data.mask, data.labels)
    with backend(impl):
        pair = build_pair("classify", cfg, 2, "joint", 0, num_classes=4)
        opt, rng = D.Adam(), rngs(0)["dropout"]
        dc = D.DistillConfig()
        return _median_time(lambda: D.joint_step(pair, batch, dc, task_classify.losses, opt, rng), repeat)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    if kernels.BACKEND != "compiled":
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`",
              file=sys.stderr)
        return 1
    from jointkd import _ckernels

    rows = []
    for name, fn in kernel_cases(np.random.default_rng(0)).items():
        py = _median_time(lambda: fn(_kernels_py), args.repeat)
        c = _median_time(lambda: fn(_ckernels), args.repeat)
        rows.append({"kernel": name, "python_s": py, "compiled_s": c, "speedup": py / c})
    n_steps = max(5, args.repeat // 20)
    py = step_time(_kernels_py, n_steps)
    c = step_time(_ckernels, n_steps)
    rows.append({"kernel": "joint_step", "python_s": py, "compiled_s": c, "speedup": py / c})

    print(f"{'kernel':<16}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for r in rows:
        print(f"{r['kernel']:<16}{r['python_s'] * 1e3:>12.4f}{r['compiled_s'] * 1e3:>14.4f}{r['speedup']:>10.2f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
