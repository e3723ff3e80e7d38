"""Teacher vs student inference latency."""

from __future__ import annotations

import statistics
import time

import numpy as np

from . import kernels
from .heads import attentive_pool, classify
from .encoder import encode


def _forward(enc, heads, tokens, mask):
    state = encode(enc, tokens, mask)
    h = attentive_pool(heads, state.layer_hidden[-1], mask)
    if "dense.weight" in heads:
        classify(heads, h)


def measure_latency(pair, n_samples=1000, warmup=100, seq_len=None, seed=0):
    """Median single-sequence forward time (seconds) of teacher and student.

    Teacher and student passes alternate on the same random inputs so slow
    drifts in machine load hit both equally.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    cfg = pair.teacher.config
    S = seq_len or cfg.max_seq_len
    rng = np.random.default_rng(seed)
    inputs = [rng.integers(2, cfg.vocab_size, size=S) for _ in range(64)]
    mask = np.ones(S, dtype=bool)
    for i in range(warmup):
        _forward(pair.teacher, pair.heads, inputs[i % 64], mask)
        _forward(pair.student, pair.s_heads, inputs[i % 64], mask)
    t_times, s_times = [], []
    clock = time.perf_counter
    for i in range(n_samples):
        x = inputs[i % 64]
        t0 = clock()
        _forward(pair.teacher, pair.heads, x, mask)
        t1 = clock()
        _forward(pair.student, pair.s_heads, x, mask)
        t2 = clock()
        t_times.append(t1 - t0)
        s_times.append(t2 - t1)
    t_med, s_med = statistics.median(t_times), statistics.median(s_times)
    return {
        "teacher_depth": pair.teacher.config.num_layers,
        "student_depth": pair.student.config.num_layers,
        "K": pair.K,
        "n_samples": n_samples,
        "seq_len": S,
        "teacher_median_s": t_med,
        "student_median_s": s_med,
        "ratio": t_med / s_med,
        "kernel_backend": kernels.BACKEND,
    }
