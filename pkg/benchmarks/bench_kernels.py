"""Time every hot kernel under the numba and the numpy backend.

    python3 benchmarks/bench_kernels.py [--sessions N] [--repeat R]

Numba kernels are called once before timing so compilation is excluded.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from sliver import _accel, kernels
from sliver.events import sessionize
from sliver.simgen import GeneratorConfig, generate


def cases(n_sessions: int, rng):
    users = max(20, n_sessions // 53)
    log, truth = generate(GeneratorConfig(num_users=users, seed=1))
    t = sessionize(log, truth.log_end)
    emit = t.impression_ts >= 0
    scores = np.round(rng.random(len(t)), 3)
    labels = rng.integers(0, 2, len(t)).astype(np.int8)
    table = np.zeros((2**16 + 1, 32))
    idx = rng.integers(0, table.shape[0], 512 * 8)
    vals = rng.normal(size=(idx.size, 32))
    param = rng.normal(size=(2**16 + 1, 32))
    grad, m, v = rng.normal(size=param.shape), np.zeros_like(param), np.zeros_like(param)
    clicked = t.click_ts >= 0
    return {
        "label_fixed": lambda: kernels.label_fixed(t.impression_ts, emit, t.click_ts, t.follow_ts, t.like_ts,
                                                   300_000),
        "label_sliver": lambda: kernels.label_sliver(t.click_ts, t.follow_ts, t.like_ts, t.exit_ts, t.censored,
                                                     30_000, 0),
        "auc_counts": lambda: kernels.auc_counts(scores, labels),
        "scatter_add_rows": lambda: kernels.scatter_add_rows(table, idx, vals),
        "adam_update": lambda: kernels.adam_update(param, grad, m, v, 1e-3, 0.9, 0.999, 1e-8, 10),
        "gather_history": lambda: kernels.gather_history(t.user_id[clicked], t.click_ts[clicked],
                                                         t.anchor_id[clicked], t.user_id, t.request_ts, 50),
    }, len(t)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sessions", type=int, default=100_000, help="approximate synthetic sessions")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    fns, n = cases(args.sessions, np.random.default_rng(0))
    print(f"{n} sessions, best of {args.repeat}")
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speed-up':>10}")
    prev = _accel.get_backend()
    try:
        for name, fn in fns.items():
            best = {}
            for backend in ("numba", "numpy"):
                _accel.set_backend(backend)
                fn()
                best[backend] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<18}{best['numba']:>10.2f}{best['numpy']:>10.2f}{best['numpy'] / best['numba']:>9.1f}x")
    finally:
        _accel.set_backend(prev)


if __name__ == "__main__":
    main()
