"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Two workloads: one loss+gradient evaluation on a stage-1 sized batch, and a
full stage-2 prototype fit on a 5-way 5-shot support set. Numba compile time
is paid once before timing starts.
"""

import argparse
import timeit

import numpy as np

from sslfewshot import kernels


def workloads(rng):
    W = rng.standard_normal((8, 20))
    F = rng.standard_normal((200, 8))
    y = rng.integers(0, 20, 200)
    grads = {
        "loss_and_grads ssl (C=20, m=200, d=8)": (
            lambda impl: impl(W, F, y, 10.0, True), kernels.loss_and_grads_numpy, kernels.loss_and_grads_numba),
        "loss_and_grads sl  (C=20, m=200, d=8)": (
            lambda impl: impl(W, F, y, 10.0, False), kernels.loss_and_grads_numpy, kernels.loss_and_grads_numba),
    }
    W0 = rng.standard_normal((8, 5))
    sx = rng.standard_normal((25, 8))
    sy = np.repeat(np.arange(5), 5)
    batches = np.stack([rng.permutation(25)[:4] for _ in range(100)])
    fits = {
        "fit_prototypes ssl (100 iters, batch 4)": (
            lambda impl: impl(W0, sx, sy, batches, 0.01, 10.0, True),
            kernels.fit_prototypes_numpy, kernels.fit_prototypes_numba),
    }
    return {**grads, **fits}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()

    print(f"{'workload':42s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for name, (call, slow, fast) in workloads(np.random.default_rng(0)).items():
        call(fast)  # compile
        a = np.asarray(call(slow)[0])
        b = np.asarray(call(fast)[0])
        assert np.allclose(a, b, rtol=1e-10, atol=1e-12), name
        t_np = min(timeit.repeat(lambda: call(slow), number=args.repeat, repeat=3)) / args.repeat
        t_nb = min(timeit.repeat(lambda: call(fast), number=args.repeat, repeat=3)) / args.repeat
        print(f"{name:42s} {t_np * 1e6:10.1f} {t_nb * 1e6:10.1f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
