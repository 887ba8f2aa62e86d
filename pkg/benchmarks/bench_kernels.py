"""Compare the numba kernels with the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--no-train]

Kernel timings use both implementations in one process. The training-step
timing launches a subprocess per backend so FEDEU_BACKEND takes effect.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fedeu.kernels import _numba, _numpy

TRAIN_SNIPPET = """
import time
from fedeu.config import default_config, FederationConfig
from fedeu.federation import RoundContext, init_clients, load_datasets, local_train, resolve_network
from fedeu.model import build_network
cfg = default_config(0).replace(federation=FederationConfig(epochs=1))
ds = load_datasets(cfg)
params = build_network(resolve_network(cfg, ds), 0)
clients = init_clients(params, ds)
ctx = RoundContext(cfg.federation, cfg.loss, cfg.ablation, 0)
local_train(clients[0], params, 0, ctx)  # warm-up (jit compile)
start = time.perf_counter()
for t in range(1, 4):
    local_train(clients[0], params, t, ctx)
print((time.perf_counter() - start) / 3)
"""


def cases(rng):
    x = rng.standard_normal((8, 16, 32, 32)).astype(np.float32)
    cols = _numpy.im2col(x, 3, 3, 1, 1)
    g = rng.standard_normal((8, 32, 32, 32)).astype(np.float32)
    alpha = rng.uniform(1.0, 50.0, size=8 * 2 * 32 * 32)
    return {
        "im2col 8x16x32x32 k3": lambda m: m.im2col(x, 3, 3, 1, 1),
        "col2im 8x16x32x32 k3": lambda m: m.col2im(cols, x.shape, 3, 3, 1, 1),
        "upsample_backward x2": lambda m: m.upsample_backward(g, 2),
        "lgamma 16k": lambda m: m.lgamma(alpha),
        "digamma 16k": lambda m: m.digamma(alpha),
    }


def bench(fn, repeat):
    fn()  # compile / warm caches
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def train_step(backend):
    env = {**os.environ, "FEDEU_BACKEND": backend}
    out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True,
                         text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1]) * 1e3


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--no-train", action="store_true", help="skip the end-to-end epoch timing")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    print(f"{'kernel':<26s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, call in cases(rng).items():
        a = call(_numpy)
        b = call(_numba)
        np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-6)
        t_np = bench(lambda: call(_numpy), args.repeat)
        t_nb = bench(lambda: call(_numba), args.repeat)
        print(f"{name:<26s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:7.1f}x")

    if not args.no_train:
        t_np, t_nb = train_step("numpy"), train_step("numba")
        print(f"{'local epoch (64 samples)':<26s} {t_np:10.1f} {t_nb:10.1f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
