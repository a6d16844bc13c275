"""Time the numpy and numba kernels on conv/pool shapes seen at desk scale.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Also times one forward+backward pass of each backbone under both backends
(the backend is chosen at import, so that part runs in subprocesses).
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from urolesion.kernels import numba_kernels, numpy_kernels

CASES = [
    # (name, x shape, kernel, stride, pad)
    ("conv3x3 stem", (16, 3, 64, 64), 3, 1, 1),
    ("conv3x3 mid", (16, 32, 16, 16), 3, 1, 1),
    ("conv7x7 s2", (16, 3, 64, 64), 7, 2, 3),
    ("pool3x3 s2", (16, 16, 32, 32), 3, 2, 1),
]

NET_SNIPPET = """
import json, time, numpy as np
from urolesion import tensor as T
from urolesion.architectures import NetworkSpec, build_network
from urolesion.kernels import BACKEND
out = {}
x = np.random.default_rng(0).random((16, 3, 64, 64), dtype=np.float32)
y = np.eye(2, dtype=np.float32)[np.arange(16) % 2]
for arch in ("vgg16", "inception_v3", "resnet50"):
    net = build_network(NetworkSpec(arch, (64, 64), 0.25))
    best = 1e9
    for _ in range(4):
        t = time.perf_counter()
        T.backward(T.cross_entropy(net.forward(x, training=True), y))
        best = min(best, time.perf_counter() - t)
    out[arch] = best
print(json.dumps({"backend": BACKEND, "times": out}))
"""


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(repeat: int) -> None:
    rng = np.random.default_rng(0)
    print(f"{'case':<14} {'op':<10} {'numpy ms':>9} {'numba ms':>9} {'speedup':>8}")
    for name, shape, k, s, p in CASES:
        x = rng.standard_normal(shape).astype(np.float32)
        if name.startswith("pool"):
            out, arg = numpy_kernels.maxpool_forward(x, k, s, p)
            g = np.ones_like(out)
            ops = {
                "forward": lambda m: m.maxpool_forward(x, k, s, p),
                "backward": lambda m: m.maxpool_backward(g, arg, x.shape, k, s, p),
            }
        else:
            cols = numpy_kernels.im2col(x, k, k, s, p)
            ops = {
                "im2col": lambda m: m.im2col(x, k, k, s, p),
                "col2im": lambda m: m.col2im(cols, x.shape, k, k, s, p),
            }
        for op, f in ops.items():
            f(numba_kernels)  # compile
            a = best_of(lambda: f(numpy_kernels), repeat) * 1e3
            b = best_of(lambda: f(numba_kernels), repeat) * 1e3
            print(f"{name:<14} {op:<10} {a:9.2f} {b:9.2f} {a / b:7.1f}x")


def bench_networks() -> None:
    res = {}
    for flag in ("1", "0"):
        env = dict(os.environ, UROLESION_DISABLE_NUMBA=flag)
        proc = subprocess.run([sys.executable, "-c", NET_SNIPPET], env=env, capture_output=True, text=True,
                              check=True)
        r = json.loads(proc.stdout.strip().splitlines()[-1])
        res[r["backend"]] = r["times"]
    print(f"\n{'backbone':<14} {'numpy s':>9} {'numba s':>9}  (fwd+bwd, batch 16, 64x64, scale 0.25)")
    for arch in res["numpy"]:
        print(f"{arch:<14} {res['numpy'][arch]:9.3f} {res['numba'][arch]:9.3f}")


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-networks", action="store_true")
    args = ap.parse_args()
    if numba_kernels is None:
        sys.exit("numba is unavailable (or disabled); nothing to compare")
    bench_kernels(args.repeat)
    if not args.skip_networks:
        bench_networks()


if __name__ == "__main__":
    main()
