"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from kaprompt import kernels
from kaprompt.backbone import ClassifierHead, FrozenBackbone
from kaprompt.prompt_pool import random_prompt_set
from kaprompt.training import TrainConfig, train_domain


def kernel_cases(rng):
    b, length, dim, heads = 32, 13, 32, 4
    q, k, v = (rng.normal(size=(b, length, dim)) for _ in range(3))
    scale = 1.0 / np.sqrt(dim // heads)
    out, probs = kernels.attention_forward(q, k, v, heads, scale)
    dout = rng.normal(size=out.shape)
    x = rng.normal(size=(b * length, dim))
    gamma, beta = rng.normal(size=dim), rng.normal(size=dim)
    y, xhat, rstd = kernels.layer_norm_forward(x, gamma, beta, 1e-5)
    rel, eff = rng.random((40, 10)), rng.random(10)
    return {
        "attention_forward": lambda: kernels.attention_forward(q, k, v, heads, scale),
        "attention_backward": lambda: kernels.attention_backward(dout, q, k, v, probs, heads, scale),
        "layer_norm_forward": lambda: kernels.layer_norm_forward(x, gamma, beta, 1e-5),
        "layer_norm_backward": lambda: kernels.layer_norm_backward(y, xhat, rstd, gamma),
        "coverage_histogram": lambda: kernels.coverage_histogram(rel, eff),
    }


def training_case(rng):
    backbone = FrozenBackbone(seed=0)
    x = rng.normal(size=(64, 64))
    y = rng.integers(0, 5, size=64)
    cfg = TrainConfig(epochs=1)

    def run():
        head = ClassifierHead(32, 5, seed=1)
        s = random_prompt_set(1, 10, 4, 32, np.random.default_rng(0))
        train_domain(x, y, s, backbone, head, cfg, 1)
    return run


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    backends = kernels.available_backends()
    timings = {}
    for name in backends:
        previous = kernels.set_backend(name)
        try:
            cases = kernel_cases(np.random.default_rng(0))
            cases["train_domain (2 batches)"] = training_case(np.random.default_rng(0))
            for case, fn in cases.items():
                number = 3 if case.startswith("train") else 200
                best = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
                timings.setdefault(case, {})[name] = best
        finally:
            kernels.set_backend(previous)
    header = f"{'case':28s}" + "".join(f"{b:>14s}" for b in backends)
    if len(backends) > 1:
        header += f"{'speedup':>10s}"
    print(header)
    for case, row in timings.items():
        line = f"{case:28s}" + "".join(f"{row[b] * 1e6:12.1f}us" for b in backends)
        if "cython" in row and "python" in row:
            line += f"{row['python'] / row['cython']:9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
