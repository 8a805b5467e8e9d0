"""Benchmark the compiled segment kernels against the numpy fallback.

Usage:
    python benchmarks/bench_kernels.py [--sizes small,medium,large]

Reports per-call times for scatter_add / segment_sum / segment_max /
segment_counts on graph-shaped workloads, and an end-to-end train-step
comparison (forward + backward on a 200-sample graph) with the kernel
backend forced each way via HICQA_KERNELS in a subprocess.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from hicqa.kernels import get_backends

SIZES = {
    "small": dict(n=1_000, e=5_000, d=64),
    "medium": dict(n=10_000, e=60_000, d=128),
    "large": dict(n=50_000, e=400_000, d=256),
}


def time_call(fn, repeats=7):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(sizes):
    rng = np.random.default_rng(0)
    backends = get_backends()
    print(f"{'case':<28}" + "".join(f"{name:>14}" for name in backends) + f"{'speedup':>10}")
    for size_name in sizes:
        cfg = SIZES[size_name]
        idx = rng.integers(0, cfg["n"], size=cfg["e"]).astype(np.int64)
        src = rng.normal(size=(cfg["e"], cfg["d"])).astype(np.float32)
        cases = {
            "segment_sum": lambda impl: impl.segment_sum(src, idx, cfg["n"]),
            "segment_max": lambda impl: impl.segment_max(src, idx, cfg["n"]),
            "segment_counts": lambda impl: impl.segment_counts(idx, cfg["n"]),
            "scatter_add": lambda impl: impl.scatter_add(
                np.zeros((cfg["n"], cfg["d"]), dtype=np.float32), idx, src
            ),
        }
        for case_name, call in cases.items():
            times = {name: time_call(lambda: call(impl)) for name, impl in backends.items()}
            row = f"{size_name}/{case_name:<20}"
            for name in backends:
                row += f"{times[name] * 1e3:>12.2f}ms"
            if "cython" in times and "numpy" in times:
                row += f"{times['numpy'] / times['cython']:>9.1f}x"
            print(row)


STEP_SNIPPET = r"""
import json, time
import numpy as np
from hicqa.synth import SynthConfig, synth_corpus
from hicqa.graph import build_graph
from hicqa.model import HyperParams, ModelParams, model_forward
from hicqa.train import TrainConfig, multitask_loss
from hicqa import autodiff as ad
from hicqa.kernels import BACKEND

corpus, _ = synth_corpus(SynthConfig(n_samples=200, qas_min=3, qas_max=3, f=256, seed=0))
graph = build_graph(corpus)
hyper = HyperParams(d=128, layers=2, heads=4, dropout_p=0.1, precision="single")
params = ModelParams.init(graph.f, hyper, 0)
config = TrainConfig(seed=0)
times = []
for step in range(6):
    t0 = time.perf_counter()
    out = model_forward(graph, params, mode="train", seed=0, step=step)
    total, _, _ = multitask_loss(out.z_keep, out.z_cap, graph.labels, config)
    params.zero_grad()
    ad.backward(total)
    times.append(time.perf_counter() - t0)
print(json.dumps({"backend": BACKEND, "step_ms": min(times[1:]) * 1e3}))
"""


def bench_step():
    print("\nend-to-end train step (200 samples, d=128, L=2, single precision):")
    for forced in ("c", "py"):
        env = dict(os.environ, HICQA_KERNELS=forced)
        proc = subprocess.run(
            [sys.executable, "-c", STEP_SNIPPET], env=env, capture_output=True, text=True
        )
        if proc.returncode != 0:
            print(f"  backend {forced}: failed ({proc.stderr.strip().splitlines()[-1]})")
            continue
        doc = json.loads(proc.stdout.strip().splitlines()[-1])
        print(f"  backend {doc['backend']:<8} {doc['step_ms']:8.1f} ms/step")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="small,medium")
    args = ap.parse_args()
    sizes = [s for s in args.sizes.split(",") if s in SIZES]
    bench_kernels(sizes)
    bench_step()


if __name__ == "__main__":
    main()
