"""Time the hot kernels under both backends.

Runs itself once per backend in a subprocess (the backend is fixed at
import time by PROJNET_BACKEND) and prints a side-by-side table.

    python3 benchmarks/bench_backends.py
    python3 benchmarks/bench_backends.py --repeats 9
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _workloads():
    from projnet import kernels
    from projnet.projection import (
        ProjectionConfig, SparseVector, hamming_distance, project_bits,
        project_rows,
    )

    rng = np.random.default_rng(11)
    proj = ProjectionConfig(seed=9, T=60, d=12)

    idx = np.sort(rng.choice(np.arange(1, 2**27), 200, replace=False))
    sv = SparseVector(idx.astype(np.int64), rng.standard_normal(200))

    rows, nnz = 200, 150
    indptr = np.arange(rows + 1, dtype=np.int64) * nnz
    indices = np.empty(rows * nnz, dtype=np.int64)
    for r in range(rows):
        indices[r * nnz:(r + 1) * nnz] = np.sort(
            rng.choice(np.arange(1, 2**27), nnz, replace=False))
    values = rng.standard_normal(rows * nnz)

    W = rng.standard_normal((256, 784))
    b = rng.standard_normal(256)
    x = rng.standard_normal(784)

    a = project_bits(sv, proj)
    flipped = SparseVector(sv.indices, -sv.values)
    bvs = [project_bits(flipped, proj) for _ in range(64)]

    return {
        "project_bits 200nnz 720b": lambda: project_bits(sv, proj),
        "project_rows 200x150 720b": lambda: project_rows(
            indptr, indices, values, proj),
        "affine 784 -> 256": lambda: kernels.affine(W, b, x),
        "hamming 64 pairs 720b": lambda: [hamming_distance(a, o)
                                          for o in bvs],
    }


def run_child(repeats: int):
    from projnet import BACKEND

    results = {}
    for name, fn in _workloads().items():
        fn()  # compile and touch caches before timing
        best = min(_timed(fn) for _ in range(repeats))
        results[name] = best
    print(json.dumps({"backend": BACKEND, "times": results}))


def _timed(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def run_parent(repeats: int):
    rows = {}
    backends = []
    for backend in ("numpy", "numba"):
        env = dict(os.environ, PROJNET_BACKEND=backend)
        proc = subprocess.run(
            [sys.executable, __file__, "--child", "--repeats", str(repeats)],
            capture_output=True, text=True, env=env)
        if proc.returncode != 0:
            print(f"{backend}: failed\n{proc.stderr.strip()}")
            continue
        payload = json.loads(proc.stdout.strip().splitlines()[-1])
        backends.append(payload["backend"])
        for name, t in payload["times"].items():
            rows.setdefault(name, {})[payload["backend"]] = t

    if not rows:
        sys.exit("no backend produced timings")
    width = max(len(n) for n in rows)
    print(f"{'workload'.ljust(width)}  " +
          "".join(f"{b:>12}" for b in backends) +
          ("     speedup" if len(backends) == 2 else ""))
    for name, times in rows.items():
        cells = "".join(f"{times[b] * 1e3:>10.3f}ms" for b in backends
                        if b in times)
        line = f"{name.ljust(width)}  {cells}"
        if len(times) == 2:
            line += f"  {times['numpy'] / times['numba']:>9.2f}x"
        print(line)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--child", action="store_true",
                    help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        run_child(args.repeats)
    else:
        run_parent(args.repeats)


if __name__ == "__main__":
    main()
