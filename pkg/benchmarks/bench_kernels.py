"""Time the tree sampler with numba kernels against the pure-NumPy fallback.

Each backend runs in its own interpreter because the switch is read at import.

    python benchmarks/bench_kernels.py --n 500 --trees 50 --iters 100
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = """
import json, sys, time
import numpy as np
from addbart._accel import backend
from addbart.data import Dataset
from addbart.sampler_continuous import BartConfig, fit_bart

n, m, iters, reps = map(int, sys.argv[1:5])
rng = np.random.default_rng(0)
x = rng.uniform(-1, 1, (n, 5))
y = np.sin(np.pi * x[:, 0] * x[:, 1]) + x[:, 2] + 0.5 * rng.standard_normal(n)
d = Dataset(y, x, tuple("x%d" % j for j in range(5)))
cfg = BartConfig(m=m, burn_in=iters // 2, draws=iters - iters // 2, seed=1)
t0 = time.perf_counter()
fit_bart(d, cfg.replace(burn_in=1, draws=1))  # compile / warm up
warm = time.perf_counter() - t0
times = []
for _ in range(reps):
    t0 = time.perf_counter()
    fit = fit_bart(d, cfg)
    times.append(time.perf_counter() - t0)
print(json.dumps({"backend": backend(), "warmup_s": warm, "best_s": min(times),
                  "checksum": float(fit.fit.sum())}))
"""


def run(disable: bool, args) -> dict:
    env = dict(os.environ)
    env.pop("ADDBART_DISABLE_NUMBA", None)
    if disable:
        env["ADDBART_DISABLE_NUMBA"] = "1"
    cmd = [sys.executable, "-c", WORKER, str(args.n), str(args.trees), str(args.iters),
           str(args.reps)]
    out = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True).stdout
    return json.loads(out.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--trees", type=int, default=50)
    ap.add_argument("--iters", type=int, default=100)
    ap.add_argument("--reps", type=int, default=3)
    args = ap.parse_args(argv)

    fast = run(False, args)
    slow = run(True, args)
    for r in (fast, slow):
        print(f"{r['backend']:>6}: best {r['best_s']:.3f} s over {args.reps} runs "
              f"(first call {r['warmup_s']:.2f} s)")
    print(f"speedup: {slow['best_s'] / fast['best_s']:.1f}x")
    print("identical draws" if fast["checksum"] == slow["checksum"] else
          f"checksums differ: {fast['checksum']!r} vs {slow['checksum']!r}")


if __name__ == "__main__":
    main()
