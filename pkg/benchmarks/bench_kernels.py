"""Time the LSTM forward/backward kernels with and without numba.

    python3 benchmarks/bench_kernels.py [--units 64,32] [--steps 200] [--repeat 20]

Each variant runs in a fresh interpreter because the backend is picked at import.
"""
import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys, time
import numpy as np
from lstmtrojan import _accel
from lstmtrojan.lstm import OBS_DIM, backward, forward_sequence, init_parameters

units, steps, repeat = json.loads(sys.argv[1])
params = init_parameters(OBS_DIM, tuple(units), 0)
X = np.random.default_rng(0).random((steps, OBS_DIM))
d_logits = np.ones((steps, params.n_actions))

cache = forward_sequence(params, X)      # warm-up (and JIT compile)
backward(params, cache, d_logits=d_logits)

def best(fn):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)

fwd = best(lambda: forward_sequence(params, X))
bwd = best(lambda: backward(params, cache, d_logits=d_logits))
print(json.dumps({"jit": _accel.JIT_ENABLED, "forward_s": fwd, "backward_s": bwd}))
"""


def run(no_jit, args):
    env = dict(os.environ)
    if no_jit:
        env["LSTMTROJAN_NO_JIT"] = "1"
    else:
        env.pop("LSTMTROJAN_NO_JIT", None)
    out = subprocess.run([sys.executable, "-c", CHILD, json.dumps([args.units, args.steps, args.repeat])],
                         env=env, check=True, capture_output=True, text=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--units", type=lambda s: [int(v) for v in s.split(",")], default=[64, 32])
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args()
    jit, plain = run(False, args), run(True, args)
    print(f"units={args.units} steps={args.steps} (best of {args.repeat})")
    print(f"{'backend':<8} {'forward ms':>11} {'backward ms':>12}")
    for name, r in (("numba", jit), ("numpy", plain)):
        print(f"{name:<8} {1e3 * r['forward_s']:>11.3f} {1e3 * r['backward_s']:>12.3f}")
    print(f"speedup  {plain['forward_s'] / jit['forward_s']:>11.1f}x {plain['backward_s'] / jit['backward_s']:>11.1f}x")


if __name__ == "__main__":
    main()
