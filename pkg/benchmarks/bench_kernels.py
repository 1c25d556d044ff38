"""numba vs numpy timings for the hot kernels.

    python benchmarks/bench_kernels.py [--repeat 5]

Both implementations are imported directly, so HALFSPACE_BE_BACKEND does not
matter here.  Outputs agree to roundoff; the script checks that too.
"""
import argparse
import timeit

import numpy as np

from halfspace_be import profile_evaluator as pe
from halfspace_be import halfspace_resolvent_solver as hs


def case_eval_M(rng, n=2_000_000):
    g1 = rng.uniform(0.5, 5, n) + 1j * rng.uniform(-5, 5, n)
    g2 = g1 + rng.choice([0.0, 1e-6, 1.0], n)
    t = rng.uniform(0, 10, n)
    return (g1, g2, t), pe._eval_M_numba, pe._eval_M_numpy


def case_exp_recursions(rng, M=256, B=9, ni=400):
    decay = np.exp(-rng.uniform(0.01, 0.5, (M, ni)) + 1j * rng.uniform(-0.1, 0.1, (M, ni)))
    inc_m = rng.normal(size=(M, B, ni)) + 1j * rng.normal(size=(M, B, ni))
    inc_p = rng.normal(size=(M, B, ni)) + 1j * rng.normal(size=(M, B, ni))
    return (decay, inc_m, inc_p), hs._exp_recursions_numba, hs._exp_recursions_numpy


def run(repeat=5):
    rng = np.random.default_rng(0)
    rows = []
    for name, case in (("eval_M", case_eval_M), ("exp_recursions", case_exp_recursions)):
        args, fast, slow = case(rng)
        a, b = fast(*args), slow(*args)      # also warms up the jit
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        diff = max(float(np.abs(x - y).max() / (np.abs(y).max() + 1e-300)) for x, y in zip(a, b))
        tn = min(timeit.repeat(lambda: fast(*args), number=1, repeat=repeat))
        tp = min(timeit.repeat(lambda: slow(*args), number=1, repeat=repeat))
        rows.append((name, tn, tp, tp / tn, diff))
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'kernel':<16}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>10}{'rel diff':>12}")
    for name, tn, tp, sp, d in run(args.repeat):
        print(f"{name:<16}{tn:12.4f}{tp:12.4f}{sp:10.1f}{d:12.1e}")


if __name__ == "__main__":
    main()
