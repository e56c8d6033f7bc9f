"""Time the solver kernels of every available backend on random drops.

Usage::

    python benchmarks/bench_kernels.py --M 20 --K 8 --tau 4 --instances 50

Reports per-instance mean and median for the full alternating solve, a
single filter refinement and the refinement-only speed ceiling (the best
possible network-path speedup if inference itself were free).
"""
import argparse
import statistics
import time

import numpy as np

from cfpf import kernels
from cfpf.channel import NetworkConfig, drop_network
from cfpf.solver import _kernel_inputs, solve_alternating


def _time(fn, repeat):
    runs = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        runs.append(time.perf_counter() - start)
    return statistics.median(runs)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--M", type=int, default=20)
    ap.add_argument("--K", type=int, default=8)
    ap.add_argument("--tau", type=int, default=4)
    ap.add_argument("--instances", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    cfg = NetworkConfig(M=args.M, K=args.K, tau=args.tau)
    reals = [drop_network(cfg, args.seed + i) for i in range(args.instances)]
    print(f"M={args.M} K={args.K} tau={args.tau}, {args.instances} instances, median of {args.repeat}")
    for name in sorted(kernels.BACKENDS):
        kern = kernels.get(name)
        solve_t, refine_t, outer = [], [], []
        for r in reals:
            res = solve_alternating(r, backend=name)
            outer.append(res.outer_iterations)
            xi, beta, phi2 = _kernel_inputs(r)
            solve_t.append(_time(lambda: solve_alternating(r, backend=name), args.repeat))
            refine_t.append(_time(lambda: kern.refine(res.p, xi, beta, phi2, r.rho), args.repeat))
        s, f = np.array(solve_t) * 1e6, np.array(refine_t) * 1e6
        print(f"[{name:6s}] solve mean {s.mean():10.1f} us  median {np.median(s):10.1f} us | "
              f"refine mean {f.mean():8.1f} us  median {np.median(f):8.1f} us | "
              f"ceiling {s.mean() / f.mean():5.1f}x | outer iterations mean {np.mean(outer):.2f}")


if __name__ == "__main__":
    main()
