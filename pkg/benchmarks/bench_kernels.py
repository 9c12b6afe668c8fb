"""Compare the compiled mixture-posterior kernel with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from dvrflab import kernels


def make_inputs(n, k, d, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.normal(0, 2, (n, d)), 0.6, 0.4, np.log(rng.dirichlet(np.ones(k))),
            rng.normal(0, 2, (k, d)), rng.uniform(0.1, 1.0, (k, d)))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'n':>7} {'K':>3} {'d':>3} " + " ".join(f"{b:>12}" for b in backends) + "  speedup")
    for n, k, d in [(1, 3, 2), (8, 3, 4), (64, 6, 4), (1024, 6, 8), (16384, 3, 4)]:
        inputs = make_inputs(n, k, d)
        times = []
        for name in backends:
            fn = kernels.get_backend(name)
            number = max(1, 20000 // n)
            best = min(timeit.repeat(lambda: fn(*inputs), number=number, repeat=args.repeat))
            times.append(best / number)
        speed = f"{times[0] / times[1]:7.2f}x" if len(times) == 2 else "      -"
        print(f"{n:>7} {k:>3} {d:>3} " + " ".join(f"{t * 1e6:10.1f}us" for t in times) + "  " + speed)


if __name__ == "__main__":
    main()
