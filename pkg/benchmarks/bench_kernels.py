"""Compare the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--components 18]

Each kernel is run on identical inputs under both backends; outputs are
checked for equality before timings are reported.
"""

from __future__ import annotations

import argparse
import random
import sys
import timeit

from cogplant import _kernels, _pykernels


def placement_case(rng: random.Random, n: int) -> tuple:
    cpu = [rng.uniform(0.5, 4.0) for _ in range(n)]
    mem = [rng.uniform(0.25, 8.0) for _ in range(n)]
    classes = [rng.choice(("Critical", "Normal", "Batch")) for _ in range(n)]
    table = {"Critical": (0.0, 100.0), "Normal": (0.0, 10.0), "Batch": (10.0, 0.0)}
    ce = [table[c][0] for c in classes]
    cc = [table[c][1] for c in classes]
    return cpu, mem, ce, cc, sum(cpu) * 0.45, sum(mem) * 0.45, sum(cpu), sum(mem)


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--components", type=int, default=18)
    ap.add_argument("--samples", type=int, default=200_000)
    args = ap.parse_args(argv)

    core = _kernels.compiled()
    if core is None:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1

    rng = random.Random(7)
    case = placement_case(rng, args.components)
    window = [rng.gauss(0.0, 1.0) for _ in range(30)]
    cases = {
        f"place_bnb n={args.components}": lambda m: m.place_bnb(*case),
        f"gaussian_fill {args.samples}": lambda m: m.gaussian_fill(42, args.samples),
        "window_zscore n=30 x10k": lambda m: [m.window_zscore(window, 3.0, 1e-6) for _ in range(10_000)],
    }

    print(f"{'kernel':32} {'python s':>10} {'cython s':>10} {'speedup':>8}")
    for name, fn in cases.items():
        if fn(_pykernels) != fn(core):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat))
        cy = min(timeit.repeat(lambda: fn(core), number=1, repeat=args.repeat))
        print(f"{name:32} {py:10.4f} {cy:10.4f} {py / cy:7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
