"""Time the numba sampler kernels against their numpy versions.

    python benchmarks/bench_kernels.py --chains 2000 --steps 200

Each kernel is warmed up once (numba compiles on first call) and then timed
with ``timeit``; the two versions are also checked for identical output.
"""

import argparse
import timeit

import numpy as np

from combpred import _kernels


def _inputs(chains: int, steps: int, bits: int, seed: int):
    rng = np.random.default_rng(seed)
    return {
        "init": rng.standard_normal(chains),
        "scores": rng.standard_normal((chains, steps)),
        "log_u": np.log1p(-rng.random((chains, steps))),
        "bits": rng.integers(0, 2, size=(chains, bits)).astype(np.int8),
        "weights": rng.standard_normal(bits),
        "picks": rng.integers(0, bits, size=(chains, steps)),
        "values": rng.integers(0, 2, size=(chains, steps)).astype(np.int8),
    }


def _cases(a):
    return {
        "metropolis_scan": lambda k: getattr(_kernels, f"metropolis_scan_{k}")(a["init"], a["scores"], a["log_u"]),
        "cftp_resolve": lambda k: getattr(_kernels, f"cftp_resolve_{k}")(a["scores"], a["log_u"], 2.0),
        "mc_cube_run": lambda k: getattr(_kernels, f"mc_cube_run_{k}")(a["bits"], a["weights"], a["picks"], a["values"], a["log_u"]),
    }


def _same(x, y) -> bool:
    if isinstance(x, tuple):
        return all(np.array_equal(u, v) for u, v in zip(x, y))
    return np.array_equal(x, y)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--chains", type=int, default=2000)
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--bits", type=int, default=16)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    if not _kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable; nothing to compare")
    cases = _cases(_inputs(args.chains, args.steps, args.bits, args.seed))
    print(f"{'kernel':<16} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  same")
    for name, run in cases.items():
        same = _same(run("np"), run("nb"))
        t_np = min(timeit.repeat(lambda: run("np"), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: run("nb"), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<16} {t_np:>10.2f} {t_nb:>10.2f} {t_np / t_nb:>7.1f}x  {same}")


if __name__ == "__main__":
    main()
