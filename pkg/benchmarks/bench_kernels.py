"""Time the numba and numpy flavours of each kernel on realistic sizes.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""

import argparse
import json
import time

import numpy as np

from gesturegen import kernels as K


def _rotations(rng, shape):
    q, _ = np.linalg.qr(rng.normal(size=shape + (3, 3)))
    return q


def cases(rng):
    # 3 minutes of 20 fps motion with a 25-joint skeleton
    J, T = 25, 3600
    parents = np.array([-1] + [int(rng.integers(j)) for j in range(1, J)], dtype=np.int64)
    rot, trans = _rotations(rng, (T, J)), rng.normal(size=(T, J, 3))
    motion = rng.normal(size=(T, 3 * J)).cumsum(axis=0)
    speeds = np.abs(rng.normal(size=T * J)) * 40
    nccf = np.clip(rng.normal(0.3, 0.4, size=(6000, 320)), -1, 1)
    return {
        "fk_chain": (parents, rot, trans),
        "one_euro": (motion, 20.0, 1.0, 0.01, 1.0),
        "moving_average": (motion, 2),
        "histogram_counts": (speeds, 0.0, 120.0, 30),
        "pick_period": (nccf, 40, 0.45, 0.9),
    }


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write the rows here")
    args = ap.parse_args(argv)

    rows = []
    print(f"numba available: {K.HAS_NUMBA}; default backend: {K.backend()}")
    print(f"{'kernel':<18}{'numpy ms':>11}{'numba ms':>11}{'speedup':>9}")
    for name, call_args in cases(np.random.default_rng(args.seed)).items():
        np_fn = getattr(K, f"{name}_numpy")
        t_np = best_of(np_fn, call_args, args.repeat)
        row = {"kernel": name, "numpy_s": t_np, "numba_s": None}
        if K.HAS_NUMBA:
            nb_fn = getattr(K, f"{name}_numba")
            nb_fn(*call_args)  # compile outside the timed runs
            row["numba_s"] = best_of(nb_fn, call_args, args.repeat)
        rows.append(row)
        nb = row["numba_s"]
        print(f"{name:<18}{t_np * 1e3:>11.2f}" + (f"{nb * 1e3:>11.2f}{t_np / nb:>8.1f}x" if nb else f"{'-':>11}"))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
