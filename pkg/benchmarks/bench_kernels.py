"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--rows 128] [--dim 128] [--repeat 50]

Also times one stage-1 training epoch under each backend by re-importing
the package with ``FASSL_PURE_PYTHON`` set.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fassl import _kernels_py as ref

try:
    from fassl import _kernels as ext
except ImportError:
    ext = None

EPOCH_SNIPPET = """
import time
from fassl.data import DatasetSpec, synth_gaussian_mixture
from fassl.prototypes import ProtoStageConfig, train_prototype_stage
from fassl.kernels import BACKEND
ds = synth_gaussian_mixture(DatasetSpec())
t0 = time.perf_counter()
train_prototype_stage(ds.unlabeled(), ProtoStageConfig(epochs=3))
print(BACKEND, (time.perf_counter() - t0) / 3)
"""


def cases(rows, dim, rng):
    x = rng.normal(size=(rows, rows))
    mask = ~np.eye(rows, dtype=bool)
    a, b = rng.normal(size=(rows, dim)), rng.normal(size=(rows, dim))
    g = rng.normal(size=(rows, dim))
    y, n = ref.l2n_rows(a)
    cos = ref.cosine_rows(a, b)
    gc = rng.normal(size=rows)
    keys = rng.normal(size=(4 * rows, dim))
    return {
        "lse_rows (masked)": lambda m: m.lse_rows(x, mask),
        "l2n_rows": lambda m: m.l2n_rows(a),
        "l2n_rows_backward": lambda m: m.l2n_rows_backward(g, y, n),
        "cosine_rows": lambda m: m.cosine_rows(a, b),
        "cosine_rows_backward": lambda m: m.cosine_rows_backward(gc, a, b, *cos),
        "nearest_cosine": lambda m: m.nearest_cosine(a, keys),
    }


def epoch_time(pure: bool) -> str:
    env = dict(os.environ, FASSL_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True,
                         text=True, check=True)
    return out.stdout.strip()


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--rows", type=int, default=128)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--repeat", type=int, default=50)
    p.add_argument("--no-epoch", action="store_true", help="skip the end-to-end epoch timing")
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    print(f"rows={args.rows} dim={args.dim} repeat={args.repeat}")
    print(f"{'kernel':24s}{'python (us)':>14s}{'compiled (us)':>16s}{'speedup':>10s}")
    for name, fn in cases(args.rows, args.dim, rng).items():
        t_py = min(timeit.repeat(lambda: fn(ref), number=args.repeat, repeat=3)) / args.repeat * 1e6
        if ext is None:
            print(f"{name:24s}{t_py:14.1f}{'n/a':>16s}{'':>10s}")
            continue
        t_c = min(timeit.repeat(lambda: fn(ext), number=args.repeat, repeat=3)) / args.repeat * 1e6
        print(f"{name:24s}{t_py:14.1f}{t_c:16.1f}{t_py / t_c:9.2f}x")
    if not args.no_epoch:
        print("\nstage-1 epoch, default benchmark data (seconds/epoch):")
        for pure in (True, False):
            print("  " + epoch_time(pure))


if __name__ == "__main__":
    main()
