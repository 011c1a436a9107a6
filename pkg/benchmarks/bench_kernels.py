"""Compare the numba kernels with their pure-numpy fallbacks.

Kernel timings call both variants in one process. The model step timing runs
a child process per backend so that ``STORMSEG_DISABLE_NUMBA`` takes effect
at import time.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--batch 4]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

STEP_SNIPPET = """
import json, sys, timeit
import numpy as np
from stormseg._accel import HAVE_NUMBA
from stormseg.losses import LossSpec, compute_loss, one_hot
from stormseg.model import TINY_CONFIG, forward, init_model
from stormseg.tensor import backward

batch, repeat = int(sys.argv[1]), int(sys.argv[2])
mp = init_model(TINY_CONFIG)
r = np.random.default_rng(0)
x = r.normal(size=(batch, 4, 32, 64))
y = one_hot(r.integers(0, 3, size=(batch, 32, 64)))
spec = LossSpec("jaccard")

def step():
    backward(compute_loss(forward(x, mp, TINY_CONFIG, "train"), y, spec), mp.params)

step()  # warm-up (and JIT compile when numba is on)
best = min(timeit.repeat(step, number=1, repeat=repeat))
print(json.dumps({"numba": HAVE_NUMBA, "seconds": best}))
"""


def best_of(fn, repeat, number=3):
    fn()
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def kernel_rows(repeat):
    from stormseg import kernels as K
    from stormseg._accel import HAVE_NUMBA

    if not HAVE_NUMBA:
        print("numba unavailable or disabled; kernel comparison skipped", file=sys.stderr)
        return []
    r = np.random.default_rng(0)
    rows = []
    for n, c, h, w, stride, dil in ((4, 32, 16, 32, 1, 2), (4, 64, 8, 16, 1, 4), (4, 16, 32, 64, 2, 1)):
        k = 3
        pad = dil
        xp = r.normal(size=(n, c, h + 2 * pad, w + 2 * pad))
        wt = r.normal(size=(c, k, k))
        oh = (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
        ow = (w + 2 * pad - dil * (k - 1) - 1) // stride + 1
        g = r.normal(size=(n, c, oh, ow))
        cols = K.im2col(xp, k, stride, dil, oh, ow)
        label = f"N{n} C{c} {h}x{w} s{stride} d{dil}"
        for kind, fnp, fnb in (
            ("depthwise fwd", lambda: K.depthwise_forward_numpy(xp, wt, stride, dil, oh, ow),
             lambda: K.depthwise_forward_numba(xp, wt, stride, dil, oh, ow)),
            ("depthwise bwd", lambda: K.depthwise_backward_numpy(xp, wt, g, stride, dil),
             lambda: K.depthwise_backward_numba(xp, wt, g, stride, dil)),
            ("col2im", lambda: K.col2im_numpy(cols, xp.shape, stride, dil),
             lambda: K.col2im_numba(cols, xp.shape, stride, dil)),
        ):
            a, b = fnp(), fnb()
            agree = all(np.allclose(u, v, rtol=1e-12, atol=1e-12) for u, v in
                        zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)))
            rows.append((kind, label, best_of(fnp, repeat), best_of(fnb, repeat), agree))
    return rows


def model_step(disable, batch, repeat):
    env = dict(os.environ, STORMSEG_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET, str(batch), str(repeat)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=4)
    args = ap.parse_args(argv)

    print(f"{'kernel':<14} {'shape':<24} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  agree")
    for kind, label, t_np, t_nb, agree in kernel_rows(args.repeat):
        print(f"{kind:<14} {label:<24} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>7.2f}x  {agree}")

    np_step = model_step(True, args.batch, args.repeat)
    nb_step = model_step(False, args.batch, args.repeat)
    print(f"\ntiny model train step, batch {args.batch} x 4 x 32 x 64 (forward + backward):")
    print(f"  numpy fallback : {np_step['seconds'] * 1e3:9.2f} ms")
    print(f"  numba kernels  : {nb_step['seconds'] * 1e3:9.2f} ms  (numba active: {nb_step['numba']})")
    print(f"  speedup        : {np_step['seconds'] / nb_step['seconds']:9.2f}x")


if __name__ == "__main__":
    main()
