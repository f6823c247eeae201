"""Compiled vs numpy kernel timings.

    python benchmarks/bench_kernels.py [--repeat 5] [--json]

Times each kernel at the sizes the training loop uses, then a short
Algorithm 1 run with each backend swapped in. Without the compiled
extension only the numpy column is reported.
"""

import argparse
import json
import timeit

import numpy as np

from actsel import _kernels_py, data, kernels, loop, nn

try:
    from actsel import _kernels as _compiled
except ImportError:
    _compiled = None


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_cases(rng):
    for n, k in ((128, 64), (640, 64), (4096, 512)):
        w = np.exp(rng.normal(size=n))
        u = rng.random(k)
        yield f"sample_sequential n={n} k={k}", "sample_sequential", (w, k, u)
    for n, c in ((64, 10), (640, 10), (4096, 100)):
        logits = rng.normal(size=(n, c))
        labels = rng.integers(0, c, n)
        yield f"softmax_xent_rows n={n} K={c}", "softmax_xent_rows", (logits, labels, 0.1)


def swap(impl):
    kernels.sample_sequential = impl.sample_sequential
    kernels.softmax_xent_rows = impl.softmax_xent_rows


def end_to_end(impl, steps):
    ds = data.gen_classification(20_000, 32, 10, 0.2, seed=0)
    train, hold = data.split_holdout(ds, 0.1, seed=0)
    cfg = loop.LoopConfig(learner=nn.ModelSpec((32, 64), "tanh", "classifier", 10),
                          steps=steps, eval_every=steps, seed=0, lr=3e-4)
    ref = loop.pretrain_reference(cfg, train, steps=10)
    swap(impl)
    return lambda: loop.run_algorithm1(cfg, train, hold, ref)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=100, help="Algorithm 1 steps for the end-to-end row")
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)

    backends = {"numpy": _kernels_py}
    if _compiled is not None:
        backends["compiled"] = _compiled
    original = (kernels.sample_sequential, kernels.softmax_xent_rows)
    rows = []
    try:
        for label, name, call_args in kernel_cases(np.random.default_rng(0)):
            row = {"case": label}
            for bname, impl in backends.items():
                fn = getattr(impl, name)
                row[bname] = best_of(lambda: fn(*call_args), args.repeat, 200)
            rows.append(row)
        row = {"case": f"algorithm1 {args.steps} steps B=128 b=64"}
        for bname, impl in backends.items():
            row[bname] = best_of(end_to_end(impl, args.steps), args.repeat, 1)
        rows.append(row)
    finally:
        kernels.sample_sequential, kernels.softmax_xent_rows = original

    for row in rows:
        if "compiled" in row:
            row["speedup"] = row["numpy"] / row["compiled"]
    if args.json:
        print(json.dumps({"default_backend": kernels.BACKEND, "rows": rows}, indent=2))
        return
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'case':42s} {'numpy':>12s} {'compiled':>12s} {'speedup':>8s}")
    for row in rows:
        comp = f"{row['compiled'] * 1e6:10.1f}us" if "compiled" in row else f"{'n/a':>12s}"
        sp = f"{row['speedup']:7.2f}x" if "speedup" in row else f"{'':>8s}"
        print(f"{row['case']:42s} {row['numpy'] * 1e6:10.1f}us {comp} {sp}")


if __name__ == "__main__":
    main()
