"""Compare the compiled convolution kernels against the numpy fallback.

Times forward, input-gradient, and kernel-gradient passes over the
layer shapes the default model actually runs, reporting GMAC/s per
backend. Runs fine when the compiled extension is absent (fallback
only, with a note).

Usage: python benchmarks/bench_kernels.py [--repeats N] [--json PATH]
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from volprob.kernels import reference

try:
    from volprob.kernels import _native as native
except ImportError:
    native = None

# (label, cin, cout, d, h, w, k): the default model's hot layers
SHAPES = [
    ("input conv", 1, 8, 16, 32, 32, 3),
    ("level-0 conv", 8, 8, 16, 32, 32, 3),
    ("level-1 conv", 16, 16, 8, 16, 16, 3),
    ("level-2 conv", 32, 32, 4, 8, 8, 3),
    ("f-comb conv", 14, 8, 16, 32, 32, 1),
]


def _macs(cin, cout, d, h, w, k):
    return d * h * w * cin * cout * k ** 3


def _time_median(fn, repeats):
    times = []
    fn()  # warm-up
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_backend(impl, cin, cout, d, h, w, k, repeats):
    rng = np.random.default_rng(0)
    pad = k // 2
    x = rng.normal(size=(cin, d, h, w))
    wt = rng.normal(size=(cout, cin, k, k, k))
    gout = rng.normal(size=(cout, d, h, w))
    return {
        "forward": _time_median(lambda: impl.conv3d_forward(x, wt, 1, pad), repeats),
        "grad_input": _time_median(
            lambda: impl.conv3d_backward_input(gout, wt, x.shape, 1, pad), repeats),
        "grad_kernel": _time_median(
            lambda: impl.conv3d_backward_kernel(gout, x, k, 1, pad), repeats),
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7)
    parser.add_argument("--json", default=None, help="optional JSON output path")
    args = parser.parse_args()

    backends = {"fallback": reference}
    if native is not None:
        backends["native"] = native
    else:
        print("compiled extension not available; timing the fallback only")

    results = []
    total_time = {name: 0.0 for name in backends}
    header = f"{'shape':<14} {'pass':<12}" + "".join(f"{name:>12}" for name in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for label, cin, cout, d, h, w, k in SHAPES:
        macs = _macs(cin, cout, d, h, w, k)
        timed = {name: bench_backend(impl, cin, cout, d, h, w, k, args.repeats)
                 for name, impl in backends.items()}
        for key in ("forward", "grad_input", "grad_kernel"):
            row = {"shape": label, "pass": key, "macs": macs}
            line = f"{label:<14} {key:<12}"
            for name in backends:
                total_time[name] += timed[name][key]
                gmacs = macs / timed[name][key] / 1e9
                row[name + "_gmacs"] = gmacs
                line += f"{gmacs:>10.2f}  "
            if len(backends) == 2:
                ratio = timed["fallback"][key] / timed["native"][key]
                row["native_speedup"] = ratio
                line += f"{ratio:>8.2f}x"
            results.append(row)
            print(line)

    if len(backends) == 2:
        print(f"\noverall: native is {total_time['fallback'] / total_time['native']:.2f}x "
              f"the fallback across these shapes")

    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, sort_keys=True, indent=1)
            fh.write("\n")
        print(f"wrote {args.json}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
