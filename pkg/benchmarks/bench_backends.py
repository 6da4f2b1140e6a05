"""Timing comparison between the numpy and compiled decode kernels.

Runs the cached-decode attention kernel on shapes the pipeline actually
hits (single-token decode, chunked prefill at several cache sizes) and a
whole-model forward, printing per-call times and the speedup. Also
cross-checks that both backends agree to tight float tolerance.

Usage: python benchmarks/bench_backends.py [--repeats N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from kvlab.backend import compiled_available, get_kernel
from kvlab.model import ModelConfig, forward_full, init_params
from kvlab.numerics import RandomStream


def _case(nq: int, g: int, nk: int, n_prior: int, stream: RandomStream):
    q = stream.normals(nq * g * 16).reshape(nq, g, 16)
    keys = stream.normals(nk * 16).reshape(nk, 16)
    values = stream.normals(nk * 16).reshape(nk, 16)
    return q, keys, values, n_prior


def time_kernel(kernel, case, repeats: int) -> float:
    q, keys, values, n_prior = case
    kernel(q, keys, values, n_prior)  # warmup
    start = time.perf_counter()
    for _ in range(repeats):
        kernel(q, keys, values, n_prior)
    return (time.perf_counter() - start) / repeats


def check_agreement(cases) -> float:
    py = get_kernel("python")
    cy = get_kernel("compiled")
    worst = 0.0
    for case in cases:
        q, keys, values, n_prior = case
        p_a, o_a = py(q, keys, values, n_prior)
        p_b, o_b = cy(q, keys, values, n_prior)
        worst = max(worst,
                    float(np.abs(p_a - p_b).max()),
                    float(np.abs(o_a - o_b).max()))
    return worst


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()

    stream = RandomStream(0).derive("bench")
    cases = {
        "decode nq=1 nk=160": _case(1, 4, 160, 159, stream),
        "decode nq=1 nk=1024": _case(1, 4, 1024, 1023, stream),
        "chunk nq=32 nk=160": _case(32, 4, 160, 128, stream),
        "chunk nq=160 nk=160": _case(160, 4, 160, 0, stream),
        "full nq=1024 nk=1024": _case(1024, 4, 1024, 0, stream),
    }

    names = ["python"] + (["compiled"] if compiled_available() else [])
    print(f"{'case':<24}" + "".join(f"{n:>14}" for n in names) +
          ("{:>10}".format("speedup") if len(names) == 2 else ""))
    for label, case in cases.items():
        times = [time_kernel(get_kernel(n), case, args.repeats) for n in names]
        row = f"{label:<24}" + "".join(f"{t * 1e6:>12.1f}us" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>9.2f}x"
        print(row)

    if compiled_available():
        print(f"\nmax |python - compiled| over cases: "
              f"{check_agreement(cases.values()):.3e}")
    else:
        print("\ncompiled kernel not built; python timings only")

    config = ModelConfig()
    params = init_params(config, 0)
    tokens = RandomStream(1).derive("tokens").integers(1024, config.vocab_size)
    start = time.perf_counter()
    forward_full(params, tokens)
    print(f"forward_full T=1024 (selected backend): "
          f"{time.perf_counter() - start:.3f}s")


if __name__ == "__main__":
    main()
