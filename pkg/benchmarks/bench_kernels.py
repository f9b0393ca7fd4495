"""Compare the compiled graph kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Sizes mirror a default-scale Meta-KG: about 320 leaves and tens of
thousands of attention edges.
"""

import argparse
import timeit

import numpy as np

from linko import _kernels


def workload(rng, n_nodes=320, mean_degree=60, heads=4, width=8, n_visits=3000, codes=20):
    degree = rng.integers(1, 2 * mean_degree, n_nodes)
    seg_ptr = np.r_[0, np.cumsum(degree)].astype(np.int64)
    e = int(seg_ptr[-1])
    src = rng.integers(0, n_nodes, e).astype(np.int64)
    visits = [np.sort(rng.choice(n_nodes, codes, replace=False)) for _ in range(n_visits)]
    return {
        "seg_ptr": seg_ptr,
        "src": src,
        "scores": rng.normal(size=(e, heads)),
        "grad": rng.normal(size=(e, heads)),
        "values": rng.normal(size=(n_nodes, heads, width)),
        "grad_out": rng.normal(size=(n_nodes, heads, width)),
        "indptr": np.r_[0, np.cumsum([len(v) for v in visits])].astype(np.int64),
        "indices": np.concatenate(visits).astype(np.int64),
        "n": n_nodes,
    }


def cases(w, impl):
    alpha = _kernels.segment_softmax(w["scores"], w["seg_ptr"], impl)
    return {
        "cooccurrence": lambda: _kernels.cooccurrence(w["indptr"], w["indices"], w["n"], impl),
        "segment_softmax": lambda: _kernels.segment_softmax(w["scores"], w["seg_ptr"], impl),
        "segment_softmax_backward": lambda: _kernels.segment_softmax_backward(alpha, w["grad"], w["seg_ptr"], impl),
        "spmm_heads": lambda: _kernels.spmm_heads(alpha, w["src"], w["seg_ptr"], w["values"], impl),
        "spmm_heads_backward": lambda: _kernels.spmm_heads_backward(alpha, w["src"], w["seg_ptr"], w["values"],
                                                                    w["grad_out"], impl),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    backends = _kernels.available_backends()
    w = workload(np.random.default_rng(args.seed))
    print(f"edges {len(w['src'])}, visits {len(w['indptr']) - 1}, active backend {_kernels.BACKEND}")
    timings = {}
    for name, impl in backends.items():
        for kernel, fn in cases(w, impl).items():
            fn()  # warm up
            timings[(kernel, name)] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    print(f"{'kernel':<26}" + "".join(f"{b + ' ms':>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for kernel in cases(w, backends["python"]):
        row = f"{kernel:<26}" + "".join(f"{1e3 * timings[(kernel, b)]:>12.3f}" for b in backends)
        if "cython" in backends:
            row += f"{timings[(kernel, 'python')] / timings[(kernel, 'cython')]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
