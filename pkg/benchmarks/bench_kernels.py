"""Compare the compiled segment kernels against the pure-numpy fallback.

Times every kernel pair on a training-shaped workload (a batch of variable
length bags flattened into one matrix) and reports the median wall time per
call plus the largest numerical deviation between the two backends.

Run as: python3 benchmarks/bench_kernels.py [--batch 64] [--dim 768]
"""

import argparse
import statistics
import time

import numpy as np

from gmil import _kernels_np as knp

try:
    from gmil import _speedups as kcy
except ImportError:
    kcy = None


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64)
                               - np.asarray(b, dtype=np.float64))))


def build_workload(batch, dim, seed):
    rng = np.random.default_rng(seed)
    lengths = rng.integers(20, 61, size=batch)
    offsets = np.zeros(batch + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    n = int(offsets[-1])
    feats = rng.normal(size=(n, dim))
    scores = rng.normal(size=n)
    weights = knp.seg_softmax(scores, offsets)
    grad_rows = rng.normal(size=(n, dim))
    grad_bags = rng.normal(size=(batch, dim))
    ref = knp.normal_reference_seg(weights, offsets, 0.25)
    return {
        "offsets": offsets, "n": n, "feats": feats, "scores": scores,
        "weights": weights, "grad_rows": grad_rows, "grad_bags": grad_bags,
        "grad_flat": rng.normal(size=n), "ref": ref,
    }


def kernel_cases(w):
    """(name, callable-factory) pairs covering every exported kernel."""
    off = w["offsets"]
    _, np_argmax = knp.seg_colmax(w["feats"], off)
    _, np_stack = knp.chain_smooth(w["feats"], off, 0.5, 10, False)
    cases = [
        ("seg_sum", lambda k: k.seg_sum(w["scores"], off)),
        ("seg_softmax", lambda k: k.seg_softmax(w["scores"], off)),
        ("seg_softmax_vjp",
         lambda k: k.seg_softmax_vjp(w["weights"], w["grad_flat"], off)),
        ("seg_weighted_pool",
         lambda k: k.seg_weighted_pool(w["feats"], w["weights"], off)),
        ("seg_weighted_pool_vjp",
         lambda k: k.seg_weighted_pool_vjp(w["feats"], w["weights"], off,
                                           w["grad_bags"])),
        ("seg_colmax", lambda k: k.seg_colmax(w["feats"], off)),
        ("seg_colmax_vjp",
         lambda k: k.seg_colmax_vjp(np_argmax, w["grad_bags"], w["n"])),
        ("chain_smooth",
         lambda k: k.chain_smooth(w["feats"], off, 0.5, 10, False)),
        ("chain_smooth_vjp",
         lambda k: k.chain_smooth_vjp(w["feats"], off, 0.5, 10, False,
                                      np_stack, w["grad_rows"])),
        ("seg_positions", lambda k: k.seg_positions(off)),
        ("normal_reference_seg",
         lambda k: k.normal_reference_seg(w["weights"], off, 0.25)),
        ("divergence_seg",
         lambda k: k.divergence_seg(knp.DIV_FORWARD_KL, w["ref"],
                                    w["weights"], off, 1e-12)),
    ]
    return cases


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--dim", type=int, default=768)
    parser.add_argument("--repeats", type=int, default=30)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if kcy is None:
        print("compiled backend not available; nothing to compare")
        return

    w = build_workload(args.batch, args.dim, args.seed)
    print(f"batch={args.batch} bags, dim={args.dim}, "
          f"{w['n']} instances, median of {args.repeats} runs\n")
    header = (f"{'kernel':<24} {'numpy (ms)':>12} {'compiled (ms)':>14} "
              f"{'speedup':>8} {'max |diff|':>12}")
    print(header)
    print("-" * len(header))
    for name, factory in kernel_cases(w):
        out_np = factory(knp)
        out_cy = factory(kcy)
        diff = _max_diff(out_np, out_cy)
        t_np = _median_time(lambda: factory(knp), args.repeats)
        t_cy = _median_time(lambda: factory(kcy), args.repeats)
        print(f"{name:<24} {t_np * 1e3:>12.3f} {t_cy * 1e3:>14.3f} "
              f"{t_np / t_cy:>7.2f}x {diff:>12.2e}")


if __name__ == "__main__":
    main()
