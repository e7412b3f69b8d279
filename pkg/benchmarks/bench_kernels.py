"""Timing comparison of the compiled kernels against the fallbacks.

Both backends are importable side by side (the compiled functions via
planact.kernels._C, the fallbacks via their _py names), so this times
them in one process regardless of which one the package selected.

Run:  python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

import planact.kernels as K


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def row(name, shape, t_c, t_py):
    print(f"{name:<28} {shape:<22} {t_c * 1e3:>9.3f} {t_py * 1e3:>9.3f} "
          f"{t_py / t_c:>7.2f}x")


def bench_attention(repeat: int, rng) -> None:
    # second shape matches the training configuration used by the harness
    for B, H, S, dh in [(8, 2, 128, 32), (16, 4, 192, 16)]:
        q, k, v = (rng.normal(size=(B, H, S, dh)) for _ in range(3))
        dout = rng.normal(size=(B, H, S, dh))
        _, probs = K._C.attn_forward(q, k, v)
        shape = f"[{B},{H},{S},{dh}]"
        row("attn_forward", shape,
            best_of(lambda: K._C.attn_forward(q, k, v), repeat),
            best_of(lambda: K._attn_forward_py(q, k, v), repeat))
        row("attn_backward", shape,
            best_of(lambda: K._C.attn_backward(dout, q, k, v, probs), repeat),
            best_of(lambda: K._attn_backward_py(dout, q, k, v, probs), repeat))


def bench_bpe(repeat: int, rng) -> None:
    seqs = [rng.integers(0, 256, size=48).astype(np.int32)
            for _ in range(2000)]
    row("pair_counts", "2000 seqs x 48",
        best_of(lambda: K._C.pair_counts(seqs), repeat),
        best_of(lambda: K._pair_counts_py(seqs), repeat))

    seq = rng.integers(0, 256, size=4096).astype(np.int32)
    a, b = int(seq[0]), int(seq[1])
    row("merge_pair", "len 4096",
        best_of(lambda: K._C.merge_pair(seq, a, b, 300), repeat),
        best_of(lambda: K._merge_pair_py(seq, a, b, 300), repeat))

    # rank table shaped like a trained action vocabulary (~1k merges)
    ranks = {}
    for r in range(1024):
        pa = int(rng.integers(0, 256 + r))
        pb = int(rng.integers(0, 256 + r))
        ranks.setdefault((pa, pb), (r, 256 + r))
    chunks = [rng.integers(0, 256, size=64).astype(np.int32)
              for _ in range(200)]

    def enc(fn):
        for c in chunks:
            fn(c, ranks)

    row("encode_ranked", "200 chunks x 64",
        best_of(lambda: enc(K._C.encode_ranked), repeat),
        best_of(lambda: enc(K._encode_ranked_py), repeat))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5,
                    help="timing passes per kernel; the best is reported")
    args = ap.parse_args()

    if not K.compiled_available():
        raise SystemExit(
            "compiled extension not built; reinstall with a C compiler "
            "to benchmark both backends")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<28} {'shape':<22} {'c (ms)':>9} {'py (ms)':>9} "
          f"{'speedup':>8}")
    bench_attention(args.repeat, rng)
    bench_bpe(args.repeat, rng)


if __name__ == "__main__":
    main()
