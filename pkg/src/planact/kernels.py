"""Hot-path kernels with two interchangeable backends.

The compiled extension (planact._ckern) accelerates causal attention and
the BPE inner loops; a NumPy/pure-Python fallback keeps every feature
working without a compiler.  Selection happens at import: the compiled
backend when available, overridable with PLANACT_KERNELS=c|py.

Both backends implement the same contracts documented on the fallback
functions below; results agree to floating-point tolerance (attention)
or exactly (BPE primitives).
"""

from __future__ import annotations

import math
import os
from collections import Counter

import numpy as np

_FORCED = os.environ.get("PLANACT_KERNELS", "").strip().lower()

try:  # pragma: no cover - depends on build environment
    from . import _ckern as _C
except ImportError:
    _C = None

if _FORCED == "c":
    if _C is None:
        raise ImportError(
            "PLANACT_KERNELS=c but the compiled extension is not built; "
            "reinstall the package or use PLANACT_KERNELS=py"
        )
    _ACTIVE = "c"
elif _FORCED == "py":
    _ACTIVE = "py"
else:
    _ACTIVE = "c" if _C is not None else "py"


def backend_name() -> str:
    return _ACTIVE


def compiled_available() -> bool:
    return _C is not None


# ---------------------------------------------------------------- attention


def _attn_forward_py(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Causal softmax attention.

    q, k, v: [B, H, S, dh] float64.  Returns (out, probs) where probs holds
    the post-softmax weights (upper triangle zero) needed for backward.
    """
    B, H, S, dh = q.shape
    scale = 1.0 / math.sqrt(dh)
    scores = (q @ k.swapaxes(-1, -2)) * scale
    mask = np.triu(np.ones((S, S), dtype=bool), k=1)
    scores[..., mask] = -np.inf
    m = scores.max(axis=-1, keepdims=True)
    p = np.exp(scores - m)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v
    return out, p


def _attn_backward_py(dout, q, k, v, probs):
    """Gradients of _attn_forward_py; probs is the saved forward weights."""
    dh = q.shape[-1]
    scale = 1.0 / math.sqrt(dh)
    dv = probs.swapaxes(-1, -2) @ dout
    dp = dout @ v.swapaxes(-1, -2)
    ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True))
    dq = (ds @ k) * scale
    dk = (ds.swapaxes(-1, -2) @ q) * scale
    return dq, dk, dv


# ---------------------------------------------------------------- BPE loops


def _pair_counts_py(seqs) -> Counter:
    """Counts of each adjacent symbol pair over a corpus of int sequences."""
    counts: Counter = Counter()
    for seq in seqs:
        s = np.asarray(seq)
        for a, b in zip(s[:-1].tolist(), s[1:].tolist()):
            counts[(int(a), int(b))] += 1
    return counts


def _merge_pair_py(seq, a: int, b: int, new_id: int) -> np.ndarray:
    """Replace every non-overlapping left-to-right (a, b) with new_id."""
    s = np.asarray(seq).tolist()
    out = []
    i = 0
    n = len(s)
    while i < n:
        if i + 1 < n and s[i] == a and s[i + 1] == b:
            out.append(new_id)
            i += 2
        else:
            out.append(s[i])
            i += 1
    return np.asarray(out, dtype=np.int32)


def _encode_ranked_py(seq, ranks: dict) -> np.ndarray:
    """Greedy BPE encode: repeatedly apply the lowest-rank merge present.

    ranks maps (a, b) -> (rank, new_id); lower rank merges first.
    """
    s = np.asarray(seq).tolist()
    while len(s) > 1:
        best_rank = None
        best_pair = None
        for i in range(len(s) - 1):
            r = ranks.get((s[i], s[i + 1]))
            if r is not None and (best_rank is None or r[0] < best_rank):
                best_rank = r[0]
                best_pair = (s[i], s[i + 1])
        if best_pair is None:
            break
        a, b = best_pair
        new_id = ranks[best_pair][1]
        out = []
        i = 0
        while i < len(s):
            if i + 1 < len(s) and s[i] == a and s[i + 1] == b:
                out.append(new_id)
                i += 2
            else:
                out.append(s[i])
                i += 1
        s = out
    return np.asarray(s, dtype=np.int32)


if _ACTIVE == "c":  # pragma: no cover - exercised via backend-matrix tests
    def attn_forward(q, k, v):
        return _C.attn_forward(q, k, v)

    def attn_backward(dout, q, k, v, probs):
        return _C.attn_backward(dout, q, k, v, probs)

    def pair_counts(seqs):
        return _C.pair_counts([np.ascontiguousarray(s, dtype=np.int32)
                               for s in seqs])

    def merge_pair(seq, a, b, new_id):
        return _C.merge_pair(np.ascontiguousarray(seq, dtype=np.int32),
                             a, b, new_id)

    def encode_ranked(seq, ranks):
        return _C.encode_ranked(np.ascontiguousarray(seq, dtype=np.int32),
                                ranks)
else:
    attn_forward = _attn_forward_py
    attn_backward = _attn_backward_py
    pair_counts = _pair_counts_py
    merge_pair = _merge_pair_py
    encode_ranked = _encode_ranked_py
