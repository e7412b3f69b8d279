"""Tiny decoder-only next-token transformer in plain NumPy.

Both training stages share one masked cross-entropy objective: stage 1
masks the target-frame vision tokens, stage 2 masks the action chunk.
The backward pass is written by hand and checked against central finite
differences in the test suite; training runs in float64 by default so
those checks are meaningful.

During training the output projection is evaluated only at positions that
carry loss, which cuts the dominant [seq, vocab] matmul to the handful of
supervised positions.  The public forward() returns full logits.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .io_bundle import read_bundle, write_bundle
from .sequences import BuildConfig, policy_prefix_tokens

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"KSTM1"
LN_EPS = 1e-5
ADAM_EPS = 1e-8
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass
class TrainConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 0  # 0 means 4 * d_model
    maxlen: int = 512
    lr: float = 3e-3
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    batch_size: int = 16
    steps: int = 1000
    warmup: int = 50
    lr_floor: float = 0.1  # cosine-decay end lr as a fraction of lr
    seed: int = 0
    init_scale: float = 0.02
    context_loss_weight: float = 0.0  # weak planner loss on context frames
    dtype: str = "float64"

    @property
    def ff(self) -> int:
        return self.d_ff if self.d_ff > 0 else 4 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.maxlen < 2 or self.batch_size < 1:
            raise ValueError("maxlen and batch_size must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unsupported dtype {self.dtype}")

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


def init_params(cfg: TrainConfig, vocab_size: int) -> dict:
    """Seeded Gaussian weights, zero biases, unit LayerNorm gains."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    dt = cfg.np_dtype()
    d, ff = cfg.d_model, cfg.ff

    def w(*shape):
        return (rng.normal(size=shape) * cfg.init_scale).astype(dt)

    params = {
        "emb": w(vocab_size, d),
        "pos": w(cfg.maxlen, d),
        "lnf.g": np.ones(d, dtype=dt),
        "lnf.b": np.zeros(d, dtype=dt),
        "head.w": w(d, vocab_size),
        "head.b": np.zeros(vocab_size, dtype=dt),
    }
    for i in range(cfg.n_layers):
        p = f"l{i}."
        params[p + "ln1.g"] = np.ones(d, dtype=dt)
        params[p + "ln1.b"] = np.zeros(d, dtype=dt)
        params[p + "wq"] = w(d, d)
        params[p + "bq"] = np.zeros(d, dtype=dt)
        params[p + "wk"] = w(d, d)
        params[p + "bk"] = np.zeros(d, dtype=dt)
        params[p + "wv"] = w(d, d)
        params[p + "bv"] = np.zeros(d, dtype=dt)
        params[p + "wo"] = w(d, d)
        params[p + "bo"] = np.zeros(d, dtype=dt)
        params[p + "ln2.g"] = np.ones(d, dtype=dt)
        params[p + "ln2.b"] = np.zeros(d, dtype=dt)
        params[p + "w1"] = w(d, ff)
        params[p + "b1"] = np.zeros(ff, dtype=dt)
        params[p + "w2"] = w(ff, d)
        params[p + "b2"] = np.zeros(d, dtype=dt)
    return params


def vocab_of(params: dict) -> int:
    return params["emb"].shape[0]


# ------------------------------------------------------------------- layers


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_backward(dy, cache, g):
    xhat, rstd = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_backward(dy, x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du)


def _split_heads(x, n_heads):
    B, S, d = x.shape
    return x.reshape(B, S, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, S, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, S, H * dh)


def _layers_forward(params: dict, tok: np.ndarray, cfg: TrainConfig):
    """Embedding through the final LayerNorm; returns hidden + caches."""
    B, S = tok.shape
    if S > cfg.maxlen:
        raise ValueError(f"sequence length {S} exceeds maxlen {cfg.maxlen}")
    x = params["emb"][tok] + params["pos"][:S]
    caches = []
    for i in range(cfg.n_layers):
        p = f"l{i}."
        x_in = x
        n1, ln1c = _ln_forward(x_in, params[p + "ln1.g"], params[p + "ln1.b"])
        q = _split_heads(n1 @ params[p + "wq"] + params[p + "bq"], cfg.n_heads)
        k = _split_heads(n1 @ params[p + "wk"] + params[p + "bk"], cfg.n_heads)
        v = _split_heads(n1 @ params[p + "wv"] + params[p + "bv"], cfg.n_heads)
        heads, probs = kernels.attn_forward(q, k, v)
        merged = _merge_heads(heads)
        attn = merged @ params[p + "wo"] + params[p + "bo"]
        x_mid = x_in + attn
        n2, ln2c = _ln_forward(x_mid, params[p + "ln2.g"], params[p + "ln2.b"])
        h1 = n2 @ params[p + "w1"] + params[p + "b1"]
        g1 = _gelu(h1)
        x = x_mid + g1 @ params[p + "w2"] + params[p + "b2"]
        caches.append((x_in, n1, ln1c, q, k, v, probs, merged, x_mid, n2,
                       ln2c, h1, g1))
    hf, lnfc = _ln_forward(x, params["lnf.g"], params["lnf.b"])
    return hf, (tok, caches, lnfc)


def _layers_backward(params: dict, dhf: np.ndarray, fwd_cache, cfg: TrainConfig):
    tok, caches, lnfc = fwd_cache
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    dx, grads["lnf.g"], grads["lnf.b"] = _ln_backward(
        dhf, lnfc, params["lnf.g"]
    )
    for i in reversed(range(cfg.n_layers)):
        p = f"l{i}."
        (x_in, n1, ln1c, q, k, v, probs, merged, x_mid, n2,
         ln2c, h1, g1) = caches[i]
        # mlp branch
        dmlp = dx
        grads[p + "w2"] = g1.reshape(-1, g1.shape[-1]).T @ dmlp.reshape(
            -1, dmlp.shape[-1]
        )
        grads[p + "b2"] = dmlp.sum(axis=(0, 1))
        dg1 = dmlp @ params[p + "w2"].T
        dh1 = _gelu_backward(dg1, h1)
        grads[p + "w1"] = n2.reshape(-1, n2.shape[-1]).T @ dh1.reshape(
            -1, dh1.shape[-1]
        )
        grads[p + "b1"] = dh1.sum(axis=(0, 1))
        dn2 = dh1 @ params[p + "w1"].T
        dx_mid, grads[p + "ln2.g"], grads[p + "ln2.b"] = _ln_backward(
            dn2, ln2c, params[p + "ln2.g"]
        )
        dx_mid = dx_mid + dx  # residual
        # attention branch
        dattn = dx_mid
        grads[p + "wo"] = merged.reshape(-1, merged.shape[-1]).T @ dattn.reshape(
            -1, dattn.shape[-1]
        )
        grads[p + "bo"] = dattn.sum(axis=(0, 1))
        dmerged = dattn @ params[p + "wo"].T
        dheads = _split_heads(dmerged, cfg.n_heads)
        dq, dk, dv = kernels.attn_backward(dheads, q, k, v, probs)
        dq2, dk2, dv2 = (_merge_heads(g) for g in (dq, dk, dv))
        n1f = n1.reshape(-1, n1.shape[-1])
        grads[p + "wq"] = n1f.T @ dq2.reshape(-1, dq2.shape[-1])
        grads[p + "bq"] = dq2.sum(axis=(0, 1))
        grads[p + "wk"] = n1f.T @ dk2.reshape(-1, dk2.shape[-1])
        grads[p + "bk"] = dk2.sum(axis=(0, 1))
        grads[p + "wv"] = n1f.T @ dv2.reshape(-1, dv2.shape[-1])
        grads[p + "bv"] = dv2.sum(axis=(0, 1))
        dn1 = (
            dq2 @ params[p + "wq"].T
            + dk2 @ params[p + "wk"].T
            + dv2 @ params[p + "wv"].T
        )
        dx_in, grads[p + "ln1.g"], grads[p + "ln1.b"] = _ln_backward(
            dn1, ln1c, params[p + "ln1.g"]
        )
        dx = dx_in + dx_mid  # residual
    np.add.at(grads["emb"], tok, dx)
    grads["pos"][: dx.shape[1]] = dx.sum(axis=0)
    return grads


def forward(params: dict, tokens, cfg: TrainConfig) -> np.ndarray:
    """Full next-token logits [S, vocab] for one sequence."""
    tok = np.asarray(tokens, dtype=np.int64)[None, :]
    hf, _ = _layers_forward(params, tok, cfg)
    return hf[0] @ params["head.w"] + params["head.b"]


# --------------------------------------------------------------------- loss


def _gather_loss_positions(mask: np.ndarray):
    """Loss at masked position i is paid by the logits at i-1."""
    rows, cols = np.nonzero(mask)
    if cols.size and cols.min() == 0:
        raise ValueError("masked position 0 has no preceding context")
    return rows, cols


def loss_and_grads(params: dict, batch: dict, cfg: TrainConfig):
    """Mean masked NLL over the batch plus parameter gradients.

    batch: tokens [B, S] int, mask [B, S] bool, optional aux_mask.  The
    head matmul runs only at supervised positions.
    """
    tok = np.asarray(batch["tokens"], dtype=np.int64)
    mask = np.asarray(batch["mask"], dtype=bool)
    if not mask.any():
        raise ValueError("batch carries no loss positions")
    hf, cache = _layers_forward(params, tok, cfg)

    rows, cols = _gather_loss_positions(mask)
    w_aux = cfg.context_loss_weight
    aux = batch.get("aux_mask")
    n_main = rows.size
    weights = np.full(n_main, 1.0 / n_main)
    if w_aux > 0.0 and aux is not None and np.asarray(aux).any():
        arows, acols = _gather_loss_positions(np.asarray(aux, dtype=bool))
        rows = np.concatenate([rows, arows])
        cols = np.concatenate([cols, acols])
        weights = np.concatenate(
            [weights, np.full(arows.size, w_aux / arows.size)]
        )

    h_sel = hf[rows, cols - 1]
    logits = h_sel @ params["head.w"] + params["head.b"]
    targets = tok[rows, cols]
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(rows.size), targets]
    loss = float((nll * weights).sum())

    probs = np.exp(z - lse[:, None])
    dlogits = probs * weights[:, None]
    dlogits[np.arange(rows.size), targets] -= weights
    grads_head_w = h_sel.T @ dlogits
    grads_head_b = dlogits.sum(axis=0)
    dh_sel = dlogits @ params["head.w"].T
    dhf = np.zeros_like(hf)
    np.add.at(dhf, (rows, cols - 1), dh_sel)

    grads = _layers_backward(params, dhf, cache, cfg)
    grads["head.w"] = grads_head_w
    grads["head.b"] = grads_head_b
    # main-term loss only (aux excluded) is what training curves report
    main_loss = float(nll[:n_main].mean())
    return loss, grads, main_loss


def masked_ce_loss(params: dict, tokens, mask, cfg: TrainConfig) -> float:
    """Mean NLL of tokens at mask-true positions given their prefixes."""
    tokens = np.asarray(tokens, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask selects no positions")
    loss, _, _ = loss_and_grads(
        params,
        {"tokens": tokens[None, :], "mask": mask[None, :]},
        cfg,
    )
    return loss


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Adam with decoupled weight decay on matrix-shaped parameters."""

    def __init__(self, params: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def lr_at(self, t: int) -> float:
        cfg = self.cfg
        if cfg.warmup > 0 and t <= cfg.warmup:
            return cfg.lr * t / cfg.warmup
        span = max(1, cfg.steps - cfg.warmup)
        frac = min(1.0, (t - cfg.warmup) / span)
        floor = cfg.lr * cfg.lr_floor
        return floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * frac))

    def step(self, params: dict, grads: dict) -> None:
        cfg = self.cfg
        for name in sorted(grads):
            if not np.isfinite(grads[name]).all():
                raise RuntimeError(
                    f"non-finite gradient in {name!r} at step {self.t + 1}"
                )
        if cfg.grad_clip > 0:
            total = 0.0
            for name in sorted(grads):
                total += float((grads[name] ** 2).sum())
            norm = math.sqrt(total)
            if norm > cfg.grad_clip:
                scale = cfg.grad_clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        b1, b2 = cfg.betas
        lr = self.lr_at(self.t)
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name in sorted(params):
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / c1
            vhat = self.v[name] / c2
            params[name] -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
            if cfg.weight_decay > 0 and params[name].ndim >= 2:
                params[name] -= lr * cfg.weight_decay * params[name]


# ----------------------------------------------------------------- training


def _batches(samples, cfg: TrainConfig, pad_id: int, rng):
    """Endless shuffled batches, collated to the longest row."""
    from .sequences import collate

    order = np.arange(len(samples))
    while True:
        rng.shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            chosen = [samples[i] for i in order[start : start + cfg.batch_size]]
            pad_to = max(len(s.tokens) for s in chosen)
            yield collate(chosen, pad_to=pad_to, pad_id=pad_id)


def train_model(
    samples,
    cfg: TrainConfig,
    vocab_size: int,
    pad_id: int,
    stage: str,
    params: dict | None = None,
    on_step=None,
    snapshot_every: int = 0,
    on_snapshot=None,
) -> dict:
    """Runs cfg.steps AdamW updates; returns the trained parameters.

    params, when given, seeds the run (stage-2 warm start).  on_step, when
    given, is called as on_step(step, stage, loss) after every update.
    on_snapshot(step, params) fires every snapshot_every steps plus at the
    final step, with the live parameter dict; optimizer state carries
    across snapshots, so mid-run evaluation does not perturb training.
    """
    cfg.validate()
    if not samples:
        raise ValueError("no training samples")
    for s in samples:
        if s.stage != stage:
            raise ValueError(
                f"sample from stage {s.stage!r} in a {stage!r} run"
            )
    if params is None:
        params = init_params(cfg, vocab_size)
    else:
        params = {k: v.copy() for k, v in params.items()}
    opt = AdamW(params, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    batches = _batches(samples, cfg, pad_id, rng)
    for step in range(1, cfg.steps + 1):
        batch = next(batches)
        loss, grads, main_loss = loss_and_grads(params, batch, cfg)
        opt.step(params, grads)
        if on_step is not None:
            on_step(step, stage, main_loss)
        if on_snapshot is not None and (
            (snapshot_every > 0 and step % snapshot_every == 0)
            or step == cfg.steps
        ):
            on_snapshot(step, params)
    return params


def train_stage1(samples, cfg: TrainConfig, vocab_size: int, pad_id: int,
                 on_step=None) -> dict:
    return train_model(samples, cfg, vocab_size, pad_id, "planner",
                       on_step=on_step)


def train_stage2(params_in, samples, cfg: TrainConfig, vocab_size: int,
                 pad_id: int, on_step=None, snapshot_every: int = 0,
                 on_snapshot=None) -> dict:
    """Stage-2 fine-tune; params_in=None trains from scratch (ablation)."""
    return train_model(samples, cfg, vocab_size, pad_id, "policy",
                       params=params_in, on_step=on_step,
                       snapshot_every=snapshot_every,
                       on_snapshot=on_snapshot)


# --------------------------------------------------------------- generation


class DecodeState:
    """Per-layer key/value cache for incremental decoding."""

    def __init__(self, params: dict, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.pos = 0
        dt = params["emb"].dtype
        dh = cfg.head_dim
        self.k = [
            np.zeros((cfg.n_heads, cfg.maxlen, dh), dtype=dt)
            for _ in range(cfg.n_layers)
        ]
        self.v = [
            np.zeros((cfg.n_heads, cfg.maxlen, dh), dtype=dt)
            for _ in range(cfg.n_layers)
        ]

    def _advance(self, tokens: np.ndarray) -> np.ndarray:
        """Runs `tokens` at the current offset; returns hidden rows."""
        params, cfg = self.params, self.cfg
        S = tokens.shape[0]
        if self.pos + S > cfg.maxlen:
            raise ValueError(
                f"decode length {self.pos + S} exceeds maxlen {cfg.maxlen}"
            )
        x = params["emb"][tokens] + params["pos"][self.pos : self.pos + S]
        for i in range(cfg.n_layers):
            p = f"l{i}."
            n1, _ = _ln_forward(x, params[p + "ln1.g"], params[p + "ln1.b"])
            q = (n1 @ params[p + "wq"] + params[p + "bq"]).reshape(
                S, cfg.n_heads, cfg.head_dim
            ).transpose(1, 0, 2)
            k = (n1 @ params[p + "wk"] + params[p + "bk"]).reshape(
                S, cfg.n_heads, cfg.head_dim
            ).transpose(1, 0, 2)
            v = (n1 @ params[p + "wv"] + params[p + "bv"]).reshape(
                S, cfg.n_heads, cfg.head_dim
            ).transpose(1, 0, 2)
            self.k[i][:, self.pos : self.pos + S] = k
            self.v[i][:, self.pos : self.pos + S] = v
            K = self.k[i][:, : self.pos + S]
            V = self.v[i][:, : self.pos + S]
            scale = 1.0 / math.sqrt(cfg.head_dim)
            scores = q @ K.swapaxes(-1, -2) * scale  # [H, S, pos+S]
            totals = self.pos + 1 + np.arange(S)
            cols = np.arange(self.pos + S)
            scores[:, cols[None, :] >= totals[:, None]] = -np.inf
            m = scores.max(axis=-1, keepdims=True)
            pr = np.exp(scores - m)
            pr /= pr.sum(axis=-1, keepdims=True)
            heads = pr @ V  # [H, S, dh]
            merged = heads.transpose(1, 0, 2).reshape(S, cfg.d_model)
            x = x + merged @ params[p + "wo"] + params[p + "bo"]
            n2, _ = _ln_forward(x, params[p + "ln2.g"], params[p + "ln2.b"])
            x = x + _gelu(n2 @ params[p + "w1"] + params[p + "b1"]) @ params[
                p + "w2"
            ] + params[p + "b2"]
        self.pos += S
        hf, _ = _ln_forward(x, params["lnf.g"], params["lnf.b"])
        return hf

    def prefill(self, tokens) -> np.ndarray:
        """Consumes the prefix; returns logits for the next token."""
        tok = np.asarray(tokens, dtype=np.int64)
        if tok.size == 0:
            raise ValueError("prefix must be nonempty")
        hf = self._advance(tok)
        return hf[-1] @ self.params["head.w"] + self.params["head.b"]

    def step(self, token: int) -> np.ndarray:
        hf = self._advance(np.asarray([token], dtype=np.int64))
        return hf[-1] @ self.params["head.w"] + self.params["head.b"]


def generate(
    params: dict,
    prefix,
    n: int,
    cfg: TrainConfig,
    mode: str = "greedy",
    temperature: float = 1.0,
    seed: int | None = None,
    allowed=None,
    stop: int | None = None,
) -> list:
    """Up to n tokens continuing prefix; greedy or temperature sampling.

    allowed, when given, is an iterable of permitted ids; everything else
    is masked out before the argmax/sample.  Generation halts early when
    `stop` is produced (the stop token is not returned).
    """
    if mode not in ("greedy", "temperature"):
        raise ValueError(f"unknown mode {mode!r}")
    prefix = list(prefix)
    if len(prefix) + n > cfg.maxlen:
        raise ValueError(
            f"prefix {len(prefix)} + n {n} exceeds maxlen {cfg.maxlen}"
        )
    if n == 0:
        return []
    allow_mask = None
    if allowed is not None:
        allow_mask = np.zeros(vocab_of(params), dtype=bool)
        allow_mask[np.asarray(list(allowed), dtype=int)] = True
    rng = np.random.default_rng(seed)
    state = DecodeState(params, cfg)
    logits = state.prefill(prefix)
    out: list = []
    for _ in range(n):
        if allow_mask is not None:
            logits = np.where(allow_mask, logits, -np.inf)
        if mode == "greedy":
            nxt = int(np.argmax(logits))
        else:
            z = logits / max(temperature, 1e-8)
            z = z - z.max()
            p = np.exp(z)
            p /= p.sum()
            nxt = int(rng.choice(p.size, p=p))
        if stop is not None and nxt == stop:
            break
        out.append(nxt)
        if len(prefix) + len(out) >= cfg.maxlen:
            break
        logits = state.step(nxt)
    return out


def policy_step(
    params: dict,
    codecs,
    build_cfg: BuildConfig,
    train_cfg: TrainConfig,
    instruction: str,
    observations,
    actions,
    with_info: bool = False,
):
    """One closed-loop policy query; returns a [horizon, dims] chunk.

    The prompt is byte-identical to the stage-2 training prefix.  Greedy
    decoding is constrained to action tokens whose byte expansion fits the
    remaining chunk budget, so generation always stops exactly at the
    codec's byte length and the result decodes by construction.
    with_info=True returns (chunk, info) with the token count and a
    fallback flag (zero chunk; unreachable unless the codec is corrupt).
    """
    codec = codecs.action
    space = codecs.space
    prefix = policy_prefix_tokens(
        codecs, instruction, observations, np.asarray(actions, dtype=float)
        if len(actions) else np.zeros((0, codec.dims)),
        len(actions), build_cfg,
    )
    # byte length of each decodable action token; reserved ids excluded
    n_real = codec.bpe.base + len(codec.bpe.merges)
    tok_len = np.array([len(e) for e in codec.bpe.expansions[:n_real]])
    tok_ids = np.arange(n_real) + space.action_base
    if len(prefix) + codec.byte_len > train_cfg.maxlen:
        raise ValueError(
            f"prefix {len(prefix)} + chunk budget {codec.byte_len} "
            f"exceeds maxlen {train_cfg.maxlen}"
        )
    state = DecodeState(params, train_cfg)
    logits = state.prefill(prefix)
    ids: list = []
    remaining = codec.byte_len
    while remaining > 0:
        ok = tok_len <= remaining
        nxt = int(tok_ids[ok][np.argmax(logits[tok_ids[ok]])])
        ids.append(nxt)
        remaining -= int(tok_len[nxt - space.action_base])
        if remaining > 0:
            logits = state.step(nxt)
    info = {"n_tokens": len(ids), "fallback": False}
    try:
        chunk = codec.decode_chunk(np.asarray(ids, dtype=int))
    except ValueError:
        logger.warning(
            "undecodable action tokens (%d ids); emitting zero chunk", len(ids)
        )
        chunk = np.zeros((codec.chunk_horizon, codec.dims))
        info["fallback"] = True
    return (chunk, info) if with_info else chunk


def rollout_token_accuracy(params, cfg: TrainConfig, seqs) -> dict:
    """Greedy-generate each sequence's masked target; count token matches.

    The prompt is everything before the first masked position, so the
    model rolls the whole target segment out on its own predictions
    rather than being teacher forced.
    """
    total = 0
    match = 0
    for s in seqs:
        idx = [i for i, m in enumerate(s.loss_mask) if m]
        if not idx:
            raise ValueError("sequence has an empty loss mask")
        out = generate(params, list(s.tokens[: idx[0]]), len(idx), cfg,
                       mode="greedy")
        want = [s.tokens[i] for i in idx]
        match += sum(int(a == b) for a, b in zip(out, want))
        total += len(idx)
    return {
        "token_accuracy": match / total if total else 0.0,
        "n_tokens": total,
        "n_sequences": len(seqs),
    }


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path: str, params: dict, cfg: TrainConfig,
                    meta: dict | None = None) -> None:
    header = {
        "config": {
            "d_model": cfg.d_model, "n_layers": cfg.n_layers,
            "n_heads": cfg.n_heads, "d_ff": cfg.d_ff, "maxlen": cfg.maxlen,
            "lr": cfg.lr, "betas": list(cfg.betas),
            "weight_decay": cfg.weight_decay, "grad_clip": cfg.grad_clip,
            "batch_size": cfg.batch_size, "steps": cfg.steps,
            "warmup": cfg.warmup, "seed": cfg.seed,
            "init_scale": cfg.init_scale,
            "context_loss_weight": cfg.context_loss_weight,
            "dtype": cfg.dtype,
        },
        "vocab_size": vocab_of(params),
        "meta": meta or {},
    }
    write_bundle(path, CHECKPOINT_MAGIC, header, params)


def load_checkpoint(path: str):
    header, params = read_bundle(path, CHECKPOINT_MAGIC)
    c = dict(header["config"])
    c["betas"] = tuple(c["betas"])
    cfg = TrainConfig(**c)
    return params, cfg, header["meta"]
