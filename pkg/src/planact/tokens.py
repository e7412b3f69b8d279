"""The unified discrete token space.

Three codecs share one flat id range: a word-level language codec at the
bottom, a patch-codebook vision codec above it, four special tokens, and
an action codec occupying exactly the final 1024 ids.  Vision tokens come
from seeded k-means over 8x8 patches (spatial compression factor 8);
action chunks go through percentile normalization, a per-dimension DCT,
uniform scalar quantization, and byte-pair encoding.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .bpe import BpeModel, bpe_decode, bpe_encode, train_bpe
from .io_bundle import read_bundle, write_bundle

logger = logging.getLogger(__name__)

CODEC_MAGIC = b"KSTK1"

SPECIAL_NAMES = ("bos", "eos", "sep", "pad")
ACTION_VOCAB = 1024
UNK = 0


class DecodeError(ValueError):
    """Raised when a token sequence cannot be decoded back to a chunk."""


@dataclass
class TokenSpace:
    lang_size: int = 512
    vision_size: int = 256
    action_size: int = ACTION_VOCAB

    @property
    def n_special(self) -> int:
        return len(SPECIAL_NAMES)

    @property
    def vision_base(self) -> int:
        return self.lang_size

    @property
    def special_base(self) -> int:
        return self.lang_size + self.vision_size

    @property
    def action_base(self) -> int:
        return self.special_base + self.n_special

    @property
    def vocab_size(self) -> int:
        return self.action_base + self.action_size

    @property
    def bos(self) -> int:
        return self.special_base + 0

    @property
    def eos(self) -> int:
        return self.special_base + 1

    @property
    def sep(self) -> int:
        return self.special_base + 2

    @property
    def pad(self) -> int:
        return self.special_base + 3

    def region_of(self, token_id: int) -> str:
        if 0 <= token_id < self.lang_size:
            return "lang"
        if self.vision_base <= token_id < self.special_base:
            return "vision"
        if self.special_base <= token_id < self.action_base:
            return "special"
        if self.action_base <= token_id < self.vocab_size:
            return "action"
        raise ValueError(f"token id {token_id} outside [0, {self.vocab_size})")

    def validate(self) -> None:
        if self.action_size != ACTION_VOCAB:
            raise ValueError(
                f"action region must hold exactly {ACTION_VOCAB} ids"
            )
        if self.lang_size < 1 or self.vision_size < 1:
            raise ValueError("lang and vision regions must be nonempty")
        if self.action_base != self.vocab_size - ACTION_VOCAB:
            raise ValueError("action region must be the final 1024 ids")


# ------------------------------------------------------------------ language


@dataclass
class LanguageCodec:
    size: int
    word_to_id: dict[str, int]
    id_to_word: dict[int, str] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.id_to_word:
            self.id_to_word = {i: w for w, i in self.word_to_id.items()}

    def encode(self, text: str) -> list[int]:
        return [
            self.word_to_id.get(w, UNK) for w in text.lower().split()
        ]

    def decode(self, ids) -> str:
        return " ".join(self.id_to_word.get(int(i), "<unk>") for i in ids)


def fit_language_codec(texts, size: int = 512) -> LanguageCodec:
    """Word vocabulary in first-seen order; id 0 is reserved for UNK."""
    words: list[str] = []
    seen = set()
    for text in texts:
        for w in text.lower().split():
            if w not in seen:
                seen.add(w)
                words.append(w)
    if len(words) + 1 > size:
        raise ValueError(
            f"language vocabulary needs {len(words) + 1} slots, region has {size}"
        )
    return LanguageCodec(size=size, word_to_id={w: i + 1 for i, w in enumerate(words)})


# -------------------------------------------------------------------- vision


@dataclass
class VisionCodec:
    patch: int
    codebook: np.ndarray  # [K, patch*patch] float64
    base: int = 0

    @property
    def k(self) -> int:
        return self.codebook.shape[0]

    def _patches(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=float)
        if img.ndim != 2:
            raise ValueError(f"image must be 2-D, got {img.shape}")
        h, w = img.shape
        p = self.patch
        if h % p or w % p:
            raise ValueError(f"image dims {h}x{w} not divisible by patch {p}")
        return (
            img.reshape(h // p, p, w // p, p)
            .transpose(0, 2, 1, 3)
            .reshape(-1, p * p)
        )

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        """Row-major nearest-prototype token ids, offset by the region base."""
        patches = self._patches(image)
        d = (
            (patches**2).sum(axis=1, keepdims=True)
            - 2.0 * patches @ self.codebook.T
            + (self.codebook**2).sum(axis=1)
        )
        return (np.argmin(d, axis=1) + self.base).astype(np.int32)

    def decode_image(self, tokens, height: int, width: int) -> np.ndarray:
        p = self.patch
        hp, wp = height // p, width // p
        ids = np.asarray(tokens, dtype=int) - self.base
        if ids.shape[0] != hp * wp:
            raise ValueError(
                f"need {hp * wp} tokens for {height}x{width}, got {ids.shape[0]}"
            )
        if ids.min() < 0 or ids.max() >= self.k:
            raise ValueError("token outside vision region")
        tiles = self.codebook[ids].reshape(hp, wp, p, p)
        return tiles.transpose(0, 2, 1, 3).reshape(height, width)

    def tokens_per_image(self, height: int, width: int) -> int:
        return (height // self.patch) * (width // self.patch)


def fit_vision_codebook(
    images, k: int, seed: int, patch: int = 8, iters: int = 20
) -> VisionCodec:
    """Seeded k-means over patch vectors.

    Duplicate patches are collapsed to unique rows with counts (toy renders
    are extremely redundant), which keeps iterations exact and fast; empty
    clusters are re-seeded from the farthest point.
    """
    all_patches = []
    for img in images:
        im = np.asarray(img, dtype=float)
        h, w = im.shape
        all_patches.append(
            im.reshape(h // patch, patch, w // patch, patch)
            .transpose(0, 2, 1, 3)
            .reshape(-1, patch * patch)
        )
    data = np.concatenate(all_patches, axis=0)
    uniq, counts = np.unique(data, axis=0, return_counts=True)
    if uniq.shape[0] < k:
        raise ValueError(
            f"need at least {k} distinct patches, sample has {uniq.shape[0]}"
        )
    rng = np.random.default_rng(seed)
    centers = uniq[rng.choice(uniq.shape[0], size=k, replace=False)].copy()
    weights = counts.astype(float)
    for _ in range(iters):
        d = (
            (uniq**2).sum(axis=1, keepdims=True)
            - 2.0 * uniq @ centers.T
            + (centers**2).sum(axis=1)
        )
        assign = np.argmin(d, axis=1)
        dist_own = d[np.arange(uniq.shape[0]), assign]
        for j in range(k):
            sel = assign == j
            if not np.any(sel):
                far = int(np.argmax(dist_own))
                centers[j] = uniq[far]
                dist_own[far] = 0.0
                continue
            wsel = weights[sel]
            centers[j] = (uniq[sel] * wsel[:, None]).sum(axis=0) / wsel.sum()
    return VisionCodec(patch=patch, codebook=centers)


# -------------------------------------------------------------------- action


def dct_amplitude_bounds(horizon: int) -> np.ndarray:
    """Per-coefficient max |DCT output| for inputs bounded by 1 in abs."""
    basis = scipy.fft.dct(np.eye(horizon), axis=0, norm="ortho")
    return np.abs(basis).sum(axis=1)


@dataclass
class ActionCodec:
    p1: np.ndarray
    p99: np.ndarray
    chunk_horizon: int
    dct_keep: int
    quant_levels: int
    bpe: BpeModel
    base: int = 0
    bounds: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.bounds.size == 0:
            self.bounds = dct_amplitude_bounds(self.chunk_horizon)[: self.dct_keep]

    @property
    def dims(self) -> int:
        return int(self.p1.shape[0])

    @property
    def byte_len(self) -> int:
        return 2 * self.dct_keep * self.dims

    def _normalize(self, chunk: np.ndarray) -> np.ndarray:
        span = self.p99 - self.p1
        x = np.clip(chunk, self.p1, self.p99)
        out = np.zeros_like(x)
        ok = span > 0
        out[:, ok] = 2.0 * (x[:, ok] - self.p1[ok]) / span[ok] - 1.0
        return out

    def _denormalize(self, xn: np.ndarray) -> np.ndarray:
        span = self.p99 - self.p1
        out = np.tile(self.p1, (xn.shape[0], 1))
        ok = span > 0
        out[:, ok] = (xn[:, ok] + 1.0) / 2.0 * span[ok] + self.p1[ok]
        return out

    def _quantize_bytes(self, chunk: np.ndarray) -> bytes:
        """Normalize, DCT, quantize; dim-major 2-byte big-endian indices."""
        chunk = np.asarray(chunk, dtype=float)
        if chunk.shape != (self.chunk_horizon, self.dims):
            raise ValueError(
                f"chunk shape {chunk.shape} != "
                f"({self.chunk_horizon}, {self.dims})"
            )
        xn = self._normalize(chunk)
        coef = scipy.fft.dct(xn, axis=0, norm="ortho")[: self.dct_keep]
        L = self.quant_levels
        idx = np.rint(
            (coef + self.bounds[:, None]) / (2.0 * self.bounds[:, None]) * (L - 1)
        )
        idx = np.clip(idx, 0, L - 1).astype(np.int64)
        return idx.T.reshape(-1).astype(">u2").tobytes()

    def encode_chunk(self, chunk: np.ndarray) -> np.ndarray:
        """chunk [horizon, dims] -> token ids in the action region."""
        local = bpe_encode(self.bpe, self._quantize_bytes(chunk))
        return (local + self.base).astype(np.int32)

    def decode_chunk(self, tokens) -> np.ndarray:
        """Invert BPE, dequantize, inverse DCT, denormalize."""
        ids = np.asarray(tokens, dtype=int)
        local = ids - self.base
        if local.size and (local.min() < 0 or local.max() >= self.bpe.vocab_size):
            raise DecodeError(
                f"token outside action region: {ids[np.argmin(local)]}"
            )
        try:
            raw = bpe_decode(self.bpe, local)
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
        if len(raw) != self.byte_len:
            raise DecodeError(
                f"decoded byte length {len(raw)} != expected {self.byte_len}"
            )
        L = self.quant_levels
        idx = np.frombuffer(bytes(raw), dtype=">u2").astype(np.int64)
        idx = np.clip(idx, 0, L - 1)
        coef = idx.reshape(self.dims, self.dct_keep).T.astype(float)
        coef = coef / (L - 1) * (2.0 * self.bounds[:, None]) - self.bounds[:, None]
        full = np.zeros((self.chunk_horizon, self.dims))
        full[: self.dct_keep] = coef
        # quantization noise can push the reconstruction slightly past the
        # normalized range; clamp so decoded chunks always land in [p1, p99]
        xn = np.clip(scipy.fft.idct(full, axis=0, norm="ortho"), -1.0, 1.0)
        return self._denormalize(xn)


def fit_action_codec(
    chunks: np.ndarray,
    quant_levels: int = 2048,
    dct_keep: int | None = None,
    vocab_size: int = ACTION_VOCAB,
) -> ActionCodec:
    """Fit percentile bounds and the BPE table on training chunks.

    chunks: [N, horizon, dims].  dct_keep defaults to the full horizon
    (quantization is then the only loss).
    """
    chunks = np.asarray(chunks, dtype=float)
    if chunks.ndim != 3:
        raise ValueError(f"chunks must be [N, horizon, dims], got {chunks.shape}")
    n, horizon, dims = chunks.shape
    flat = chunks.reshape(n * horizon, dims)
    p1 = np.percentile(flat, 1, axis=0)
    p99 = np.percentile(flat, 99, axis=0)
    for d in range(dims):
        if p1[d] >= p99[d]:
            warnings.warn(
                f"action dim {d} is degenerate (p1 == p99 == {p1[d]:.6g}); "
                "it will decode to that constant",
                stacklevel=2,
            )
    codec = ActionCodec(
        p1=p1,
        p99=p99,
        chunk_horizon=horizon,
        dct_keep=dct_keep if dct_keep is not None else horizon,
        quant_levels=quant_levels,
        bpe=BpeModel(base=256, vocab_size=vocab_size, merges=[]),
    )
    corpus = [codec._quantize_bytes(chunks[i]) for i in range(n)]
    codec.bpe = train_bpe(corpus, vocab_size=vocab_size, base=256)
    logger.info(
        "action codec: %d merges learned, %d reserved ids",
        len(codec.bpe.merges), codec.bpe.n_reserved,
    )
    return codec


def harvest_chunks(episodes, horizon: int, stride: int = 1) -> np.ndarray:
    """[N, horizon, dims] command windows pooled across episodes.

    Episodes shorter than the horizon contribute nothing; an empty pool
    is an error.
    """
    if horizon < 1 or stride < 1:
        raise ValueError("horizon and stride must be >= 1")
    rows = []
    for ep in episodes:
        vecs = np.stack([a.command_vector() for a in ep.actions])
        for u in range(0, len(ep.actions) - horizon + 1, stride):
            rows.append(vecs[u : u + horizon])
    if not rows:
        raise ValueError("no chunks: every episode is shorter than horizon")
    return np.stack(rows)


def fit_codec_bundle(
    episodes,
    lang_size: int = 512,
    vision_k: int = 256,
    vision_iters: int = 20,
    max_frames: int = 2000,
    quant_levels: int = 2048,
    horizon: int = 8,
    chunk_stride: int = 4,
    seed: int = 0,
) -> "CodecBundle":
    """Fit all three codecs from expert episodes and assemble the bundle.

    Frames are subsampled evenly to max_frames before the k-means fit;
    the token space's vision region is sized to vision_k.
    """
    lang = fit_language_codec(
        [ep.instruction for ep in episodes], size=lang_size
    )
    frames = [o.image for ep in episodes for o in ep.observations]
    if len(frames) > max_frames:
        idx = np.linspace(0, len(frames) - 1, max_frames).astype(int)
        frames = [frames[i] for i in idx]
    vision = fit_vision_codebook(
        frames, k=vision_k, seed=seed, iters=vision_iters
    )
    chunks = harvest_chunks(episodes, horizon, chunk_stride)
    action = fit_action_codec(chunks, quant_levels=quant_levels)
    space = TokenSpace(lang_size=lang_size, vision_size=vision_k)
    return CodecBundle(space=space, lang=lang, vision=vision, action=action)


# -------------------------------------------------------------------- bundle


@dataclass
class CodecBundle:
    space: TokenSpace
    lang: LanguageCodec
    vision: VisionCodec
    action: ActionCodec

    def __post_init__(self):
        self.space.validate()
        if self.lang.size != self.space.lang_size:
            raise ValueError("language codec size does not match token space")
        if self.vision.k > self.space.vision_size:
            raise ValueError("vision codebook exceeds the vision region")
        if self.action.bpe.vocab_size != self.space.action_size:
            raise ValueError("action vocab does not match the action region")
        self.vision.base = self.space.vision_base
        self.action.base = self.space.action_base

    def encode_frame(self, image: np.ndarray) -> np.ndarray:
        return self.vision.encode_image(image)

    def save(self, path: str) -> None:
        meta = {
            "version": 1,
            "space": {
                "lang_size": self.space.lang_size,
                "vision_size": self.space.vision_size,
                "action_size": self.space.action_size,
            },
            "lang": {
                "size": self.lang.size,
                "words": [
                    w for w, _ in sorted(
                        self.lang.word_to_id.items(), key=lambda kv: kv[1]
                    )
                ],
            },
            "vision": {"patch": self.vision.patch, "k": self.vision.k},
            "action": {
                "chunk_horizon": self.action.chunk_horizon,
                "dct_keep": self.action.dct_keep,
                "quant_levels": self.action.quant_levels,
                "bpe_base": self.action.bpe.base,
                "bpe_vocab": self.action.bpe.vocab_size,
            },
        }
        arrays = {
            "codebook": self.vision.codebook.astype(np.float64),
            "p1": self.action.p1.astype(np.float64),
            "p99": self.action.p99.astype(np.float64),
            "merges": np.asarray(self.action.bpe.merges, dtype=np.int32).reshape(
                -1, 2
            ),
            "bounds": self.action.bounds.astype(np.float64),
        }
        write_bundle(path, CODEC_MAGIC, meta, arrays)

    @classmethod
    def load(cls, path: str) -> "CodecBundle":
        meta, arrays = read_bundle(path, CODEC_MAGIC)
        space = TokenSpace(**meta["space"])
        lang = LanguageCodec(
            size=meta["lang"]["size"],
            word_to_id={w: i + 1 for i, w in enumerate(meta["lang"]["words"])},
        )
        vision = VisionCodec(
            patch=meta["vision"]["patch"], codebook=arrays["codebook"]
        )
        merges = [tuple(int(x) for x in row) for row in arrays["merges"]]
        bpe = BpeModel(
            base=meta["action"]["bpe_base"],
            vocab_size=meta["action"]["bpe_vocab"],
            merges=merges,
        )
        action = ActionCodec(
            p1=arrays["p1"],
            p99=arrays["p99"],
            chunk_horizon=meta["action"]["chunk_horizon"],
            dct_keep=meta["action"]["dct_keep"],
            quant_levels=meta["action"]["quant_levels"],
            bpe=bpe,
            bounds=arrays["bounds"],
        )
        return cls(space=space, lang=lang, vision=vision, action=action)


def tokenize_episode(bundle: CodecBundle, ep) -> dict:
    """Stream form used by the tokenize CLI: language ids + per-frame ids."""
    return {
        "id": ep.id,
        "lang": [int(t) for t in bundle.lang.encode(ep.instruction)],
        "frames": [
            [int(t) for t in bundle.vision.encode_image(o.image)]
            for o in ep.observations
        ],
    }
