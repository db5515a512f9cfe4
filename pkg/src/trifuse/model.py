"""Forward pass of the tri-source retrieval model.

Four branch encoders (one per post/fact x native/english source), two concat
encoders, L2 normalization, the three cosine similarity matrices A (concat),
B (english), C (native), and the fused score matrix

    X[i, j] = lam1 * e^{s1} * A[i, j] + lam2 * e^{s2} * B[i, j] + lam3 * e^{s3} * C[i, j]

All math runs in float64; checkpoints store float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadFormatError,
    BadMagicError,
    BadVersionError,
    CheckpointMismatchError,
    NonFiniteValueError,
    OverflowReportedError,
    ShapeMismatchError,
    TrainBatchTooSmallError,
)
from .store import DatasetBundle, l2_normalize

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

BRANCH_NAMES = ("post_native_enc", "post_english_enc", "fact_native_enc", "fact_english_enc")
CONCAT_NAMES = ("post_concat_enc", "fact_concat_enc")
_LAYER_IDS = {name: i for i, name in enumerate(BRANCH_NAMES)}


@dataclass
class BranchEncoderParams:
    """Linear -> BatchNorm -> ReLU -> Dropout -> Linear."""

    W1: np.ndarray
    b1: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    dropout_p: float = 0.2
    bn_eps: float = BN_EPS

    @property
    def d_in(self) -> int:
        return int(self.W1.shape[0])

    @property
    def hidden(self) -> int:
        return int(self.W1.shape[1])


@dataclass
class ConcatEncoderParams:
    """Linear (2H -> H) -> ReLU -> Linear (H -> H)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray


@dataclass
class FusionParams:
    """Trainable mixing weights and log-scale temperatures, one per matrix."""

    lam: np.ndarray  # shape (3,) for (A, B, C)
    s: np.ndarray  # shape (3,), applied as e^{s}

    def scales(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            scales = np.exp(self.s)
        if not np.isfinite(scales).all():
            raise OverflowReportedError(f"e^s overflowed: s={self.s}")
        return scales


@dataclass
class ModelParams:
    post_native_enc: BranchEncoderParams
    post_english_enc: BranchEncoderParams
    fact_native_enc: BranchEncoderParams
    fact_english_enc: BranchEncoderParams
    post_concat_enc: ConcatEncoderParams
    fact_concat_enc: ConcatEncoderParams
    fusion: FusionParams
    # when True, concat encoders consume the raw branch outputs; when False,
    # the normalized vectors (configurable behavior, raw is the default)
    concat_from_raw: bool = True

    def branch(self, name: str) -> BranchEncoderParams:
        return getattr(self, name)

    @property
    def hidden(self) -> int:
        return self.post_native_enc.hidden


@dataclass
class SimilarityTriple:
    A: np.ndarray  # concat-space cosine, Nf x Np
    B: np.ndarray  # english cosine
    C: np.ndarray  # native cosine
    X: np.ndarray | None = None


def init_model(
    d_native: int = 1024,
    d_english: int = 1024,
    hidden: int = 256,
    dropout_p: float = 0.2,
    seed: int = 0,
    s_init: float = float(np.log(1.0 / 0.07)),
) -> ModelParams:
    """Random initialization: Kaiming-style uniform fan-in bound per linear layer."""
    rng = np.random.default_rng(seed)

    def linear(fan_in, fan_out):
        bound = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        return w, b

    def branch(d_in):
        w1, b1 = linear(d_in, hidden)
        w2, b2 = linear(hidden, hidden)
        return BranchEncoderParams(
            W1=w1,
            b1=b1,
            bn_gamma=np.ones(hidden),
            bn_beta=np.zeros(hidden),
            bn_running_mean=np.zeros(hidden),
            bn_running_var=np.ones(hidden),
            W2=w2,
            b2=b2,
            dropout_p=dropout_p,
        )

    def concat():
        w1, b1 = linear(2 * hidden, hidden)
        w2, b2 = linear(hidden, hidden)
        return ConcatEncoderParams(W1=w1, b1=b1, W2=w2, b2=b2)

    return ModelParams(
        post_native_enc=branch(d_native),
        post_english_enc=branch(d_english),
        fact_native_enc=branch(d_native),
        fact_english_enc=branch(d_english),
        post_concat_enc=concat(),
        fact_concat_enc=concat(),
        fusion=FusionParams(lam=np.ones(3), s=np.full(3, s_init)),
    )


def dropout_mask(shape, p: float, seed: int, layer_id: int, step: int) -> np.ndarray:
    """Reproducible inverted-scaling dropout mask from a counter-based RNG."""
    key = np.array(
        [np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(((layer_id & 0xFFFFFFFF) << 32) | (step & 0xFFFFFFFF))],
        dtype=np.uint64,
    )
    rng = np.random.Generator(np.random.Philox(key=key))
    return (rng.random(shape) >= p).astype(np.float64) / (1.0 - p)


def branch_forward(
    params: BranchEncoderParams,
    batch: np.ndarray,
    mode: str = "eval",
    dropout_seed: int = 0,
    layer_id: int = 0,
    step: int = 0,
    update_running: bool = False,
) -> tuple[np.ndarray, dict]:
    """Run one branch encoder, returning the output and the activation cache."""
    x = np.asarray(batch, dtype=np.float64)
    if not np.isfinite(x).all():
        raise NonFiniteValueError("branch input contains non-finite values")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    if mode == "train" and x.shape[0] < 2:
        raise TrainBatchTooSmallError(
            f"train-mode batch statistics need >= 2 rows, got {x.shape[0]}"
        )
    z1 = x @ params.W1 + params.b1
    if mode == "train":
        mu = z1.mean(axis=0)
        var = z1.var(axis=0)
        if update_running:
            m = z1.shape[0]
            unbiased = var * m / max(m - 1, 1)
            params.bn_running_mean *= 1.0 - BN_MOMENTUM
            params.bn_running_mean += BN_MOMENTUM * mu
            params.bn_running_var *= 1.0 - BN_MOMENTUM
            params.bn_running_var += BN_MOMENTUM * unbiased
    else:
        mu = params.bn_running_mean
        var = params.bn_running_var
    inv_std = 1.0 / np.sqrt(var + params.bn_eps)
    xhat = (z1 - mu) * inv_std
    y = params.bn_gamma * xhat + params.bn_beta
    r = np.maximum(y, 0.0)
    if mode == "train" and params.dropout_p > 0.0:
        mask = dropout_mask(r.shape, params.dropout_p, dropout_seed, layer_id, step)
    else:
        mask = np.ones_like(r)
    d = r * mask
    out = d @ params.W2 + params.b2
    if not np.isfinite(out).all():
        raise NonFiniteValueError("branch output contains non-finite values")
    cache = {"x": x, "z1": z1, "xhat": xhat, "inv_std": inv_std, "y": y, "mask": mask, "d": d, "mode": mode}
    return out, cache


def encode_branch(
    params: BranchEncoderParams,
    batch: np.ndarray,
    mode: str = "eval",
    dropout_seed: int = 0,
    layer_id: int = 0,
    step: int = 0,
) -> np.ndarray:
    out, _ = branch_forward(params, batch, mode, dropout_seed, layer_id, step)
    return out


def concat_forward(
    params: ConcatEncoderParams, native_out: np.ndarray, english_out: np.ndarray
) -> tuple[np.ndarray, dict]:
    if native_out.shape != english_out.shape:
        raise ShapeMismatchError(
            f"concat inputs disagree: {native_out.shape} vs {english_out.shape}"
        )
    joined = np.concatenate([native_out, english_out], axis=1)  # native first
    z1 = joined @ params.W1 + params.b1
    r = np.maximum(z1, 0.0)
    out = r @ params.W2 + params.b2
    cache = {"joined": joined, "z1": z1, "r": r}
    return out, cache


def encode_concat(
    params: ConcatEncoderParams, native_out: np.ndarray, english_out: np.ndarray
) -> np.ndarray:
    out, _ = concat_forward(params, native_out, english_out)
    return out


def normalize_forward(v: np.ndarray) -> tuple[np.ndarray, dict]:
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    vhat = l2_normalize(v)
    return vhat, {"vhat": vhat, "norms": norms}


def forward_embeddings(
    model: ModelParams,
    fact_native: np.ndarray,
    fact_english: np.ndarray,
    post_native: np.ndarray,
    post_english: np.ndarray,
    mode: str = "eval",
    dropout_seed: int = 0,
    step: int = 0,
    update_running: bool = False,
    with_cache: bool = False,
):
    """Encode fact and post rows into the six unit-norm matrices.

    Returns {"fact": {...}, "post": {...}} with keys native/english/concat,
    plus the activation cache when requested.
    """
    cache: dict = {"mode": mode}
    outs: dict = {"fact": {}, "post": {}}
    raw: dict = {"fact": {}, "post": {}}
    inputs = {
        ("post", "native"): post_native,
        ("post", "english"): post_english,
        ("fact", "native"): fact_native,
        ("fact", "english"): fact_english,
    }
    for (side, source), batch in inputs.items():
        name = f"{side}_{source}_enc"
        out, bcache = branch_forward(
            model.branch(name), batch, mode, dropout_seed, _LAYER_IDS[name], step, update_running
        )
        raw[side][source] = out
        cache[name] = bcache
    for side in ("fact", "post"):
        params = model.post_concat_enc if side == "post" else model.fact_concat_enc
        for source in ("native", "english"):
            vhat, ncache = normalize_forward(raw[side][source])
            outs[side][source] = vhat
            cache[f"norm_{side}_{source}"] = ncache
        if model.concat_from_raw:
            cin_native, cin_english = raw[side]["native"], raw[side]["english"]
        else:
            cin_native, cin_english = outs[side]["native"], outs[side]["english"]
        cout, ccache = concat_forward(params, cin_native, cin_english)
        raw[side]["concat"] = cout
        cache[f"{side}_concat_enc"] = ccache
        vhat, ncache = normalize_forward(cout)
        outs[side]["concat"] = vhat
        cache[f"norm_{side}_concat"] = ncache
    cache["raw"] = raw
    if with_cache:
        return outs, cache
    return outs


def similarity_triple(fact_embs: dict, post_embs: dict) -> SimilarityTriple:
    """Cosine matrices from unit-norm embeddings; rows are facts, columns posts."""
    for source in ("concat", "english", "native"):
        if fact_embs[source].shape[1] != post_embs[source].shape[1]:
            raise ShapeMismatchError(f"{source}: embedding widths differ")
    return SimilarityTriple(
        A=fact_embs["concat"] @ post_embs["concat"].T,
        B=fact_embs["english"] @ post_embs["english"].T,
        C=fact_embs["native"] @ post_embs["native"].T,
    )


def fuse_scores(triple: SimilarityTriple, fusion: FusionParams) -> np.ndarray:
    """Elementwise weighted sum of the three similarity matrices."""
    if not (triple.A.shape == triple.B.shape == triple.C.shape):
        raise ShapeMismatchError("A, B, C must share a shape")
    scales = fusion.scales()
    x = (
        fusion.lam[0] * scales[0] * triple.A
        + fusion.lam[1] * scales[1] * triple.B
        + fusion.lam[2] * scales[2] * triple.C
    )
    if not np.isfinite(x).all():
        raise OverflowReportedError("fused scores overflowed to non-finite values")
    triple.X = x
    return x


def score_matrix(
    model: ModelParams,
    fact_native: np.ndarray,
    fact_english: np.ndarray,
    post_native: np.ndarray,
    post_english: np.ndarray,
) -> np.ndarray:
    """Monolithic eval-mode fused score matrix (Nf x Np)."""
    embs = forward_embeddings(model, fact_native, fact_english, post_native, post_english, mode="eval")
    triple = similarity_triple(embs["fact"], embs["post"])
    return fuse_scores(triple, model.fusion)


def iter_score_tiles(
    model: ModelParams,
    fact_native: np.ndarray,
    fact_english: np.ndarray,
    post_native: np.ndarray,
    post_english: np.ndarray,
    fact_block_size: int,
    post_block_size: int,
):
    """Yield (fact_offset, post_offset, tile) covering the full score matrix.

    Eval-mode encoding is row-independent, so tiles agree with the monolithic
    matrix up to float round-off.
    """
    if fact_block_size < 1 or post_block_size < 1:
        raise ValueError("block sizes must be >= 1")
    nf, npst = fact_native.shape[0], post_native.shape[0]
    for fi in range(0, nf, fact_block_size):
        fslice = slice(fi, min(fi + fact_block_size, nf))
        for pi in range(0, npst, post_block_size):
            pslice = slice(pi, min(pi + post_block_size, npst))
            tile = score_matrix(
                model,
                fact_native[fslice],
                fact_english[fslice],
                post_native[pslice],
                post_english[pslice],
            )
            yield fi, pi, tile


def blockwise_scores(
    model: ModelParams,
    fact_native: np.ndarray,
    fact_english: np.ndarray,
    post_native: np.ndarray,
    post_english: np.ndarray,
    fact_block_size: int,
    post_block_size: int,
) -> np.ndarray:
    """Assemble the fused score matrix from tiles."""
    x = np.empty((fact_native.shape[0], post_native.shape[0]))
    for fi, pi, tile in iter_score_tiles(
        model, fact_native, fact_english, post_native, post_english, fact_block_size, post_block_size
    ):
        x[fi : fi + tile.shape[0], pi : pi + tile.shape[1]] = tile
    return x


def bundle_scores(
    model: ModelParams, bundle: DatasetBundle, post_ids: list[str] | None = None,
    fact_block_size: int = 4096, post_block_size: int = 4096,
) -> tuple[np.ndarray, list[str]]:
    """Blockwise fused scores for all facts against selected bundle posts."""
    if post_ids is None:
        post_ids = bundle.post_ids()
    index = bundle.post_native.row_index()
    rows = [index[p] for p in post_ids]
    x = blockwise_scores(
        model,
        bundle.fact_native.data,
        bundle.fact_english.data,
        bundle.post_native.data[rows],
        bundle.post_english.data[rows],
        fact_block_size,
        post_block_size,
    )
    return x, post_ids


# ---------------------------------------------------------------------------
# Parameter trees and checkpointing
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"TALM"
CHECKPOINT_VERSION = 1


def trainable_params(model: ModelParams) -> dict[str, np.ndarray]:
    """Flat name -> array view of every trainable tensor (shared, not copied)."""
    tree: dict[str, np.ndarray] = {}
    for name in BRANCH_NAMES:
        enc = model.branch(name)
        for f in ("W1", "b1", "bn_gamma", "bn_beta", "W2", "b2"):
            tree[f"{name}.{f}"] = getattr(enc, f)
    for name in CONCAT_NAMES:
        enc = getattr(model, name)
        for f in ("W1", "b1", "W2", "b2"):
            tree[f"{name}.{f}"] = getattr(enc, f)
    tree["fusion.lam"] = model.fusion.lam
    tree["fusion.s"] = model.fusion.s
    return tree


def state_tensors(model: ModelParams) -> dict[str, np.ndarray]:
    """Trainable tensors plus batch-norm running statistics."""
    tree = trainable_params(model)
    for name in BRANCH_NAMES:
        enc = model.branch(name)
        tree[f"{name}.bn_running_mean"] = enc.bn_running_mean
        tree[f"{name}.bn_running_var"] = enc.bn_running_var
    return tree


def set_param(model: ModelParams, name: str, value: np.ndarray) -> None:
    owner, fname = name.split(".")
    if owner == "fusion":
        setattr(model.fusion, fname, np.asarray(value, dtype=np.float64))
    else:
        setattr(getattr(model, owner), fname, np.asarray(value, dtype=np.float64))


def clone_model(model: ModelParams) -> ModelParams:
    import copy

    return copy.deepcopy(model)


def save_checkpoint(model: ModelParams, path) -> None:
    """Versioned binary checkpoint: dimension header then named f32 tensors."""
    path = Path(path)
    tensors = state_tensors(model)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<IIIIfB",
                CHECKPOINT_VERSION,
                model.post_native_enc.d_in,
                model.post_english_enc.d_in,
                model.hidden,
                model.post_native_enc.dropout_p,
                1 if model.concat_from_raw else 0,
            )
        )
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.atleast_2d(np.asarray(tensors[name], dtype=np.float64))
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<QQ", arr.shape[0], arr.shape[1]))
            fh.write(arr.astype("<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, d_native, d_english, hidden, dropout_p, concat_raw = struct.unpack_from("<IIIIfB", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise BadVersionError(f"{path}: unsupported checkpoint version {version}")
    offset = 4 + struct.calcsize("<IIIIfB")
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    model = init_model(d_native, d_english, hidden, dropout_p=float(dropout_p))
    model.concat_from_raw = bool(concat_raw)
    expected = state_tensors(model)
    seen = set()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + nlen].decode("utf-8")
        offset += nlen
        rows, cols = struct.unpack_from("<QQ", blob, offset)
        offset += 16
        arr = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=offset).reshape(rows, cols)
        offset += rows * cols * 4
        if name not in expected:
            raise BadFormatError(f"{path}: unknown tensor {name!r}")
        target = expected[name]
        if np.atleast_2d(target).shape != (rows, cols):
            raise CheckpointMismatchError(
                f"{path}: tensor {name!r} has shape {(rows, cols)}, model expects {np.atleast_2d(target).shape}"
            )
        value = arr.astype(np.float64).reshape(target.shape)
        set_param(model, name, value)
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise BadFormatError(f"{path}: missing tensors {sorted(missing)}")
    return model


def checkpoint_matches_bundle(model: ModelParams, bundle: DatasetBundle) -> bool:
    return (
        model.post_native_enc.d_in == bundle.post_native.dim
        and model.post_english_enc.d_in == bundle.post_english.dim
    )
