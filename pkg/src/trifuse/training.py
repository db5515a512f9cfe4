"""Contrastive training of the fused retrieval model.

The symmetric contrastive loss over the fused N x N score matrix:

    L = -(1 / 2N) * sum_i (log P_ii + log Q_ii)

with P the row-wise and Q the column-wise softmax of X (stabilized by max
subtraction). Gradients flow by hand through fusion, cosine normalization,
the concat encoders, and the branch encoders; the optimizer is AdamW with
decoupled weight decay and a per-epoch cosine-annealing schedule.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .errors import DivergenceError, ShapeMismatchError, TrifuseError, ZeroRowError
from .store import DatasetBundle


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def symmetric_contrastive_loss(X: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss and exact dL/dX for a square score matrix with diagonal positives."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise ShapeMismatchError(f"contrastive loss needs a square matrix, got {X.shape}")
    if not np.isfinite(X).all():
        raise DivergenceError("score matrix contains non-finite values")
    n = X.shape[0]
    row_shift = X - X.max(axis=1, keepdims=True)
    p = np.exp(row_shift)
    p /= p.sum(axis=1, keepdims=True)
    col_shift = X - X.max(axis=0, keepdims=True)
    q = np.exp(col_shift)
    q /= q.sum(axis=0, keepdims=True)
    log_p_diag = np.diagonal(row_shift) - np.log(np.exp(row_shift).sum(axis=1))
    log_q_diag = np.diagonal(col_shift) - np.log(np.exp(col_shift).sum(axis=0))
    loss = -(log_p_diag.sum() + log_q_diag.sum()) / (2.0 * n)
    eye = np.eye(n)
    grad = ((p - eye) + (q - eye)) / (2.0 * n)
    return float(loss), grad


def margin_loss(
    X: np.ndarray, negatives: list[list[int]], margin: float
) -> tuple[float, np.ndarray]:
    """Hinge loss over per-row negative column indices against the diagonal.

    loss = mean over (i, j in negatives[i]) of max(0, margin - X_ii + X_ij);
    subgradient 0 at the hinge corner.
    """
    X = np.asarray(X, dtype=np.float64)
    grad = np.zeros_like(X)
    total = 0.0
    count = 0
    for i, cols in enumerate(negatives):
        for j in cols:
            if j == i:
                raise TrifuseError(f"negative index {j} equals the positive index of row {i}")
            count += 1
            value = margin - X[i, i] + X[i, j]
            if value > 0.0:
                total += value
                grad[i, i] -= 1.0
                grad[i, j] += 1.0
    if count == 0:
        return 0.0, grad
    return total / count, grad / count


@dataclass
class LossBreakdown:
    contrastive: float
    margin: float
    total: float


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _branch_backward(params: M.BranchEncoderParams, cache: dict, dout: np.ndarray) -> dict:
    d = cache["d"]
    grads = {"W2": d.T @ dout, "b2": dout.sum(axis=0)}
    dd = dout @ params.W2.T
    dr = dd * cache["mask"]
    dy = dr * (cache["y"] > 0.0)
    xhat = cache["xhat"]
    grads["bn_gamma"] = (dy * xhat).sum(axis=0)
    grads["bn_beta"] = dy.sum(axis=0)
    dxhat = dy * params.bn_gamma
    inv_std = cache["inv_std"]
    if cache["mode"] == "train":
        m = xhat.shape[0]
        dz1 = (inv_std / m) * (
            m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )
    else:
        dz1 = dxhat * inv_std
    grads["W1"] = cache["x"].T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return grads


def _concat_backward(
    params: M.ConcatEncoderParams, cache: dict, dout: np.ndarray
) -> tuple[dict, np.ndarray, np.ndarray]:
    r = cache["r"]
    grads = {"W2": r.T @ dout, "b2": dout.sum(axis=0)}
    dr = dout @ params.W2.T
    dz1 = dr * (cache["z1"] > 0.0)
    grads["W1"] = cache["joined"].T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    djoined = dz1 @ params.W1.T
    h = djoined.shape[1] // 2
    return grads, djoined[:, :h], djoined[:, h:]


def _normalize_backward(cache: dict, dvhat: np.ndarray) -> np.ndarray:
    vhat = cache["vhat"]
    return (dvhat - vhat * (vhat * dvhat).sum(axis=1, keepdims=True)) / cache["norms"]


def forward_with_cache(
    model: M.ModelParams,
    fact_native: np.ndarray,
    fact_english: np.ndarray,
    post_native: np.ndarray,
    post_english: np.ndarray,
    mode: str = "train",
    dropout_seed: int = 0,
    step: int = 0,
    update_running: bool = False,
) -> tuple[np.ndarray, dict]:
    """Forward pass to the fused score matrix, keeping every activation."""
    embs, cache = M.forward_embeddings(
        model,
        fact_native,
        fact_english,
        post_native,
        post_english,
        mode=mode,
        dropout_seed=dropout_seed,
        step=step,
        update_running=update_running,
        with_cache=True,
    )
    triple = M.similarity_triple(embs["fact"], embs["post"])
    x = M.fuse_scores(triple, model.fusion)
    cache["embs"] = embs
    cache["triple"] = triple
    return x, cache


def backward(model: M.ModelParams, cache: dict, dX: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of every trainable tensor given dLoss/dX.

    Returns a flat name -> array tree matching ``trainable_params``.
    """
    if "triple" not in cache:
        raise TrifuseError("forward activations missing; run forward_with_cache first")
    triple = cache["triple"]
    embs = cache["embs"]
    fusion = model.fusion
    scales = fusion.scales()
    grads: dict[str, np.ndarray] = {}
    mats = {"concat": triple.A, "english": triple.B, "native": triple.C}
    grads["fusion.lam"] = np.array([
        float((dX * scales[i] * m).sum()) for i, m in enumerate(mats.values())
    ])
    grads["fusion.s"] = np.array([
        float(fusion.lam[i] * scales[i] * (dX * m).sum()) for i, m in enumerate(mats.values())
    ])

    # dvhat accumulators for the six normalized embeddings
    dvhat = {"fact": {}, "post": {}}
    for i, source in enumerate(("concat", "english", "native")):
        dmat = fusion.lam[i] * scales[i] * dX
        dvhat["fact"][source] = dmat @ embs["post"][source]
        dvhat["post"][source] = dmat.T @ embs["fact"][source]

    for side in ("fact", "post"):
        # concat head: normalize -> concat encoder -> raw branch outputs
        dconcat_raw = _normalize_backward(cache[f"norm_{side}_concat"], dvhat[side]["concat"])
        cname = f"{side}_concat_enc"
        cgrads, dcin_native, dcin_english = _concat_backward(
            getattr(model, cname), cache[cname], dconcat_raw
        )
        for fname, g in cgrads.items():
            grads[f"{cname}.{fname}"] = g
        draw = {"native": None, "english": None}
        for source, dcin in (("native", dcin_native), ("english", dcin_english)):
            if model.concat_from_raw:
                dvhat_total = dvhat[side][source]
                draw[source] = dcin.copy()
            else:
                dvhat_total = dvhat[side][source] + dcin
                draw[source] = np.zeros_like(dcin)
            draw[source] += _normalize_backward(cache[f"norm_{side}_{source}"], dvhat_total)
        for source in ("native", "english"):
            bname = f"{side}_{source}_enc"
            bgrads = _branch_backward(model.branch(bname), cache[bname], draw[source])
            for fname, g in bgrads.items():
                grads[f"{bname}.{fname}"] = g
    return grads


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    step_index: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One AdamW update in place. ``step_index`` starts at 1."""
    for name, theta in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step_index)
        v_hat = v / (1.0 - beta2 ** step_index)
        theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
        theta -= lr * weight_decay * theta


def cosine_anneal_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if not (0 <= step <= total_steps):
        raise TrifuseError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 10000
    learning_rate: float = 6e-4
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    max_epochs: int = 30
    early_stopping_patience: int = 5
    monitor: str = "recall@10"
    monitor_mode: str = "monolingual"
    seed: int = 0
    margin: float = 0.2
    margin_weight: float = 0.0

    def validate(self) -> None:
        if self.batch_size < 2:
            raise TrifuseError("batch_size must be >= 2")
        if self.early_stopping_patience < 1:
            raise TrifuseError("early_stopping_patience must be >= 1")
        if self.learning_rate <= 0:
            raise TrifuseError("learning_rate must be > 0")
        if self.max_epochs < 1:
            raise TrifuseError("max_epochs must be >= 1")


@dataclass
class TrainResult:
    best_model: M.ModelParams
    best_monitor: float
    best_epoch: int
    log: list[dict]


def _build_batches(
    bundle: DatasetBundle, train_posts: list[str], rng: np.random.Generator, batch_size: int
) -> list[tuple[list[int], list[int]]]:
    """Shuffled (post_rows, fact_rows) batches, one sampled fact per post.

    Posts whose sampled fact already appears earlier in the batch are dropped
    from that batch (in-batch duplicates would be false negatives).
    """
    by_post = bundle.pairs.by_post()
    post_index = bundle.post_native.row_index()
    fact_index = bundle.fact_native.row_index()
    order = rng.permutation(len(train_posts))
    batches = []
    for start in range(0, len(order), batch_size):
        post_rows, fact_rows = [], []
        seen_facts = set()
        for idx in order[start : start + batch_size]:
            pid = train_posts[idx]
            facts = sorted(by_post[pid].fact_ids)
            fid = facts[rng.integers(len(facts))]
            if fid in seen_facts:
                continue
            seen_facts.add(fid)
            post_rows.append(post_index[pid])
            fact_rows.append(fact_index[fid])
        if len(post_rows) >= 2:
            batches.append((post_rows, fact_rows))
    return batches


def _batch_negative_columns(
    bundle: DatasetBundle, post_rows: list[int], fact_rows: list[int], hard_negatives: dict | None
) -> list[list[int]]:
    """In-batch columns of each row's mined hard negatives (may be empty)."""
    if not hard_negatives:
        return [[] for _ in post_rows]
    post_ids = bundle.post_native.ids
    fact_pos = {row: col for col, row in enumerate(fact_rows)}
    fact_index = bundle.fact_native.row_index()
    cols = []
    for i, prow in enumerate(post_rows):
        pid = post_ids[prow]
        mined = hard_negatives.get(pid, [])
        batch_cols = []
        for fid, _score in mined:
            col = fact_pos.get(fact_index[fid])
            if col is not None and col != i:
                batch_cols.append(col)
        cols.append(batch_cols)
    return cols


def train(
    model: M.ModelParams,
    bundle: DatasetBundle,
    config: TrainConfig,
    hard_negatives: dict | None = None,
    log_path=None,
) -> TrainResult:
    """Full training loop with per-epoch dev monitoring and early stopping."""
    from .evaluation import evaluate, monitor_value

    config.validate()
    train_posts = bundle.split_post_ids("train")
    if not train_posts:
        raise TrifuseError("train split is empty")
    rng = np.random.default_rng(config.seed)
    params = M.trainable_params(model)
    state = AdamWState()
    opt_step = 0
    best_monitor = -math.inf
    best_epoch = -1
    best_model = M.clone_model(model)
    epochs_without_improvement = 0
    log: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.max_epochs):
            t0 = time.monotonic()
            lr = cosine_anneal_lr(epoch, config.max_epochs, config.learning_rate, config.lr_min)
            losses = []
            for post_rows, fact_rows in _build_batches(bundle, train_posts, rng, config.batch_size):
                try:
                    x, cache = forward_with_cache(
                        model,
                        bundle.fact_native.data[fact_rows],
                        bundle.fact_english.data[fact_rows],
                        bundle.post_native.data[post_rows],
                        bundle.post_english.data[post_rows],
                        mode="train",
                        dropout_seed=config.seed,
                        step=opt_step,
                        update_running=True,
                    )
                except ZeroRowError as exc:
                    raise DivergenceError(f"encoder produced a zero-norm row: {exc}") from exc
                # loss is row=fact, col=post; diagonal pairs by construction
                loss, dx = symmetric_contrastive_loss(x)
                if config.margin_weight > 0.0:
                    negatives = _batch_negative_columns(bundle, post_rows, fact_rows, hard_negatives)
                    # margin rows are posts: operate on X^T
                    mloss, mdx = margin_loss(x.T, negatives, config.margin)
                    loss = loss + config.margin_weight * mloss
                    dx = dx + config.margin_weight * mdx.T
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                grads = backward(model, cache, dx)
                opt_step += 1
                adamw_step(
                    params,
                    grads,
                    state,
                    lr,
                    opt_step,
                    config.beta1,
                    config.beta2,
                    config.adam_eps,
                    config.weight_decay,
                )
                losses.append(loss)
            _, report = evaluate(model, bundle, config.monitor_mode, k_max=20, split="dev")
            monitor = monitor_value(report, config.monitor, config.monitor_mode)
            entry = {
                "epoch": epoch,
                "mean_loss": float(np.mean(losses)) if losses else float("nan"),
                "lr": lr,
                "monitor_name": f"{config.monitor_mode}/{config.monitor}",
                "monitor_value": monitor,
                "seconds": time.monotonic() - t0,
            }
            log.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            if monitor > best_monitor:
                best_monitor = monitor
                best_epoch = epoch
                best_model = M.clone_model(model)
                epochs_without_improvement = 0
            else:
                epochs_without_improvement += 1
                if epochs_without_improvement >= config.early_stopping_patience:
                    break
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(best_model=best_model, best_monitor=best_monitor, best_epoch=best_epoch, log=log)
