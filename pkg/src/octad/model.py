"""Small numpy CNN with hand-written backward pass, AdamW and SWA.

Architecture: four 3x3/stride-2 conv blocks with ReLU (3->8->16->32->64),
global average pool, then the head
``Linear(64, 64) -> LayerNorm -> ReLU -> Dropout(0.4) -> Linear(64, 2)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .store import OctadError, RunConfig, Rng, ValidationError, read_tensor, write_tensor

CHANNELS = (3, 8, 16, 32, 64)
HIDDEN = 64
N_CLASSES = 2
DROPOUT_P = 0.4
LN_EPS = 1e-5

ParamSet = dict  # name -> ndarray


class NonFiniteError(OctadError):
    pass


# --------------------------------------------------------------------------
# parameters


def init_params(
    rng: Rng, channels: Sequence[int] = CHANNELS, dtype=np.float32
) -> ParamSet:
    """Kaiming fan-in normal weights, zero biases, unit layer-norm scale."""
    g = rng.gen
    p: ParamSet = {}
    for i, (ci, co) in enumerate(zip(channels[:-1], channels[1:]), start=1):
        p[f"conv{i}.w"] = g.normal(0.0, np.sqrt(2.0 / (ci * 9)), size=(co, ci, 3, 3))
        p[f"conv{i}.b"] = np.zeros(co)
    feat = channels[-1]
    p["fc1.w"] = g.normal(0.0, np.sqrt(2.0 / feat), size=(HIDDEN, feat))
    p["fc1.b"] = np.zeros(HIDDEN)
    p["ln.g"] = np.ones(HIDDEN)
    p["ln.b"] = np.zeros(HIDDEN)
    p["fc2.w"] = g.normal(0.0, np.sqrt(2.0 / HIDDEN), size=(N_CLASSES, HIDDEN))
    p["fc2.b"] = np.zeros(N_CLASSES)
    return {k: v.astype(dtype) for k, v in p.items()}


def n_conv_blocks(p: ParamSet) -> int:
    return sum(1 for k in p if k.startswith("conv") and k.endswith(".w"))


def save_params(out_dir, p: ParamSet) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(p):
        fname = name.replace(".", "_") + ".oct"
        write_tensor(out_dir / fname, np.asarray(p[name], dtype=np.float32))
        lines.append(f"{name} {fname} {'x'.join(str(d) for d in p[name].shape)}")
    (out_dir / "index.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_params(in_dir) -> ParamSet:
    in_dir = Path(in_dir)
    p = {}
    for line in (in_dir / "index.txt").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, fname, shape = line.split()
        arr = read_tensor(in_dir / fname)
        if "x".join(str(d) for d in arr.shape) != shape:
            raise ValidationError(f"{fname}: shape {arr.shape} does not match index {shape}")
        p[name] = arr
    return p


# --------------------------------------------------------------------------
# layers


def conv_forward(x, w, b):
    """3x3 convolution, stride 2, zero padding 1."""
    n, c, h, wd = x.shape
    ho, wo = (h - 1) // 2 + 1, (wd - 1) // 2 + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, ho, wo), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i:i + 2 * ho:2, j:j + 2 * wo:2]
    cols = cols.reshape(n, c * 9, ho * wo)
    co = w.shape[0]
    out = np.matmul(w.reshape(co, -1), cols) + b[None, :, None]
    return out.reshape(n, co, ho, wo), (x.shape, cols)


def conv_backward(dout, w, cache):
    (n, c, h, wd), cols = cache
    co, _, _, _ = w.shape
    ho, wo = dout.shape[2:]
    d2 = dout.reshape(n, co, ho * wo)
    dw = np.tensordot(d2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = d2.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(co, -1).T, d2).reshape(n, c, 3, 3, ho, wo)
    dxp = np.zeros((n, c, h + 2, wd + 2), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + 2 * ho:2, j:j + 2 * wo:2] += dcols[:, :, i, j]
    return dxp[:, :, 1:-1, 1:-1], dw, db


def layernorm_forward(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def layernorm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    d = xhat.shape[1]
    dx = inv / d * (d * dxhat - dxhat.sum(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
    return dx, dg, db


# --------------------------------------------------------------------------
# network


@dataclass
class ForwardCache:
    convs: list = field(default_factory=list)
    relu_masks: list = field(default_factory=list)
    feat_shape: tuple = ()
    pooled: np.ndarray | None = None
    ln: tuple | None = None
    h_pre_relu: np.ndarray | None = None
    drop_mask: np.ndarray | None = None
    h_drop: np.ndarray | None = None
    features: np.ndarray | None = None


def backbone_forward(p: ParamSet, x: np.ndarray, cache: ForwardCache | None = None):
    """Conv blocks; returns the final feature map ``A`` (N, K, h, w)."""
    a = x
    for i in range(1, n_conv_blocks(p) + 1):
        z, cc = conv_forward(a, p[f"conv{i}.w"], p[f"conv{i}.b"])
        mask = z > 0
        a = z * mask
        if cache is not None:
            cache.convs.append(cc)
            cache.relu_masks.append(mask)
    if cache is not None:
        cache.features = a
        cache.feat_shape = a.shape
    return a


def head_forward(
    p: ParamSet,
    features: np.ndarray,
    train_mode: bool = False,
    rng: Rng | None = None,
    cache: ForwardCache | None = None,
) -> np.ndarray:
    pooled = features.mean(axis=(2, 3))
    h1 = pooled @ p["fc1.w"].T + p["fc1.b"]
    h2, ln_cache = layernorm_forward(h1, p["ln.g"], p["ln.b"])
    h3 = np.maximum(h2, 0)
    if train_mode:
        if rng is None:
            raise ValidationError("train_mode forward needs an Rng for dropout")
        keep = rng.gen.random(h3.shape) >= DROPOUT_P
        drop = (keep / (1.0 - DROPOUT_P)).astype(h3.dtype)
    else:
        drop = None
    h4 = h3 * drop if drop is not None else h3
    logits = h4 @ p["fc2.w"].T + p["fc2.b"]
    if cache is not None:
        cache.pooled = pooled
        cache.ln = ln_cache
        cache.h_pre_relu = h2
        cache.drop_mask = drop
        cache.h_drop = h4
    return logits


def forward(
    p: ParamSet,
    x: np.ndarray,
    train_mode: bool = False,
    rng: Rng | None = None,
    return_cache: bool = False,
):
    """Logits for a batch (N, 3, H, W) or a single (3, H, W) input."""
    single = x.ndim == 3
    if single:
        x = x[None]
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite input to forward")
    x = x.astype(p["fc1.w"].dtype, copy=False)
    cache = ForwardCache() if return_cache else None
    feats = backbone_forward(p, x, cache)
    logits = head_forward(p, feats, train_mode, rng, cache)
    if single:
        logits = logits[0]
    return (logits, cache) if return_cache else logits


def head_backward(p: ParamSet, cache: ForwardCache, dlogits: np.ndarray, grads: dict):
    """Accumulate head gradients into ``grads``; return dL/dfeatures."""
    grads["fc2.w"] = dlogits.T @ cache.h_drop
    grads["fc2.b"] = dlogits.sum(axis=0)
    dh4 = dlogits @ p["fc2.w"]
    dh3 = dh4 * cache.drop_mask if cache.drop_mask is not None else dh4
    dh2 = dh3 * (cache.h_pre_relu > 0)
    dh1, grads["ln.g"], grads["ln.b"] = layernorm_backward(dh2, p["ln.g"], cache.ln)
    grads["fc1.w"] = dh1.T @ cache.pooled
    grads["fc1.b"] = dh1.sum(axis=0)
    dpooled = dh1 @ p["fc1.w"]
    n, k, h, w = cache.feat_shape
    return np.broadcast_to((dpooled / (h * w))[:, :, None, None], (n, k, h, w))


def backward(p: ParamSet, cache: ForwardCache, dlogits: np.ndarray) -> dict:
    grads: dict = {}
    da = head_backward(p, cache, dlogits, grads)
    for i in range(n_conv_blocks(p), 0, -1):
        dz = da * cache.relu_masks[i - 1]
        da, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv_backward(
            dz, p[f"conv{i}.w"], cache.convs[i - 1]
        )
    return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# loss


def year_weight(years: float | None, year_cap: float = 4.0) -> float:
    """1 for controls; AD weight decays linearly from 2 at diagnosis to 1 at the cap."""
    if years is None:
        return 1.0
    if years < 0:
        raise ValidationError(f"years_to_diagnosis must be >= 0, got {years}")
    return 1.0 + (year_cap - min(years, year_cap)) / year_cap


def weighted_ce_loss(logits, labels, weights, normalize: bool = True):
    """Weighted cross-entropy and its gradient w.r.t. the logits.

    With ``normalize`` the sum is divided by the total weight.
    """
    logits = np.asarray(logits, dtype=np.float64) if not isinstance(logits, np.ndarray) else logits
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=logits.dtype)
    if logits.shape[0] == 0:
        raise ValidationError("empty batch")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    ce = lse - z[np.arange(len(labels)), labels]
    denom = weights.sum() if normalize else 1.0
    loss = float((weights * ce).sum() / denom)
    d = softmax(logits)
    d[np.arange(len(labels)), labels] -= 1.0
    dlogits = d * (weights / denom)[:, None]
    return loss, dlogits.astype(logits.dtype)


def loss_and_grads(p, x, labels, weights, train_mode=False, rng=None, normalize=True):
    logits, cache = forward(p, x, train_mode, rng, return_cache=True)
    loss, dlogits = weighted_ce_loss(logits, labels, weights, normalize)
    return loss, backward(p, cache, dlogits)


# --------------------------------------------------------------------------
# optimisation


@dataclass
class TrainState:
    params: ParamSet
    m: dict
    v: dict
    step: int = 0
    epoch: int = 0
    swa_mean: dict | None = None
    swa_count: int = 0


def new_state(params: ParamSet) -> TrainState:
    return TrainState(
        params={k: v.copy() for k, v in params.items()},
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def adamw_step(
    state: TrainState,
    grads: dict,
    lr: float,
    wd: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> TrainState:
    """In-place AdamW update with decoupled weight decay; returns ``state``."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, p in state.params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} != param shape {p.shape} for {k}")
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / c1
        vhat = v / c2
        p -= (lr * wd) * p + lr * mhat / (np.sqrt(vhat) + eps)
    return state


def swa_update(state: TrainState) -> TrainState:
    state.swa_count += 1
    if state.swa_mean is None:
        state.swa_mean = {k: v.copy() for k, v in state.params.items()}
    else:
        n = state.swa_count
        for k, v in state.params.items():
            state.swa_mean[k] += (v - state.swa_mean[k]) / n
    return state


def swa_finalize(state: TrainState) -> ParamSet:
    if state.swa_mean is None or state.swa_count == 0:
        raise OctadError("swa_finalize called before any swa_update")
    return {k: v.copy() for k, v in state.swa_mean.items()}


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class Sample:
    data: np.ndarray  # (3, S, S) composite channels
    label: int  # AD=1, CN=0
    years: float | None = None
    contours: np.ndarray | None = None
    key: tuple = ()


def train(
    config: RunConfig,
    samples: Sequence[Sample],
    rng: Rng,
    augment_fn: Callable | None = None,
    channels: Sequence[int] = CHANNELS,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> ParamSet:
    """Full training loop; returns the SWA-averaged parameters.

    ``augment_fn(data, rng) -> data`` is applied to every training sample
    when ``config.augmentation_enabled``; by default the package's OCT
    augmentation is used.
    """
    labels = {s.label for s in samples}
    if labels != {0, 1}:
        raise ValidationError("training needs at least one sample per class")
    if augment_fn is None and config.augmentation_enabled:
        from .augment import augment_array

        augment_fn = lambda data, r: augment_array(data, r, config.augment)  # noqa: E731

    state = new_state(init_params(rng.child(0), channels))
    n = len(samples)
    xs = np.stack([s.data for s in samples]).astype(np.float32)
    ys = np.array([s.label for s in samples])
    ws = np.array([year_weight(s.years, config.year_cap) for s in samples], dtype=np.float32)
    for epoch in range(1, config.epochs + 1):
        order = rng.child(1, epoch).shuffle(range(n))
        aug_rng = rng.child(2, epoch)
        drop_rng = rng.child(3, epoch)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = xs[idx]
            if config.augmentation_enabled:
                xb = np.stack([augment_fn(x, aug_rng) for x in xb])
            _, grads = loss_and_grads(state.params, xb, ys[idx], ws[idx], True, drop_rng)
            adamw_step(state, grads, config.learning_rate, config.weight_decay)
        state.epoch = epoch
        if epoch >= config.swa_start_epoch:
            swa_update(state)
        if on_epoch is not None:
            on_epoch(state)
    return swa_finalize(state)


def predict_proba(p: ParamSet, xs: np.ndarray, batch: int = 32) -> np.ndarray:
    """Evaluation-mode probability of class 1 (AD) for each input."""
    out = []
    for i in range(0, len(xs), batch):
        out.append(softmax(forward(p, xs[i:i + batch], train_mode=False).astype(np.float64))[:, 1])
    return np.concatenate(out) if out else np.zeros(0)
