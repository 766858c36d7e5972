"""Second-stage classifier over per-slice embeddings.

Pipeline per volume::

    embeddings (slices x in_dim)
      -> kernel-1 convolution          (proj_dim x slices)
      -> stack into 3 identical channels
      -> coarse dropout (training only)
      -> conv 3x3/2 (3->8) -> ReLU -> conv 3x3/2 (8->16) -> ReLU
      -> global average pool -> linear (16->1) -> sigmoid

Gradients are written out by hand; ``tests/test_net.py`` checks every
parameter against central finite differences.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .embed import resample_slices
from .errors import (
    EmptyDataset,
    LengthMismatch,
    NonFiniteActivation,
    ParseError,
    ShapeMismatch,
    UnlabeledVolume,
)
from .kernels import col2im, im2col

EPS_PROB = 1e-7
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CONV_CHANNELS = (8, 16)
CHECKPOINT_MAGIC = b"SSFLNET1"

PARAM_NAMES = ("proj_w", "proj_b", "conv_a_w", "conv_a_b", "conv_b_w", "conv_b_b", "fc_w", "fc_b")


@dataclass(frozen=True)
class NetConfig:
    variant: str = "E"
    in_dim: int = 224
    proj_dim: int = 100
    slices: int = 100
    lr: float = 1e-4
    weight_decay: float = 5e-4
    dropout_p: float = 0.2
    threshold: float = 0.5
    epochs: int = 80
    batch_size: int = 16
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in ("E", "S"):
            raise ValueError(f"variant must be 'E' or 'S', got {self.variant!r}")
        if self.variant == "E" and self.proj_dim != self.slices:
            raise ValueError("variant E needs proj_dim == slices for a square stack")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError("dropout_p must lie in [0, 1]")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if min(self.in_dim, self.proj_dim, self.slices, self.batch_size) < 1 or self.epochs < 0:
            raise ValueError("dimensions and batch_size must be >= 1, epochs >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")


@dataclass
class ModelState:
    config: NetConfig
    params: dict
    m: dict
    v: dict
    step: int = 0

    def copy(self) -> "ModelState":
        dup = lambda d: {k: a.copy() for k, a in d.items()}
        return ModelState(self.config, dup(self.params), dup(self.m), dup(self.v), self.step)


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    val: list = field(default_factory=list)

    def __len__(self):
        return len(self.loss)


# --------------------------------------------------------------------------
# initialisation

def param_shapes(config: NetConfig) -> dict:
    c1, c2 = CONV_CHANNELS
    proj_in = config.in_dim if config.variant == "E" else config.slices
    return {
        "proj_w": (config.proj_dim, proj_in),
        "proj_b": (config.proj_dim,),
        "conv_a_w": (c1, 3, 3, 3),
        "conv_a_b": (c1,),
        "conv_b_w": (c2, c1, 3, 3),
        "conv_b_b": (c2,),
        "fc_w": (c2,),
        "fc_b": (1,),
    }


def _fans(name, shape):
    if name == "proj_w":
        return shape[1], shape[0]
    if name.startswith("conv"):
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    return shape[0], 1


def init_state(config: NetConfig, rng: Optional[np.random.Generator] = None) -> ModelState:
    """Glorot-uniform weights, zero biases, zero Adam moments."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    dt = np.dtype(config.dtype)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("_w"):
            fan_in, fan_out = _fans(name, shape)
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-lim, lim, size=shape).astype(dt)
        else:
            params[name] = np.zeros(shape, dtype=dt)
    zeros = {k: np.zeros_like(a) for k, a in params.items()}
    return ModelState(config, params, zeros, {k: a.copy() for k, a in zeros.items()})


# --------------------------------------------------------------------------
# building blocks

def interp_matrix(n_in, n_out, dtype=np.float64):
    """(n_in, n_out) linear-interpolation matrix; columns sum to 1, ends aligned."""
    r = np.zeros((n_in, n_out), dtype=dtype)
    if n_in == 1 or n_out == 1:
        r[0, :] = 1.0
        return r
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    cols = np.arange(n_out)
    r[lo, cols] = 1.0 - frac
    r[lo + 1, cols] += frac
    return r


def conv1x1_forward(matrix, state: ModelState):
    """Kernel-1 convolution over an embedding matrix (or a batch of them).

    Variant E treats embedding positions as channels: ``out[c, s] = b[c] +
    sum_e W[c, e] * X[s, e]``. Variant S treats slices as channels and then
    linearly resamples the embedding axis to ``slices`` columns.
    """
    cfg = state.config
    x = np.asarray(matrix)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1:] != (cfg.slices, cfg.in_dim):
        raise ShapeMismatch(f"expected (..., {cfg.slices}, {cfg.in_dim}), got {x.shape}")
    w, b = state.params["proj_w"], state.params["proj_b"]
    if cfg.variant == "E":
        out = w @ x.transpose(0, 2, 1) + b[None, :, None]
    else:
        r = interp_matrix(cfg.in_dim, cfg.slices, w.dtype)
        out = (w @ x + b[None, :, None]) @ r
    return out[0] if single else out


def stack3(feature):
    """Repeat a (h, w) map, or a batch (B, h, w), into three identical channels."""
    feature = np.asarray(feature)
    axis = 0 if feature.ndim == 2 else 1
    return np.repeat(np.expand_dims(feature, axis), 3, axis=axis)


def _dropout_box(h, w, rng):
    area = h * w
    amin, amax = max(1, int(np.ceil(0.10 * area))), max(1, int(np.floor(0.25 * area)))
    for _ in range(100):
        bh = int(rng.integers(max(1, -(-amin // w)), min(h, amax) + 1))
        lo, hi = max(1, -(-amin // bh)), min(w, amax // bh)
        if lo <= hi:
            bw = int(rng.integers(lo, hi + 1))
            break
    else:
        bh = bw = 1
    r0 = int(rng.integers(0, h - bh + 1))
    c0 = int(rng.integers(0, w - bw + 1))
    return r0, bh, c0, bw


def dropout_mask(shape, p, rng):
    """Keep-mask for one (channels, h, w) tensor: all ones unless a draw < p fires."""
    mask = np.ones(shape)
    if p <= 0.0 or rng.random() >= p:
        return mask
    _, h, w = shape
    for ch in range(shape[0]):
        r0, bh, c0, bw = _dropout_box(h, w, rng)
        mask[ch, r0:r0 + bh, c0:c0 + bw] = 0.0
    return mask


def coarse_dropout(tensor, p, rng):
    """With probability ``p``, zero one rectangle (10-25% of the area) per channel."""
    tensor = np.asarray(tensor)
    return tensor * dropout_mask(tensor.shape, p, rng).astype(tensor.dtype)


def _conv_forward(x, w, b):
    bsz = x.shape[0]
    cols = im2col(x, 3, 2, 1)
    ho, wo = cols.shape[4:]
    flat = cols.reshape(bsz, -1, ho * wo)
    z = w.reshape(w.shape[0], -1) @ flat + b[None, :, None]
    return z.reshape(bsz, w.shape[0], ho, wo), flat


def _sigmoid(z):
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def _forward(tensor, state: ModelState):
    p = state.params
    za, cols_a = _conv_forward(tensor, p["conv_a_w"], p["conv_a_b"])
    a = np.maximum(za, 0)
    zb, cols_b = _conv_forward(a, p["conv_b_w"], p["conv_b_b"])
    bact = np.maximum(zb, 0)
    pooled = bact.mean(axis=(2, 3))
    logit = pooled @ p["fc_w"] + p["fc_b"][0]
    if not np.all(np.isfinite(logit)):
        raise NonFiniteActivation("classifier produced a non-finite logit")
    prob = _sigmoid(logit)
    cache = dict(tensor_shape=tensor.shape, cols_a=cols_a, za=za, a_shape=a.shape,
                 cols_b=cols_b, zb=zb, pooled=pooled)
    return prob, logit, cache


def classifier_logit(tensor, state: ModelState):
    tensor = np.asarray(tensor)
    single = tensor.ndim == 3
    _, logit, _ = _forward(tensor[None] if single else tensor, state)
    return logit[0] if single else logit


def classifier_forward(tensor, state: ModelState):
    """Probability in (0, 1) for a (3, h, w) tensor or a (B, 3, h, w) batch."""
    tensor = np.asarray(tensor)
    if not np.all(np.isfinite(tensor)):
        raise NonFiniteActivation("classifier input contains non-finite values")
    single = tensor.ndim == 3
    prob, _, _ = _forward(tensor[None] if single else tensor, state)
    return prob[0] if single else prob


def bce_loss(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise LengthMismatch(f"{probs.size} probabilities vs {labels.size} labels")
    if probs.size == 0:
        raise LengthMismatch("empty batch")
    p = np.clip(probs, EPS_PROB, 1.0 - EPS_PROB)
    return float(-np.mean(labels * np.log(p) + (1.0 - labels) * np.log1p(-p)))


# --------------------------------------------------------------------------
# batched forward / backward over embedding matrices

def forward_batch(batch, state: ModelState, masks=None):
    """Forward a (B, slices, in_dim) batch; returns (probs, cache)."""
    feat = conv1x1_forward(batch, state)
    tensor = stack3(feat)
    if masks is not None:
        tensor = tensor * masks
    prob, logit, cache = _forward(tensor, state)
    cache.update(x=np.asarray(batch), masks=masks)
    return prob, cache


def backward(probs, labels, cache, state: ModelState) -> dict:
    """Gradients of mean BCE with respect to every parameter.

    Uses d loss / d logit = (p - y) / B, the exact derivative away from the
    probability clamp.
    """
    p = state.params
    cfg = state.config
    y = np.asarray(labels, dtype=probs.dtype)
    bsz = probs.shape[0]
    dlogit = (probs - y) / bsz
    g = {}
    pooled = cache["pooled"]
    g["fc_w"] = pooled.T @ dlogit
    g["fc_b"] = np.array([dlogit.sum()], dtype=probs.dtype)

    zb = cache["zb"]
    hw_b = zb.shape[2] * zb.shape[3]
    dzb = (dlogit[:, None] * p["fc_w"][None, :])[:, :, None, None] / hw_b * (zb > 0)
    dzb_flat = dzb.reshape(bsz, zb.shape[1], -1)
    g["conv_b_w"] = np.einsum("bol,bkl->ok", dzb_flat, cache["cols_b"]).reshape(p["conv_b_w"].shape)
    g["conv_b_b"] = dzb_flat.sum(axis=(0, 2))
    dcols_b = p["conv_b_w"].reshape(zb.shape[1], -1).T @ dzb_flat
    a_shape = cache["a_shape"]
    da = col2im(dcols_b.reshape(bsz, a_shape[1], 3, 3, *zb.shape[2:]), a_shape, 3, 2, 1)

    za = cache["za"]
    dza_flat = (da * (za > 0)).reshape(bsz, za.shape[1], -1)
    g["conv_a_w"] = np.einsum("bol,bkl->ok", dza_flat, cache["cols_a"]).reshape(p["conv_a_w"].shape)
    g["conv_a_b"] = dza_flat.sum(axis=(0, 2))
    dcols_a = p["conv_a_w"].reshape(za.shape[1], -1).T @ dza_flat
    t_shape = cache["tensor_shape"]
    dt = col2im(dcols_a.reshape(bsz, 3, 3, 3, *za.shape[2:]), t_shape, 3, 2, 1)
    if cache["masks"] is not None:
        dt = dt * cache["masks"]
    dfeat = dt.sum(axis=1)
    cache["d_feature"] = dfeat

    x = cache["x"]
    if cfg.variant == "E":
        g["proj_w"] = np.einsum("bcs,bse->ce", dfeat, x)
        g["proj_b"] = dfeat.sum(axis=(0, 2))
    else:
        r = interp_matrix(cfg.in_dim, cfg.slices, dfeat.dtype)
        dpre = dfeat @ r.T
        g["proj_w"] = np.einsum("bce,bse->cs", dpre, x)
        g["proj_b"] = dpre.sum(axis=(0, 2))
    return {k: g[k].astype(p[k].dtype, copy=False) for k in PARAM_NAMES}


def batch_loss(batch, labels, state: ModelState, masks=None) -> float:
    probs, _ = forward_batch(batch, state, masks)
    return bce_loss(probs, labels)


def adam_step(state: ModelState, grads: dict, config: Optional[NetConfig] = None) -> ModelState:
    """One Adam update with L2 weight decay folded into the gradient."""
    cfg = state.config if config is None else config
    t = state.step + 1
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    params, ms, vs = {}, {}, {}
    for name, theta in state.params.items():
        grad = grads[name]
        if grad.shape != theta.shape:
            raise ShapeMismatch(f"{name}: gradient {grad.shape} vs parameter {theta.shape}")
        grad = grad + cfg.weight_decay * theta
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * grad * grad
        step = cfg.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        params[name] = (theta - step).astype(theta.dtype, copy=False)
        ms[name] = m.astype(theta.dtype, copy=False)
        vs[name] = v.astype(theta.dtype, copy=False)
    return ModelState(state.config, params, ms, vs, t)


# --------------------------------------------------------------------------
# training and inference

def _prepare(matrix, cfg: NetConfig):
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[1] != cfg.in_dim:
        raise ShapeMismatch(f"embedding matrix must be (n, {cfg.in_dim}), got {m.shape}")
    return resample_slices(m, cfg.slices).astype(cfg.dtype)


def train(dataset: Sequence, config: NetConfig = NetConfig(),
          validation: Optional[Sequence] = None,
          on_epoch: Optional[Callable[[int, float, Optional[dict]], None]] = None):
    """Fit the classifier on ``[(embedding_matrix, label), ...]``.

    Everything random (initialisation, shuffling, dropout) comes from one
    generator seeded with ``config.seed``.
    """
    from .metrics import confusion, report

    if not dataset:
        raise EmptyDataset("training set is empty")
    if any(lbl not in (0, 1) for _, lbl in dataset):
        raise UnlabeledVolume("every training volume needs a 0/1 label")
    rng = np.random.default_rng(config.seed)
    state = init_state(config, rng)
    history = TrainHistory()
    xs = np.stack([_prepare(m, config) for m, _ in dataset])
    ys = np.array([lbl for _, lbl in dataset], dtype=config.dtype)
    tshape = (3, config.proj_dim, config.slices)
    for epoch in range(config.epochs):
        order = rng.permutation(len(xs))
        total = 0.0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            masks = None
            if config.dropout_p > 0:
                masks = np.stack([dropout_mask(tshape, config.dropout_p, rng)
                                  for _ in idx]).astype(config.dtype)
            probs, cache = forward_batch(xs[idx], state, masks)
            total += bce_loss(probs, ys[idx]) * len(idx)
            state = adam_step(state, backward(probs, ys[idx], cache, state))
        history.loss.append(total / len(xs))
        val = None
        if validation:
            preds = [predict(state, m)[1] for m, _ in validation]
            val = report(confusion(preds, [lbl for _, lbl in validation])).as_dict()
        history.val.append(val)
        if on_epoch is not None:
            on_epoch(epoch, history.loss[-1], val)
    return state, history


def predict_proba(state: ModelState, matrix) -> float:
    x = _prepare(matrix, state.config)
    probs, _ = forward_batch(x[None], state)
    return float(probs[0])


def predict(state: ModelState, matrix, config: Optional[NetConfig] = None):
    """(probability, class) with class 1 iff probability >= threshold; no dropout."""
    cfg = state.config if config is None else config
    prob = predict_proba(state, matrix)
    return prob, int(prob >= cfg.threshold)


# --------------------------------------------------------------------------
# checkpoints: magic, u32 config length, config JSON, u32 step, u32 count,
# then per tensor: u16 name length, name, u32 ndim, u32 dims, float32 LE data

def _pack_tensor(name, arr):
    a = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<I", a.ndim)
    return head + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()


def checkpoint_bytes(state: ModelState) -> bytes:
    cfg = json.dumps(asdict(state.config), sort_keys=True).encode()
    tensors = [(f"param/{k}", state.params[k]) for k in PARAM_NAMES]
    tensors += [(f"adam_m/{k}", state.m[k]) for k in PARAM_NAMES]
    tensors += [(f"adam_v/{k}", state.v[k]) for k in PARAM_NAMES]
    out = [CHECKPOINT_MAGIC, struct.pack("<I", len(cfg)), cfg,
           struct.pack("<II", state.step, len(tensors))]
    out += [_pack_tensor(n, a) for n, a in tensors]
    return b"".join(out)


def save_checkpoint(state: ModelState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(state))


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        if blob[:8] != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: bad checkpoint magic")
        pos = 8
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        config = NetConfig(**json.loads(blob[pos:pos + n]))
        pos += n
        step, count = struct.unpack_from("<II", blob, pos)
        pos += 8
        groups = {"param": {}, "adam_m": {}, "adam_v": {}}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + ln].decode()
            pos += ln
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(blob):
                raise ParseError(f"{path}: truncated tensor {name}")
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            group, key = name.split("/", 1)
            groups[group][key] = arr.astype(config.dtype)
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{path}: malformed checkpoint ({exc})") from exc
    return ModelState(config, groups["param"], groups["adam_m"], groups["adam_v"], step)


def with_config(state: ModelState, **changes) -> ModelState:
    return replace(state, config=replace(state.config, **changes))
