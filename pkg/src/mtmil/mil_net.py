"""Attention-MIL network with per-task two-class heads, written against numpy.

Shapes used throughout (single bag):

    x     n x dim     tile features
    H     n x h       ReLU(x W_e^T + b_e)
    s     n           w^T tanh(V h_k)           (plain)
                      w^T (tanh(V h_k) * sigmoid(U h_k))   (gated)
    att   n           softmax(s)
    z     h           att^T H                   (bag embedding)
    probs T x 2       softmax(W_t z + b_t) per task

Batches are padded to the longest bag and carried with a boolean mask;
padded tiles receive zero attention and contribute nothing to gradients.
Everything is computed in float64.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegeneratePrevalence,
    FormatError,
    InvalidEpsilon,
    NoSupervision,
    NumericError,
    ShapeError,
)

PROB_CLAMP = 1e-7

CKPT_MAGIC = b"MILM"
CKPT_VERSION = 1
CKPT_HEADER = struct.Struct("<4sHIIIIH")
FLAG_GATED = 0x1

PARAM_ORDER = ("W_e", "b_e", "V", "w", "U", "W_heads", "b_heads")


@dataclass
class ModelParams:
    W_e: np.ndarray  # h x dim
    b_e: np.ndarray  # h
    V: np.ndarray  # a x h
    w: np.ndarray  # a
    W_heads: np.ndarray  # T x 2 x h
    b_heads: np.ndarray  # T x 2
    U: Optional[np.ndarray] = None  # a x h, gated attention only

    @property
    def dim(self) -> int:
        return self.W_e.shape[1]

    @property
    def h(self) -> int:
        return self.W_e.shape[0]

    @property
    def a(self) -> int:
        return self.V.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.W_heads.shape[0]

    @property
    def gated(self) -> bool:
        return self.U is not None

    def named_arrays(self):
        """(name, array) pairs in the fixed checkpoint order, skipping an absent gate."""
        for name in PARAM_ORDER:
            arr = getattr(self, name)
            if arr is not None:
                yield name, arr

    def map(self, fn) -> "ModelParams":
        return ModelParams(**{name: fn(arr) for name, arr in self.named_arrays()})

    def zip_map(self, other: "ModelParams", fn) -> "ModelParams":
        return ModelParams(**{name: fn(arr, getattr(other, name)) for name, arr in self.named_arrays()})

    def copy(self) -> "ModelParams":
        return self.map(np.array)

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def flat(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self.named_arrays()])

    def validate(self):
        h, dim = self.W_e.shape
        a = self.V.shape[0]
        T = self.W_heads.shape[0]
        expected = {
            "W_e": (h, dim),
            "b_e": (h,),
            "V": (a, h),
            "w": (a,),
            "U": (a, h),
            "W_heads": (T, 2, h),
            "b_heads": (T, 2),
        }
        if T < 1:
            raise ShapeError("model needs at least one task head")
        for name, arr in self.named_arrays():
            if arr.shape != expected[name]:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"{name} has non-finite entries")

    def equals(self, other: "ModelParams") -> bool:
        if self.gated != other.gated:
            return False
        return all(
            a.shape == getattr(other, n).shape and np.array_equal(a, getattr(other, n))
            for n, a in self.named_arrays()
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 16
    train_bag_size: int = 100
    infer_bag_size: int = 1000
    max_epochs: int = 30
    patience: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    gated_attention: bool = False
    hidden: int = 128
    attention_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.batch_size < 1 or self.train_bag_size < 1 or self.infer_bag_size < 1:
            raise ConfigError("batch_size, train_bag_size and infer_bag_size must be >= 1")
        if self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("max_epochs >= 1 and patience >= 0 required")
        if self.hidden < 1 or self.attention_dim < 1:
            raise ConfigError("hidden and attention_dim must be >= 1")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(dim: int, h: int, a: int, T: int, seed: int, gated: bool = False) -> ModelParams:
    if min(dim, h, a, T) < 1:
        raise ShapeError("all dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    W_e = _glorot(rng, (h, dim), dim, h)
    V = _glorot(rng, (a, h), h, a)
    w = _glorot(rng, (a,), a, 1)
    W_heads = np.stack([_glorot(rng, (2, h), h, 2) for _ in range(T)])
    U = _glorot(rng, (a, h), h, a) if gated else None
    return ModelParams(W_e, np.zeros(h), V, w, W_heads, np.zeros((T, 2)), U)


def pad_bags(bags: Sequence[np.ndarray], dim: int):
    """Stack ragged ``n_i x dim`` arrays into ``B x N x dim`` plus a tile mask."""
    if not bags:
        raise ShapeError("empty batch")
    n_max = max(b.shape[0] for b in bags)
    X = np.zeros((len(bags), n_max, dim))
    mask = np.zeros((len(bags), n_max), dtype=bool)
    for i, b in enumerate(bags):
        if b.ndim != 2 or b.shape[1] != dim:
            raise ShapeError(f"bag {i} has shape {b.shape}, model expects (n, {dim})")
        if b.shape[0] < 1:
            raise ShapeError(f"bag {i} has no tiles")
        X[i, : b.shape[0]] = b
        mask[i, : b.shape[0]] = True
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite tile features")
    return X, mask


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _forward_batch(p: ModelParams, X: np.ndarray, mask: np.ndarray) -> dict:
    B, N, dim = X.shape
    pre = (X.reshape(-1, dim) @ p.W_e.T).reshape(B, N, p.h) + p.b_e
    H = np.maximum(pre, 0.0)
    H2 = H.reshape(-1, p.h)
    A = np.tanh(H2 @ p.V.T).reshape(B, N, p.a)
    if p.gated:
        G = _sigmoid(H2 @ p.U.T).reshape(B, N, p.a)
        M = A * G
    else:
        G = None
        M = A
    s = M @ p.w
    s = np.where(mask, s, -np.inf)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    att = e / e.sum(axis=1, keepdims=True)
    z = np.einsum("bn,bnh->bh", att, H)
    logits = np.einsum("bh,tch->btc", z, p.W_heads) + p.b_heads
    logits = logits - logits.max(axis=2, keepdims=True)
    el = np.exp(logits)
    probs = el / el.sum(axis=2, keepdims=True)
    return {"X": X, "mask": mask, "pre": pre, "H": H, "A": A, "G": G, "M": M, "att": att, "z": z, "probs": probs}


@dataclass
class ForwardResult:
    probs: np.ndarray  # T x 2
    attention: np.ndarray  # n
    embedding: np.ndarray  # h


def forward(params: ModelParams, tile_features: np.ndarray) -> ForwardResult:
    x = np.asarray(tile_features)
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise ShapeError(f"tile features of shape {x.shape} do not match model dim {params.dim}")
    if x.shape[0] < 1:
        raise ShapeError("bag has no tiles")
    X, mask = pad_bags([x.astype(np.float64, copy=False)], params.dim)
    c = _forward_batch(params, X, mask)
    return ForwardResult(c["probs"][0], c["att"][0], c["z"][0])


def forward_many(params: ModelParams, bags: Sequence[np.ndarray]) -> list:
    """Forward a list of bags in one padded batch."""
    X, mask = pad_bags([np.asarray(b, dtype=np.float64) for b in bags], params.dim)
    c = _forward_batch(params, X, mask)
    lengths = mask.sum(axis=1)
    return [ForwardResult(c["probs"][i], c["att"][i, : lengths[i]], c["z"][i]) for i in range(len(bags))]


def weights_from_prevalence(prevalence: float) -> tuple:
    """Class weights (w_neg, w_pos) that reverse the prevalence."""
    if not 0 < prevalence < 1:
        raise DegeneratePrevalence(f"prevalence {prevalence} gives degenerate class weights")
    return (prevalence, 1.0 - prevalence)


def _check_weights(class_weights, T: int) -> np.ndarray:
    cw = np.asarray(class_weights, dtype=np.float64)
    if cw.shape != (T, 2):
        raise ShapeError(f"class weights of shape {cw.shape}, expected ({T}, 2)")
    if np.any(cw < 0):
        raise ValueError("class weights must be nonnegative")
    return cw


def _loss_terms(probs: np.ndarray, labels: np.ndarray, cw: np.ndarray):
    """Per-bag losses and the d(loss)/d(logits) factors.

    ``probs`` is B x T x 2, ``labels`` B x T with NaN for NA.
    """
    valid = ~np.isnan(labels)
    n_valid = valid.sum(axis=1)
    if np.any(n_valid == 0):
        raise NoSupervision("a bag has no non-NA labels")
    y = np.where(valid, labels, 0).astype(np.int64)
    p_y = np.take_along_axis(probs, y[..., None], axis=2)[..., 0]
    clipped = np.clip(p_y, PROB_CLAMP, 1 - PROB_CLAMP)
    w = np.take_along_axis(np.broadcast_to(cw, probs.shape), y[..., None], axis=2)[..., 0]
    w = np.where(valid, w, 0.0)
    per_task = w * -np.log(clipped)
    per_bag = per_task.sum(axis=1) / n_valid
    # d(-log p_y)/d(logits) = p - onehot(y), zero where the clamp is active
    live = (p_y > PROB_CLAMP) & (p_y < 1 - PROB_CLAMP)
    scale = np.where(live, w, 0.0) / n_valid[:, None]
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, y[..., None], 1.0, axis=2)
    dlogits = scale[..., None] * (probs - onehot)
    return per_bag, dlogits


def multitask_loss(task_probs: np.ndarray, labels, class_weights) -> float:
    """Mean over non-NA tasks of the class-weighted cross-entropy for one bag."""
    probs = np.asarray(task_probs, dtype=np.float64)
    T = probs.shape[0]
    lab = np.array([np.nan if v is None else v for v in labels], dtype=np.float64)
    if lab.shape != (T,):
        raise ShapeError(f"{lab.shape[0]} labels for {T} tasks")
    cw = _check_weights(class_weights, T)
    per_bag, _ = _loss_terms(probs[None], lab[None], cw)
    return float(per_bag[0])


def _labels_array(labels, T: int) -> np.ndarray:
    lab = np.array([np.nan if v is None else v for v in labels], dtype=np.float64)
    if lab.shape != (T,):
        raise ShapeError(f"{lab.shape[0]} labels for {T} tasks")
    return lab


def loss_and_grad(params: ModelParams, batch, class_weights) -> tuple:
    """Mean batch loss and its exact gradient.

    ``batch`` is a sequence of ``(tile_features, labels)`` pairs.
    """
    if len(batch) == 0:
        raise ShapeError("empty batch")
    p = params
    cw = _check_weights(class_weights, p.n_tasks)
    X, mask = pad_bags([np.asarray(x, dtype=np.float64) for x, _ in batch], p.dim)
    labels = np.stack([_labels_array(y, p.n_tasks) for _, y in batch])
    c = _forward_batch(p, X, mask)
    B = X.shape[0]
    per_bag, dlogits = _loss_terms(c["probs"], labels, cw)
    dlogits /= B
    loss = float(per_bag.mean())

    H, att, z, A, G, M = c["H"], c["att"], c["z"], c["A"], c["G"], c["M"]
    g = {}
    g["W_heads"] = np.einsum("btc,bh->tch", dlogits, z)
    g["b_heads"] = dlogits.sum(axis=0)
    dz = np.einsum("btc,tch->bh", dlogits, p.W_heads)

    datt = np.einsum("bnh,bh->bn", H, dz)
    dH = att[..., None] * dz[:, None, :]
    ds = att * (datt - np.sum(att * datt, axis=1, keepdims=True))

    g["w"] = np.einsum("bna,bn->a", M, ds)
    dM = ds[..., None] * p.w
    H2 = H.reshape(-1, p.h)
    if p.gated:
        dpreA = (dM * G * (1.0 - A * A)).reshape(-1, p.a)
        dpreG = (dM * A * G * (1.0 - G)).reshape(-1, p.a)
        g["V"] = dpreA.T @ H2
        g["U"] = dpreG.T @ H2
        dH += (dpreA @ p.V + dpreG @ p.U).reshape(dH.shape)
    else:
        dpreA = (dM * (1.0 - A * A)).reshape(-1, p.a)
        g["V"] = dpreA.T @ H2
        dH += (dpreA @ p.V).reshape(dH.shape)

    dpre = np.where(c["pre"] > 0, dH, 0.0).reshape(-1, p.h)
    g["W_e"] = dpre.T @ X.reshape(-1, p.dim)
    g["b_e"] = dpre.sum(axis=0)
    grads = ModelParams(**g)
    for name, arr in grads.named_arrays():
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite gradient in {name}")
    return loss, grads


def backward(params: ModelParams, batch, class_weights) -> ModelParams:
    return loss_and_grad(params, batch, class_weights)[1]


def batch_loss(params: ModelParams, batch, class_weights) -> float:
    cw = _check_weights(class_weights, params.n_tasks)
    X, mask = pad_bags([np.asarray(x, dtype=np.float64) for x, _ in batch], params.dim)
    labels = np.stack([_labels_array(y, params.n_tasks) for _, y in batch])
    c = _forward_batch(params, X, mask)
    per_bag, _ = _loss_terms(c["probs"], labels, cw)
    return float(per_bag.mean())


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, config: TrainConfig) -> tuple:
    """One AdamW update: decoupled decay, then the bias-corrected Adam step."""
    lr, wd = config.learning_rate, config.weight_decay
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    step = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, theta in params.named_arrays():
        g = getattr(grads, name)
        if g.shape != theta.shape:
            raise ShapeError(f"gradient {name} has shape {g.shape}, parameter {theta.shape}")
        m = b1 * getattr(state.m, name) + (1 - b1) * g
        v = b2 * getattr(state.v, name) + (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        decayed = theta - lr * wd * theta
        new_p[name] = decayed - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return ModelParams(**new_p), AdamState(ModelParams(**new_m), ModelParams(**new_v), step)


def grad_check(params: ModelParams, batch, class_weights, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients."""
    if not eps > 0:
        raise InvalidEpsilon(f"finite-difference step must be positive, got {eps}")
    _, grads = loss_and_grad(params, batch, class_weights)
    worst = 0.0
    for name, arr in params.named_arrays():
        analytic = getattr(grads, name)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            up = batch_loss(params, batch, class_weights)
            arr[idx] = orig - eps
            down = batch_loss(params, batch, class_weights)
            arr[idx] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def quantize(params: ModelParams) -> ModelParams:
    """Round parameters through float32, the checkpoint precision."""
    return params.map(lambda a: a.astype(np.float32).astype(np.float64))


def checkpoint_bytes(params: ModelParams) -> bytes:
    params.validate()
    head = CKPT_HEADER.pack(
        CKPT_MAGIC, CKPT_VERSION, params.dim, params.h, params.a, params.n_tasks, FLAG_GATED if params.gated else 0
    )
    body = b"".join(np.ascontiguousarray(arr, dtype="<f4").tobytes() for _, arr in params.named_arrays())
    blob = head + body
    return blob + struct.pack("<I", zlib.crc32(blob))


def params_from_checkpoint(blob: bytes) -> ModelParams:
    if len(blob) < CKPT_HEADER.size + 4:
        raise FormatError("checkpoint truncated")
    magic, version, dim, h, a, T, flags = CKPT_HEADER.unpack_from(blob, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if flags & ~FLAG_GATED:
        raise FormatError(f"unknown checkpoint flags {flags:#x}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError("checkpoint CRC mismatch")
    gated = bool(flags & FLAG_GATED)
    shapes = {
        "W_e": (h, dim),
        "b_e": (h,),
        "V": (a, h),
        "w": (a,),
        "U": (a, h),
        "W_heads": (T, 2, h),
        "b_heads": (T, 2),
    }
    names = [n for n in PARAM_ORDER if gated or n != "U"]
    total = sum(int(np.prod(shapes[n])) for n in names)
    if len(blob) != CKPT_HEADER.size + 4 * total + 4:
        raise FormatError("checkpoint payload length does not match its dimensions")
    off = CKPT_HEADER.size
    arrays = {}
    for n in names:
        count = int(np.prod(shapes[n]))
        arrays[n] = np.frombuffer(blob, dtype="<f4", count=count, offset=off).astype(np.float64).reshape(shapes[n])
        off += 4 * count
    params = ModelParams(**arrays)
    params.validate()
    return params
