"""Dense embedding backbone with an additive-angular-margin softmax head.

Everything is fp64 numpy with hand-written backward passes.  Parameter
records are treated as immutable values: every update returns new arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "BackboneParams",
    "HeadParams",
    "ModelParams",
    "BatchSampler",
    "init_backbone",
    "new_head",
    "head_from_centroids",
    "new_model",
    "forward_embed",
    "embed",
    "margin_loss_and_grads",
    "sgd_step",
    "prox_gradient",
    "local_objective",
    "dcl_penalty",
    "backbone_distance",
    "train_steps",
    "save_checkpoint",
    "load_checkpoint",
]

ACTIVATIONS = ("tanh",)
COS_CLAMP = 1e-7
_NORM_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class BackboneParams:
    """Dense layers ``h <- act(h @ W.T + b)``; the last layer is linear.

    ``layers`` holds ``(W, b)`` with ``W`` of shape ``(out, in)``.
    """

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.layers:
            raise ValueError("backbone needs at least one layer")
        layers = []
        prev = None
        for k, (w, b) in enumerate(self.layers):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if prev is not None and w.shape[1] != prev:
                raise ValueError(f"layer {k}: expects input {w.shape[1]}, previous layer gives {prev}")
            prev = w.shape[0]
            layers.append((w, b))
        object.__setattr__(self, "layers", tuple(layers))

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w, _ in self.layers]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in self.layers:
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray], activation: str = "tanh") -> "BackboneParams":
        return cls(tuple((arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)), activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.arrays())

    def same_shape(self, other: "BackboneParams") -> bool:
        return [a.shape for a in self.arrays()] == [a.shape for a in other.arrays()]

    def equals(self, other: "BackboneParams") -> bool:
        """Bitwise equality of every parameter entry."""
        return self.same_shape(other) and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass(frozen=True, eq=False)
class HeadParams:
    """Per-class weight rows plus ArcFace-style margin ``margin`` and scale ``scale``."""

    class_weights: np.ndarray
    margin: float = 0.5
    scale: float = 16.0

    def __post_init__(self):
        w = np.asarray(self.class_weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1:
            raise ValueError(f"class_weights must be (num_classes >= 1, embed_dim), got {w.shape}")
        if not 0.0 <= self.margin < np.pi / 2:
            raise ValueError(f"margin must be in [0, pi/2), got {self.margin}")
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        object.__setattr__(self, "class_weights", w)

    @property
    def num_classes(self) -> int:
        return self.class_weights.shape[0]


@dataclass(frozen=True, eq=False)
class ModelParams:
    backbone: BackboneParams
    head: HeadParams

    def __post_init__(self):
        if self.head.class_weights.shape[1] != self.backbone.embed_dim:
            raise ValueError(
                f"head width {self.head.class_weights.shape[1]} != embed_dim {self.backbone.embed_dim}"
            )


def init_backbone(dims: Sequence[int], seed: int, activation: str = "tanh") -> BackboneParams:
    """Gaussian weights with std ``1/sqrt(fan_in)``, zero biases."""
    if len(dims) < 2:
        raise ValueError("dims needs an input size and at least one layer size")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        layers.append((rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in), np.zeros(fan_out)))
    return BackboneParams(tuple(layers), activation)


def _unit_rows(w: np.ndarray) -> np.ndarray:
    return w / np.maximum(np.linalg.norm(w, axis=1, keepdims=True), _NORM_FLOOR)


def new_head(num_classes: int, embed_dim: int, m: float = 0.5, s: float = 16.0, seed: int = 0) -> HeadParams:
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    rng = np.random.default_rng(seed)
    return HeadParams(_unit_rows(rng.standard_normal((num_classes, embed_dim))), m, s)


def head_from_centroids(embeddings: np.ndarray, labels: np.ndarray, num_classes: int, m: float = 0.5, s: float = 16.0) -> HeadParams:
    """Class rows set to the normalized mean embedding of each class."""
    sums = np.zeros((num_classes, embeddings.shape[1]))
    np.add.at(sums, np.asarray(labels), embeddings)
    if np.any(np.linalg.norm(sums, axis=1) == 0):
        raise ValueError("every class needs at least one sample with a non-cancelling embedding")
    return HeadParams(_unit_rows(sums), m, s)


def new_model(dims: Sequence[int], num_classes: int, seed: int, m: float = 0.5, s: float = 16.0) -> ModelParams:
    backbone = init_backbone(dims, seed)
    return ModelParams(backbone, new_head(num_classes, backbone.embed_dim, m, s, seed + 1))


def _forward(backbone: BackboneParams, x: np.ndarray):
    if x.shape[1] != backbone.input_dim:
        raise ValueError(f"input dim {x.shape[1]} != backbone input dim {backbone.input_dim}")
    acts = [x]
    h = x
    last = len(backbone.layers) - 1
    for k, (w, b) in enumerate(backbone.layers):
        h = h @ w.T + b
        if k < last:
            h = np.tanh(h)
        acts.append(h)
    norm = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), _NORM_FLOOR)
    return h / norm, acts, norm


def embed(backbone: BackboneParams, features: np.ndarray) -> np.ndarray:
    """Unit-norm embeddings for a batch ``(n, input_dim)``."""
    return _forward(backbone, np.atleast_2d(np.asarray(features, dtype=np.float64)))[0]


def forward_embed(backbone: BackboneParams, features: np.ndarray) -> np.ndarray:
    """Embed a single vector (or a batch) to the unit sphere."""
    features = np.asarray(features, dtype=np.float64)
    out = embed(backbone, features)
    return out[0] if features.ndim == 1 else out


def margin_loss_and_grads(model: ModelParams, features: np.ndarray, labels: np.ndarray):
    """Mean additive-angular-margin cross-entropy and its exact gradients.

    The true-class logit is ``s * cos(theta_y + m)``, every other logit is
    ``s * cos(theta_j)``.  Class rows are normalized inside the loss, so the
    head gradient includes the normalization Jacobian.

    Returns
    -------
    loss : float
    grads : ModelParams
        Same structure as ``model``; head margin/scale are copied through.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    if n == 0 or y.shape != (n,):
        raise ValueError("batch must be non-empty with one label per row")
    head = model.head
    if y.min() < 0 or y.max() >= head.num_classes:
        raise ValueError(f"labels must lie in [0, {head.num_classes})")
    m, s = head.margin, head.scale

    e, acts, znorm = _forward(model.backbone, x)
    wnorm = np.maximum(np.linalg.norm(head.class_weights, axis=1, keepdims=True), _NORM_FLOOR)
    w_hat = head.class_weights / wnorm
    cos = e @ w_hat.T

    rows = np.arange(n)
    c_raw = cos[rows, y]
    c = np.clip(c_raw, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    theta = np.arccos(c)
    logits = s * cos
    logits[rows, y] = s * np.cos(theta + m)

    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1)
    loss = float(np.mean(np.log(denom) - shifted[rows, y]))

    dlogits = expd / denom[:, None]
    dlogits[rows, y] -= 1.0
    dlogits /= n
    dcos = s * dlogits
    inside = np.abs(c_raw) < 1.0 - COS_CLAMP
    dphi = np.where(inside, np.sin(theta + m) / np.sin(theta), 0.0)
    dcos[rows, y] = s * dlogits[rows, y] * dphi

    de = dcos @ w_hat
    dw_hat = dcos.T @ e
    dw = (dw_hat - w_hat * np.sum(dw_hat * w_hat, axis=1, keepdims=True)) / wnorm

    dh = (de - e * np.sum(de * e, axis=1, keepdims=True)) / znorm
    grads = []
    last = len(model.backbone.layers) - 1
    for k in range(last, -1, -1):
        w, _ = model.backbone.layers[k]
        if k < last:
            dh = dh * (1.0 - acts[k + 1] ** 2)
        grads.append((dh.T @ acts[k], dh.sum(axis=0)))
        dh = dh @ w
    grads.reverse()
    gback = BackboneParams(tuple(grads), model.backbone.activation)
    return loss, ModelParams(gback, HeadParams(dw, m, s))


def _check_shapes(a: BackboneParams, b: BackboneParams) -> None:
    if not a.same_shape(b):
        raise ValueError("backbone shapes do not match")


def prox_gradient(backbone: BackboneParams, reference: BackboneParams, lam: float) -> BackboneParams:
    """Gradient ``lam * (theta - reference)`` of the domain constraint penalty."""
    _check_shapes(backbone, reference)
    return BackboneParams.from_arrays(
        [lam * (p - r) for p, r in zip(backbone.arrays(), reference.arrays())], backbone.activation
    )


def local_objective(model: ModelParams, features, labels, prox=None):
    """Margin loss plus the optional penalty, with matching gradients."""
    loss, grads = margin_loss_and_grads(model, features, labels)
    if prox is None:
        return loss, grads
    lam, ref = prox
    extra = prox_gradient(model.backbone, ref, lam)
    back = BackboneParams.from_arrays(
        [g + e for g, e in zip(grads.backbone.arrays(), extra.arrays())], grads.backbone.activation
    )
    return loss + dcl_penalty(model.backbone, ref, lam), ModelParams(back, grads.head)


def sgd_step(model: ModelParams, grads: ModelParams, lr: float, prox=None) -> ModelParams:
    """One plain SGD step.

    ``prox=(lam, reference_backbone)`` adds ``lam * (theta - reference)`` to
    every backbone gradient; the head is never regularized.  Head rows are
    re-normalized after the update.
    """
    if not lr >= 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    _check_shapes(model.backbone, grads.backbone)
    if grads.head.class_weights.shape != model.head.class_weights.shape:
        raise ValueError("head gradient shape mismatch")
    params = model.backbone.arrays()
    gvals = grads.backbone.arrays()
    if prox is not None:
        lam, ref = prox
        if lam < 0:
            raise ValueError(f"lambda must be >= 0, got {lam}")
        _check_shapes(model.backbone, ref)
        if lam != 0:
            gvals = [g + e for g, e in zip(gvals, prox_gradient(model.backbone, ref, lam).arrays())]
    new_back = BackboneParams.from_arrays(
        [p - lr * g for p, g in zip(params, gvals)], model.backbone.activation
    )
    w = model.head.class_weights - lr * grads.head.class_weights
    return ModelParams(new_back, HeadParams(_unit_rows(w), model.head.margin, model.head.scale))


def dcl_penalty(backbone: BackboneParams, reference: BackboneParams, lam: float) -> float:
    """``lam / 2 * ||theta - reference||^2`` over all backbone entries."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    _check_shapes(backbone, reference)
    diff = backbone.flat() - reference.flat()
    return 0.5 * lam * float(diff @ diff)


def backbone_distance(a: BackboneParams, b: BackboneParams) -> float:
    _check_shapes(a, b)
    return float(np.linalg.norm(a.flat() - b.flat()))


@dataclass(frozen=True)
class BatchSampler:
    """Seeded cycling of shuffled permutations, as an immutable cursor.

    Epoch ``k`` visits ``default_rng([seed, k]).permutation(n)``; a batch that
    runs past the end of an epoch continues into the next one.
    """

    n: int
    seed: int
    epoch: int = 0
    pos: int = 0

    def _perm(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(self.n)

    def next_batch(self, batch_size: int) -> tuple[np.ndarray, "BatchSampler"]:
        if self.n < 1:
            raise ValueError("cannot sample from an empty dataset")
        size = min(batch_size, self.n)
        epoch, pos = self.epoch, self.pos
        parts = []
        while size:
            take = min(size, self.n - pos)
            parts.append(self._perm(epoch)[pos : pos + take])
            size -= take
            pos += take
            if pos == self.n:
                epoch, pos = epoch + 1, 0
        return np.concatenate(parts), BatchSampler(self.n, self.seed, epoch, pos)


def train_steps(
    model: ModelParams,
    features: np.ndarray,
    labels: np.ndarray,
    steps: int,
    lr: float,
    batch_size: int,
    sampler: BatchSampler,
    prox=None,
):
    """Run ``steps`` SGD iterations; returns ``(model, sampler, losses, batches)``."""
    losses, batches = [], []
    for _ in range(steps):
        idx, sampler = sampler.next_batch(batch_size)
        loss, grads = margin_loss_and_grads(model, features[idx], labels[idx])
        model = sgd_step(model, grads, lr, prox)
        losses.append(loss)
        batches.append(idx)
    return model, sampler, losses, batches


# -- checkpoint container ----------------------------------------------------
#
#   u8    format version (1)
#   4s    magic b"FDCK"
#   u8    kind: 0 = backbone only, 1 = backbone + head
#   u16   activation tag length, then the tag bytes (ascii)
#   u32   number of layers; per layer: u32 out, u32 in, W (out*in f8), b (out f8)
#   kind 1 only: u32 classes, u32 embed_dim, f8 margin, f8 scale, weights (f8)
#
# All integers and floats little-endian; arrays in C order.

CHECKPOINT_VERSION = 1
_CKPT_MAGIC = b"FDCK"


def save_checkpoint(path, params) -> None:
    """Write a ``BackboneParams`` or ``ModelParams`` with exact fp64 round-trip."""
    if isinstance(params, ModelParams):
        backbone, head = params.backbone, params.head
    else:
        backbone, head = params, None
    tag = backbone.activation.encode("ascii")
    out = [struct.pack("<B4sBH", CHECKPOINT_VERSION, _CKPT_MAGIC, int(head is not None), len(tag)), tag]
    out.append(struct.pack("<I", len(backbone.layers)))
    for w, b in backbone.layers:
        out.append(struct.pack("<II", *w.shape))
        out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    if head is not None:
        cw = head.class_weights
        out.append(struct.pack("<IIdd", cw.shape[0], cw.shape[1], head.margin, head.scale))
        out.append(np.ascontiguousarray(cw, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if not buf or buf[0] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {buf[:1]!r}")
    version, magic, kind, taglen = struct.unpack_from("<B4sBH", buf, 0)
    if magic != _CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    off = struct.calcsize("<B4sBH")
    activation = buf[off : off + taglen].decode("ascii")
    off += taglen

    def take(count):
        nonlocal off
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        return arr

    (nlayers,) = struct.unpack_from("<I", buf, off)
    off += 4
    layers = []
    for _ in range(nlayers):
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        w = take(rows * cols).reshape(rows, cols)
        layers.append((w, take(rows)))
    backbone = BackboneParams(tuple(layers), activation)
    if kind == 0:
        return backbone
    classes, dim, margin, scale = struct.unpack_from("<IIdd", buf, off)
    off += struct.calcsize("<IIdd")
    head = HeadParams(take(classes * dim).reshape(classes, dim), margin, scale)
    return ModelParams(backbone, head)
