"""Relation classifier: a three-affine-layer MLP with a from-scratch trainer.

forward/backward, Adam, and the learning-rate schedule are implemented
directly in numpy so training is deterministic given a seed: fixed Glorot
init, fixed shuffling from the seeded generator, single-threaded updates.
Master weights are float64 during training and are quantized to float32 on
completion, matching the on-disk model format so that a save/load cycle
never changes inference results.

Multiclass models end in a softmax trained with cross-entropy; multilabel
models end in per-class sigmoids trained with binary cross-entropy.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dataio import MULTICLASS, MULTILABEL, RelationVocabulary
from .errors import (
    CorruptModel,
    EmptyBatch,
    EmptyDataset,
    SchemaMismatch,
    ValidationError,
    VersionMismatch,
)
from .features import FeatureVector

MODEL_MAGIC = b"SGMB"
MODEL_VERSION = 1


@dataclass
class MlpParams:
    """Weights/biases of the three affine layers plus the metadata needed
    to check inputs: expected feature schema and the relation vocabulary."""

    layers: list[tuple[np.ndarray, np.ndarray]]  # (W: (out, in), b: (out,))
    schema_id: str
    vocabulary: RelationVocabulary

    def __post_init__(self):
        if len(self.layers) != 3:
            raise ValidationError(f"expected 3 affine layers, got {len(self.layers)}")
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValidationError(f"layer {i}: inconsistent weight/bias shapes")
            if i > 0 and w.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ValidationError(f"layer {i}: input dim does not chain")
        if self.output_dim != len(self.vocabulary):
            raise ValidationError("output dim differs from vocabulary size")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def hidden_dims(self) -> tuple[int, int]:
        return (self.layers[0][0].shape[0], self.layers[1][0].shape[0])

    @property
    def output_dim(self) -> int:
        return self.layers[2][0].shape[0]

    @property
    def mode(self) -> str:
        return self.vocabulary.mode

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(
            [(w.astype(dtype), b.astype(dtype)) for w, b in self.layers],
            self.schema_id,
            self.vocabulary,
        )


@dataclass(frozen=True)
class RelationDistribution:
    """Per-relation probabilities aligned with the vocabulary order."""

    probs: np.ndarray
    mode: str

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64).reshape(-1))
        if np.any(self.probs < -1e-12) or np.any(self.probs > 1 + 1e-12):
            raise ValidationError("probabilities outside [0, 1]")
        if self.mode == MULTICLASS and abs(self.probs.sum() - 1.0) > 1e-6:
            raise ValidationError("multiclass probabilities must sum to 1")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 0.5
    lr_decay_every: int = 3  # halve at the end of epochs 3, 6, 9, ...
    epochs: int = 10
    batch_size: int = 64
    hidden_dims: tuple[int, int] = (64, 32)
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValidationError("train.lr: must be >= 0")
        if self.epochs < 1:
            raise ValidationError("train.epochs: must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("train.batch_size: must be >= 1")

    def lr_for_epoch(self, epoch: int) -> float:
        """Learning rate used during 1-based epoch `epoch`."""
        return self.lr * self.lr_decay ** ((epoch - 1) // self.lr_decay_every)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    val_accuracy: Optional[float] = None


@dataclass
class LabeledFeatures:
    """Vectorized dataset: features (N, D) and labels.

    Multiclass labels: int array (N,).  Multilabel labels: bool array (N, C).
    """

    features: np.ndarray
    labels: np.ndarray
    schema_id: str
    vocabulary: RelationVocabulary

    def __len__(self) -> int:
        return self.features.shape[0]

    @classmethod
    def from_pairs(
        cls,
        pairs: Sequence[tuple[FeatureVector, object]],
        vocabulary: RelationVocabulary,
    ) -> "LabeledFeatures":
        if not pairs:
            raise EmptyDataset("no labeled samples")
        schema = pairs[0][0].schema_id
        feats = []
        for fv, _ in pairs:
            if fv.schema_id != schema:
                raise SchemaMismatch(f"mixed schemas {schema} vs {fv.schema_id}")
            feats.append(fv.values)
        features = np.stack(feats)
        if vocabulary.mode == MULTICLASS:
            labels = np.array([int(y) for _, y in pairs], dtype=np.int64)
            if labels.min() < 0 or labels.max() >= len(vocabulary):
                raise ValidationError("label index outside vocabulary")
        else:
            labels = np.zeros((len(pairs), len(vocabulary)), dtype=bool)
            for i, (_, ys) in enumerate(pairs):
                for y in ys:  # type: ignore[union-attr]
                    labels[i, int(y)] = True
        return cls(features, labels, schema, vocabulary)


# ---------------------------------------------------------------------------
# Forward / loss / gradients


def _affine_forward(layers, X: np.ndarray):
    """Returns (logits, cache of pre/post activations for backprop)."""
    z1 = X @ layers[0][0].T + layers[0][1]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ layers[1][0].T + layers[1][1]
    a2 = np.maximum(z2, 0.0)
    logits = a2 @ layers[2][0].T + layers[2][1]
    return logits, (X, z1, a1, z2, a2)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(logits: np.ndarray) -> np.ndarray:
    out = np.empty_like(logits)
    pos = logits >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-logits[pos]))
    ez = np.exp(logits[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward_batch(params: MlpParams, X: np.ndarray) -> np.ndarray:
    """Probabilities (N, C) for a feature matrix; float64 arithmetic."""
    layers = [(w.astype(np.float64), b.astype(np.float64)) for w, b in params.layers]
    logits, _ = _affine_forward(layers, np.asarray(X, dtype=np.float64))
    if params.mode == MULTICLASS:
        return _softmax(logits)
    return _sigmoid(logits)


def forward(params: MlpParams, x: FeatureVector) -> RelationDistribution:
    """Distribution over relations for one feature vector."""
    if x.schema_id != params.schema_id:
        raise SchemaMismatch(f"model expects {params.schema_id}, got {x.schema_id}")
    if len(x) != params.input_dim:
        raise SchemaMismatch(f"model expects {params.input_dim} inputs, got {len(x)}")
    probs = forward_batch(params, x.values.reshape(1, -1))[0]
    return RelationDistribution(probs, params.mode)


def _loss_and_grad_arrays(layers, X: np.ndarray, labels: np.ndarray, mode: str):
    """Mean loss plus exact gradients in the same (W, b) layout."""
    logits, (X, z1, a1, z2, a2) = _affine_forward(layers, X)
    n = X.shape[0]
    if mode == MULTICLASS:
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(logz - shifted[np.arange(n), labels]))
        probs = _softmax(logits)
        dlogits = probs
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
    else:
        y = labels.astype(np.float64)
        # elementwise BCE from logits: max(z,0) - z*y + log(1 + exp(-|z|))
        loss = float(
            np.mean(np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits))))
        )
        dlogits = (_sigmoid(logits) - y) / labels.size

    dW3 = dlogits.T @ a2
    db3 = dlogits.sum(axis=0)
    da2 = dlogits @ layers[2][0]
    dz2 = da2 * (z2 > 0)
    dW2 = dz2.T @ a1
    db2 = dz2.sum(axis=0)
    da1 = dz2 @ layers[1][0]
    dz1 = da1 * (z1 > 0)
    dW1 = dz1.T @ X
    db1 = dz1.sum(axis=0)
    return loss, [(dW1, db1), (dW2, db2), (dW3, db3)]


def loss_and_grad(params: MlpParams, batch: Sequence[tuple[FeatureVector, object]]):
    """Mean loss and analytic gradients over a batch of labeled vectors."""
    if not batch:
        raise EmptyBatch("loss over an empty batch")
    data = LabeledFeatures.from_pairs(batch, params.vocabulary)
    if data.schema_id != params.schema_id:
        raise SchemaMismatch(f"model expects {params.schema_id}, got {data.schema_id}")
    layers = [(w.astype(np.float64), b.astype(np.float64)) for w, b in params.layers]
    return _loss_and_grad_arrays(layers, data.features.astype(np.float64), data.labels, params.mode)


# ---------------------------------------------------------------------------
# Training


def init_params(
    seed: int,
    input_dim: int,
    hidden_dims: tuple[int, int],
    vocabulary: RelationVocabulary,
    schema_id: str,
) -> MlpParams:
    """Glorot-uniform weights, zero biases, drawn from a seeded generator."""
    rng = np.random.default_rng(seed)
    dims = [input_dim, hidden_dims[0], hidden_dims[1], len(vocabulary)]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    return MlpParams(layers, schema_id, vocabulary)


def _accuracy(layers, X: np.ndarray, labels: np.ndarray, mode: str) -> float:
    logits, _ = _affine_forward(layers, X)
    pred = logits.argmax(axis=1)
    if mode == MULTICLASS:
        return float(np.mean(pred == labels))
    return float(np.mean(labels[np.arange(len(pred)), pred]))


def train(
    cfg: TrainConfig,
    data: LabeledFeatures,
    val: Optional[LabeledFeatures] = None,
) -> tuple[MlpParams, list[EpochStats]]:
    """Adam training loop; deterministic given (cfg.seed, data order)."""
    if len(data) == 0:
        raise EmptyDataset("training set is empty")
    if val is not None and val.schema_id != data.schema_id:
        raise SchemaMismatch("val schema differs from train schema")

    params = init_params(cfg.seed, data.features.shape[1], cfg.hidden_dims, data.vocabulary, data.schema_id)
    # flat parameter list [W1, b1, W2, b2, W3, b3] for the Adam bookkeeping
    flat = [arr.copy() for wb in params.layers for arr in wb]
    X = data.features.astype(np.float64)
    Y = data.labels

    m = [np.zeros_like(p) for p in flat]
    v = [np.zeros_like(p) for p in flat]
    rng = np.random.default_rng(cfg.seed)
    t = 0
    log: list[EpochStats] = []

    def as_layers(ps):
        return [(ps[0], ps[1]), (ps[2], ps[3]), (ps[4], ps[5])]

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_for_epoch(epoch)
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = _loss_and_grad_arrays(as_layers(flat), X[idx], Y[idx], data.vocabulary.mode)
            losses.append(loss)
            gflat = [arr for wb in grads for arr in wb]
            t += 1
            bc1 = 1.0 - cfg.beta1**t
            bc2 = 1.0 - cfg.beta2**t
            for pi, g in enumerate(gflat):
                m[pi] = cfg.beta1 * m[pi] + (1 - cfg.beta1) * g
                v[pi] = cfg.beta2 * v[pi] + (1 - cfg.beta2) * g * g
                flat[pi] = flat[pi] - lr * (m[pi] / bc1) / (np.sqrt(v[pi] / bc2) + cfg.eps)
        layers = as_layers(flat)
        stats = EpochStats(
            epoch=epoch,
            lr=lr,
            train_loss=float(np.mean(losses)),
            train_accuracy=_accuracy(layers, X, Y, data.vocabulary.mode),
        )
        if val is not None and len(val):
            stats.val_accuracy = _accuracy(layers, val.features.astype(np.float64), val.labels, data.vocabulary.mode)
        log.append(stats)

    final = MlpParams(layers, data.schema_id, data.vocabulary).astype(np.float32)
    return final, log


def topk_accuracy(params: MlpParams, data: LabeledFeatures, k: int) -> float:
    """Percentage of samples whose true label (any true label in multilabel
    mode) appears among the k highest-probability relations.  Ties are
    broken by lower vocabulary index."""
    if len(data) == 0:
        raise EmptyDataset("top-k over an empty dataset")
    if data.schema_id != params.schema_id:
        raise SchemaMismatch(f"model expects {params.schema_id}, got {data.schema_id}")
    if k < 1:
        raise ValidationError("k must be >= 1")
    probs = forward_batch(params, data.features)
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    if params.mode == MULTICLASS:
        hits = (order == data.labels[:, None]).any(axis=1)
    else:
        hits = np.array([data.labels[i, order[i]].any() for i in range(len(data))])
    return float(100.0 * hits.mean())


# ---------------------------------------------------------------------------
# Model file: binary little-endian with a trailing CRC32.
#   magic | version u32 | header-length u32 | header JSON (utf-8)
#   | per-layer f32 row-major W then b | crc32 u32


def save_model(params: MlpParams, path: str) -> None:
    header = {
        "schema_id": params.schema_id,
        "vocabulary": {"names": list(params.vocabulary.names), "mode": params.vocabulary.mode},
        "shapes": [[int(w.shape[0]), int(w.shape[1])] for w, _ in params.layers],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = bytearray()
    payload += MODEL_MAGIC
    payload += struct.pack("<I", MODEL_VERSION)
    payload += struct.pack("<I", len(hbytes))
    payload += hbytes
    for w, b in params.layers:
        payload += np.ascontiguousarray(w, dtype="<f4").tobytes()
        payload += np.ascontiguousarray(b, dtype="<f4").tobytes()
    payload += struct.pack("<I", zlib.crc32(bytes(payload)))
    with open(path, "wb") as f:
        f.write(payload)


def load_model(path: str) -> MlpParams:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise CorruptModel(f"model file {path}: truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptModel(f"model file {path}: checksum mismatch")
    if body[:4] != MODEL_MAGIC:
        raise CorruptModel(f"model file {path}: bad magic")
    (version,) = struct.unpack("<I", body[4:8])
    if version != MODEL_VERSION:
        raise VersionMismatch(f"model file {path}: version {version} unsupported")
    (hlen,) = struct.unpack("<I", body[8:12])
    if len(body) < 12 + hlen:
        raise CorruptModel(f"model file {path}: truncated header")
    try:
        header = json.loads(body[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptModel(f"model file {path}: unreadable header") from e
    vocab = RelationVocabulary(tuple(header["vocabulary"]["names"]), header["vocabulary"]["mode"])
    shapes = header["shapes"]
    offset = 12 + hlen
    layers = []
    for out_dim, in_dim in shapes:
        nw, nb = out_dim * in_dim * 4, out_dim * 4
        if offset + nw + nb > len(body):
            raise CorruptModel(f"model file {path}: truncated weights")
        w = np.frombuffer(body, dtype="<f4", count=out_dim * in_dim, offset=offset).reshape(out_dim, in_dim)
        offset += nw
        b = np.frombuffer(body, dtype="<f4", count=out_dim, offset=offset)
        offset += nb
        layers.append((w.copy(), b.copy()))
    if offset != len(body):
        raise CorruptModel(f"model file {path}: trailing bytes")
    return MlpParams(layers, header["schema_id"], vocab)
