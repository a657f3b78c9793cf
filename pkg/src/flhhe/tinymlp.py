"""Two-layer bias-free MLP (784 -> 32 -> 10), MNIST ingestion, training.

The network is the permanent fixture of the whole pipeline: its 25,408
weights flatten into exactly 1,588 cipher blocks of 16 lanes.  Training
is plain mini-batch SGD on softmax cross-entropy in float64, with a
hard clamp to [-1, 1] after every step so quantizer preconditions hold
by construction.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError, SerializationError

INPUT_DIM = 784
HIDDEN_DIM = 32
OUTPUT_DIM = 10
FLAT_LEN = INPUT_DIM * HIDDEN_DIM + HIDDEN_DIM * OUTPUT_DIM  # 25,408

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class ModelWeights:
    """w1: hidden x input, w2: output x hidden; flattened row-major w1 then w2."""

    w1: np.ndarray
    w2: np.ndarray

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.w1.reshape(-1), self.w2.reshape(-1)])

    @classmethod
    def unflatten(cls, flat) -> "ModelWeights":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (FLAT_LEN,):
            raise ParameterError(f"flattened model must have {FLAT_LEN} elements, got {flat.shape}")
        w1 = flat[: INPUT_DIM * HIDDEN_DIM].reshape(HIDDEN_DIM, INPUT_DIM).copy()
        w2 = flat[INPUT_DIM * HIDDEN_DIM :].reshape(OUTPUT_DIM, HIDDEN_DIM).copy()
        return cls(w1, w2)

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.w1.copy(), self.w2.copy())


def init_weights(rng: np.random.Generator) -> ModelWeights:
    """He-uniform init; both limits sit far inside [-1, 1]."""
    lim1 = np.sqrt(6.0 / INPUT_DIM)
    lim2 = np.sqrt(6.0 / HIDDEN_DIM)
    return ModelWeights(
        rng.uniform(-lim1, lim1, (HIDDEN_DIM, INPUT_DIM)),
        rng.uniform(-lim2, lim2, (OUTPUT_DIM, HIDDEN_DIM)),
    )


# ---------------------------------------------------------------------------
# MNIST (IDX format, optionally gzipped)


@dataclass
class DataSplit:
    images: np.ndarray  # (n, 784) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64


@dataclass
class DataPartition(DataSplit):
    excluded: frozenset


def _open_idx(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    with _open_idx(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise SerializationError(f"{path}: truncated IDX file")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise SerializationError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    count = int(np.prod(dims))
    body = raw[4 + 4 * ndim :]
    if len(body) < count:
        raise SerializationError(f"{path}: truncated IDX payload ({len(body)} < {count})")
    return np.frombuffer(body[:count], dtype=np.uint8).reshape(dims)


def _find_idx(data_dir: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        p = data_dir / name
        if p.exists():
            return p
    raise FileNotFoundError(f"missing {stem}[.gz] under {data_dir}")


def load_mnist(data_dir) -> tuple:
    """Parse the four IDX files into (train, test) splits, pixels / 255."""
    d = Path(data_dir)
    train_x = _read_idx(_find_idx(d, "train-images-idx3-ubyte"), IMAGE_MAGIC)
    train_y = _read_idx(_find_idx(d, "train-labels-idx1-ubyte"), LABEL_MAGIC)
    test_x = _read_idx(_find_idx(d, "t10k-images-idx3-ubyte"), IMAGE_MAGIC)
    test_y = _read_idx(_find_idx(d, "t10k-labels-idx1-ubyte"), LABEL_MAGIC)
    if len(train_x) != len(train_y) or len(test_x) != len(test_y):
        raise SerializationError("image/label counts disagree")
    train = DataSplit(train_x.reshape(len(train_x), -1).astype(np.float64) / 255.0,
                      train_y.astype(np.int64))
    test = DataSplit(test_x.reshape(len(test_x), -1).astype(np.float64) / 255.0,
                     test_y.astype(np.int64))
    return train, test


def partition_exclude(split: DataSplit, labels) -> DataPartition:
    """Retain exactly the samples whose label is not excluded."""
    excluded = frozenset(int(l) for l in labels)
    if not excluded <= set(range(10)):
        raise ParameterError(f"excluded labels must be digits 0..9, got {sorted(excluded)}")
    keep = ~np.isin(split.labels, sorted(excluded))
    return DataPartition(split.images[keep], split.labels[keep], excluded)


def filter_labels(split: DataSplit, labels) -> DataSplit:
    """Test subset containing only the given labels."""
    wanted = sorted(int(l) for l in labels)
    keep = np.isin(split.labels, wanted)
    return DataSplit(split.images[keep], split.labels[keep])


# ---------------------------------------------------------------------------
# Forward / loss / training


def forward(w: ModelWeights, images: np.ndarray) -> np.ndarray:
    """Logits = W2 * relu(W1 * x) for a batch of flattened images."""
    hidden = np.maximum(images @ w.w1.T, 0.0)
    return hidden @ w.w2.T


def loss_and_grads(w: ModelWeights, images: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its exact gradients."""
    batch = len(images)
    pre = images @ w.w1.T
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ w.w2.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    expo = np.exp(shifted)
    probs = expo / expo.sum(axis=1, keepdims=True)
    loss = -np.mean(np.log(probs[np.arange(batch), labels] + 1e-300))
    grad_logits = probs.copy()
    grad_logits[np.arange(batch), labels] -= 1.0
    grad_logits /= batch
    d_w2 = grad_logits.T @ hidden
    d_hidden = grad_logits @ w.w2
    d_pre = d_hidden * (pre > 0.0)
    d_w1 = d_pre.T @ images
    return loss, d_w1, d_w2


def sgd_step(w: ModelWeights, images, labels, lr: float) -> float:
    """One clamped SGD step in place; returns the pre-step batch loss."""
    loss, d_w1, d_w2 = loss_and_grads(w, images, labels)
    w.w1 -= lr * d_w1
    w.w2 -= lr * d_w2
    np.clip(w.w1, -1.0, 1.0, out=w.w1)
    np.clip(w.w2, -1.0, 1.0, out=w.w2)
    return loss


def train_epochs(w: ModelWeights, part: DataSplit, lr: float, batch_size: int,
                 epochs: int, rng: np.random.Generator) -> ModelWeights:
    """Mini-batch SGD over the partition; returns a new clamped model."""
    if len(part.images) == 0:
        raise ParameterError("cannot train on an empty partition")
    model = w.copy()
    n = len(part.images)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            sgd_step(model, part.images[idx], part.labels[idx], lr)
    return model


def mean_loss(w: ModelWeights, part: DataSplit, batch_size: int = 512) -> float:
    total, count = 0.0, 0
    for start in range(0, len(part.images), batch_size):
        sl = slice(start, start + batch_size)
        loss, _, _ = loss_and_grads(w, part.images[sl], part.labels[sl])
        total += loss * len(part.images[sl])
        count += len(part.images[sl])
    return total / max(count, 1)


def evaluate(w: ModelWeights, testset: DataSplit, labels=None) -> float:
    """Top-1 accuracy, optionally restricted to a label subset."""
    data = filter_labels(testset, labels) if labels is not None else testset
    if len(data.images) == 0:
        raise ParameterError("evaluation subset is empty")
    preds = np.argmax(forward(w, data.images), axis=1)
    return float(np.mean(preds == data.labels))


# ---------------------------------------------------------------------------
# Plaintext persistence (binary vector with shape header + JSON-style text)

VEC_MAGIC = 0x4D504846  # "FHPM"
_VEC_HDR = struct.Struct("<IIQ")  # magic, dtype code, element count
_DTYPES = {4: np.float32, 8: np.float64}


def vector_to_bytes(values: np.ndarray, dtype=np.float32) -> bytes:
    """Flattened weight vector with a shape header; payload is LE floats."""
    code = 4 if dtype == np.float32 else 8
    arr = np.asarray(values).astype(f"<f{code}")
    return _VEC_HDR.pack(VEC_MAGIC, code, len(arr)) + arr.tobytes()


def vector_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < _VEC_HDR.size:
        raise SerializationError("truncated weight vector")
    magic, code, count = _VEC_HDR.unpack_from(data)
    if magic != VEC_MAGIC or code not in _DTYPES:
        raise SerializationError("bad weight vector header")
    body = data[_VEC_HDR.size :]
    if len(body) != code * count:
        raise SerializationError("bad weight vector length")
    return np.frombuffer(body, dtype=f"<f{code}").copy()


def vector_byte_size(count: int, dtype=np.float32) -> int:
    return _VEC_HDR.size + (4 if dtype == np.float32 else 8) * count


def model_to_json(w: ModelWeights) -> str:
    return json.dumps(
        {
            "shapes": {"w1": list(w.w1.shape), "w2": list(w.w2.shape)},
            "weights": [float(x) for x in w.flatten()],
        }
    )


def model_from_json(text: str) -> ModelWeights:
    doc = json.loads(text)
    flat = np.array(doc["weights"], dtype=np.float64)
    return ModelWeights.unflatten(flat)
