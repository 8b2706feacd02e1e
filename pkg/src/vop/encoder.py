"""Trainable patch embedding head.

A small MLP maps frozen backbone patch features (1024-dim) to compact
embeddings (256-dim): one linear projection followed by fully connected
blocks of GELU, dropout, and another linear layer, with L2 row
normalization at the end. Gradients are analytic; training runs in
float64 and checkpoints round to float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import io as vio
from .errors import ValidationError
from .types import DEGENERATE_NORM, ImageEmbeddings, ImageFeatures, normalize_rows

DEFAULT_LAYER_DIMS = (1024, 256, 256, 256)
DEFAULT_DROPOUT = 0.1

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact GELU x * Phi(x) via the error function (no tanh shortcut)."""
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    """d/dx of exact GELU: Phi(x) + x * phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


@dataclass(frozen=True)
class EncoderHead:
    """MLP parameters: len(weights) linear layers applied in order."""

    weights: list
    biases: list
    dropout_rate: float = DEFAULT_DROPOUT

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValidationError("need matching, non-empty weight and bias lists")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout rate must lie in [0, 1)")
        ws = [np.ascontiguousarray(w, dtype=np.float64) for w in self.weights]
        bs = [np.ascontiguousarray(b, dtype=np.float64) for b in self.biases]
        for idx, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
                raise ValidationError(f"layer {idx}: weight/bias shape mismatch")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"layer {idx}: non-finite parameters")
            if idx > 0 and ws[idx - 1].shape[1] != w.shape[0]:
                raise ValidationError(f"layer {idx}: incompatible with layer {idx - 1}")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)


def init_head(
    layer_dims=DEFAULT_LAYER_DIMS,
    dropout_rate: float = DEFAULT_DROPOUT,
    rng: np.random.Generator | None = None,
) -> EncoderHead:
    """Fan-in uniform init U(+-sqrt(6/d_in)) for weights, zero biases."""
    if rng is None:
        rng = np.random.default_rng(0)
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValidationError("layer_dims needs at least two positive entries")
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        lim = math.sqrt(6.0 / d_in)
        weights.append(rng.uniform(-lim, lim, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return EncoderHead(weights, biases, dropout_rate)


def _check_input(head: EncoderHead, feats: np.ndarray) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != head.weights[0].shape[0]:
        raise ValidationError(
            f"input is {feats.shape}, head expects (*, {head.weights[0].shape[0]})"
        )
    if not np.all(np.isfinite(feats)):
        raise ValidationError("non-finite values in head input")
    return feats


def head_forward_cache(
    head: EncoderHead,
    feats: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """Forward pass keeping every intermediate needed for backprop.

    Layout: linear, then (GELU -> dropout -> linear) per remaining layer,
    then L2 row normalization. Rows whose pre-norm length falls below the
    degenerate guard stay zero instead of being scaled up.
    """
    x = _check_input(head, feats)
    if training and head.dropout_rate > 0 and rng is None:
        raise ValidationError("training-mode dropout needs an rng")
    layer_in = [x]
    pre_acts = []
    masks = []
    z = x @ head.weights[0] + head.biases[0]
    pre_acts.append(z)
    keep = 1.0 - head.dropout_rate
    for l in range(1, head.n_layers):
        a = gelu(z)
        if training and head.dropout_rate > 0:
            mask = (rng.random(a.shape) < keep).astype(np.float64) / keep
        else:
            mask = None
        masks.append(mask)
        d = a if mask is None else a * mask
        layer_in.append(d)
        z = d @ head.weights[l] + head.biases[l]
        pre_acts.append(z)
    raw = z
    norms = np.linalg.norm(raw, axis=1)
    safe = np.where(norms < DEGENERATE_NORM, 1.0, norms)
    out = np.where(norms[:, None] < DEGENERATE_NORM, 0.0, raw / safe[:, None])
    cache = {
        "layer_in": layer_in,
        "pre_acts": pre_acts,
        "masks": masks,
        "norms": norms,
        "out": out,
    }
    return out, cache


def head_forward(
    head: EncoderHead,
    feats: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    out, _ = head_forward_cache(head, feats, training=training, rng=rng)
    return out


def head_backward(head: EncoderHead, cache: dict, grad_out: np.ndarray):
    """Backprop a gradient on the normalized output to parameter gradients.

    Returns (grad_weights, grad_biases) matching the head's layout.
    Degenerate rows propagate zero gradient.
    """
    out = cache["out"]
    norms = cache["norms"]
    live = norms >= DEGENERATE_NORM
    safe = np.where(live, norms, 1.0)
    inner = np.sum(out * grad_out, axis=1, keepdims=True)
    g = (grad_out - out * inner) / safe[:, None]
    g[~live] = 0.0

    grad_w = [None] * head.n_layers
    grad_b = [None] * head.n_layers
    for l in range(head.n_layers - 1, 0, -1):
        grad_w[l] = cache["layer_in"][l].T @ g
        grad_b[l] = g.sum(axis=0)
        g = g @ head.weights[l].T
        mask = cache["masks"][l - 1]
        if mask is not None:
            g = g * mask
        g = g * gelu_grad(cache["pre_acts"][l - 1])
    grad_w[0] = cache["layer_in"][0].T @ g
    grad_b[0] = g.sum(axis=0)
    return grad_w, grad_b


# ---------------------------------------------------------------------------
# contrastive loss over patch similarity

def contrastive_loss(emb_q: np.ndarray, emb_db: np.ndarray, labels: np.ndarray, margin: float = 1.0):
    """Squared-margin contrastive loss on all patch pair similarities.

    loss = mean over pairs of  l * (margin - d)^2 + (1 - l) * d^2
    with d the inner product of unit rows. Both terms add; mismatched
    high-similarity pairs are penalized, not rewarded.

    Returns (loss, grad_q, grad_db) with gradients w.r.t. the embeddings.
    """
    emb_q = np.asarray(emb_q, dtype=np.float64)
    emb_db = np.asarray(emb_db, dtype=np.float64)
    labels = np.asarray(labels)
    if emb_q.ndim != 2 or emb_db.ndim != 2 or emb_q.shape[1] != emb_db.shape[1]:
        raise ValidationError("embedding matrices must share their width")
    if emb_q.shape[0] == 0 or emb_db.shape[0] == 0:
        raise ValidationError("empty batch has no loss")
    if labels.shape != (emb_q.shape[0], emb_db.shape[0]):
        raise ValidationError(
            f"labels are {labels.shape}, expected {(emb_q.shape[0], emb_db.shape[0])}"
        )
    lab = labels.astype(np.float64)
    sims = emb_q @ emb_db.T
    n_pairs = sims.size
    loss = float(np.sum(lab * (margin - sims) ** 2 + (1.0 - lab) * sims**2)) / n_pairs
    # d loss / d sims
    g = (-2.0 * lab * (margin - sims) + 2.0 * (1.0 - lab) * sims) / n_pairs
    grad_q = g @ emb_db
    grad_db = g.T @ emb_q
    return loss, grad_q, grad_db


# ---------------------------------------------------------------------------
# feature-space augmentation

def augment_features(feats: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    """Gain jitter in [0.9, 1.1] plus Gaussian noise scaled to feature std.

    Stands in for pixel-space augmentation, which would need the frozen
    backbone inside the loop. strength 0 returns the input unchanged.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if strength == 0:
        return feats.copy()
    gain = rng.uniform(0.9, 1.1)
    noise = rng.normal(0.0, strength * feats.std() if feats.size else 0.0, feats.shape)
    return gain * feats + noise


# ---------------------------------------------------------------------------
# inference helpers

def embed_image(head: EncoderHead, feats: ImageFeatures) -> ImageEmbeddings:
    """Eval-mode embeddings for one image; CLS is the renormalized mean."""
    embs = head_forward(head, feats.patch_feats.astype(np.float64))
    cls = normalize_rows(embs.mean(axis=0, keepdims=True))[0]
    return ImageEmbeddings(feats.image_id, embs, cls)


def save_head(head: EncoderHead, path) -> None:
    vio.write_checkpoint(head.layer_dims, head.dropout_rate, head.weights, head.biases, path)


def load_head(path) -> EncoderHead:
    _, dropout, weights, biases = vio.read_checkpoint(path)
    return EncoderHead(weights, biases, dropout)
