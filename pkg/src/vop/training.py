"""Training loop for the embedding head: batch sampling, Adam, checkpoints.

Batches mix image pairs half and half: pairs with no overlapping patches
(all labels negative) and pairs whose overlap fraction lies in a
mid-range band, so the loss sees both clear negatives and informative
positives. Everything is driven by one seeded generator; two runs with
the same seed produce identical checkpoints.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .encoder import (
    EncoderHead,
    augment_features,
    contrastive_loss,
    head_backward,
    head_forward_cache,
    init_head,
)
from .errors import NumericalError, SamplingError, ValidationError
from .geometry import GtMatchSet
from .types import ImageFeatures

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    negative_fraction: float = 0.5
    overlap_low: float = 0.10
    overlap_high: float = 0.70

    def __post_init__(self):
        if not 0.0 < self.margin <= 1.0:
            raise ValidationError("margin must lie in (0, 1]")
        for name in ("negative_fraction", "overlap_low", "overlap_high"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if self.overlap_low > self.overlap_high:
            raise ValidationError("overlap band is empty")


@dataclass
class TrainDataset:
    """Supervision records plus the backbone features they refer to."""

    records: list
    features: dict

    def __post_init__(self):
        for rec in self.records:
            for ident in (rec.image_i, rec.image_j):
                if ident not in self.features:
                    raise ValidationError(f"record references unknown image {ident!r}")

    def split(self, cfg: LossConfig):
        """(negative records, in-band positive records)."""
        negatives = [r for r in self.records if not r.positives]
        positives = [
            r
            for r in self.records
            if r.positives and cfg.overlap_low <= r.overlap_fraction <= cfg.overlap_high
        ]
        return negatives, positives


def _labels_for(rec: GtMatchSet, n_q: int, n_db: int) -> np.ndarray:
    lab = np.zeros((n_q, n_db), dtype=bool)
    for p, q in rec.positives:
        lab[p, q] = True
    return lab


def sample_batch(
    dataset: TrainDataset,
    cfg: LossConfig,
    batch_size: int,
    rng: np.random.Generator,
):
    """Draw batch_size image pairs: floor(batch * negative_fraction) pairs
    with zero overlap, the rest from the positive overlap band.

    Returns a list of (query feats, db feats, labels, record) tuples.
    """
    if batch_size < 1:
        raise ValidationError("batch_size must be positive")
    negatives, positives = dataset.split(cfg)
    n_neg = int(batch_size * cfg.negative_fraction)
    n_pos = batch_size - n_neg
    if n_neg > 0 and not negatives:
        raise SamplingError("no zero-overlap image pairs available")
    if n_pos > 0 and not positives:
        raise SamplingError(
            f"no image pairs with overlap_fraction in "
            f"[{cfg.overlap_low}, {cfg.overlap_high}] available"
        )
    chosen = [negatives[i] for i in rng.integers(0, len(negatives), size=n_neg)]
    chosen += [positives[i] for i in rng.integers(0, len(positives), size=n_pos)]
    batch = []
    for rec in chosen:
        fq = dataset.features[rec.image_i].patch_feats.astype(np.float64)
        fdb = dataset.features[rec.image_j].patch_feats.astype(np.float64)
        batch.append((fq, fdb, _labels_for(rec, fq.shape[0], fdb.shape[0]), rec))
    return batch


@dataclass
class TrainState:
    head: EncoderHead
    m_w: list = field(default_factory=list)
    v_w: list = field(default_factory=list)
    m_b: list = field(default_factory=list)
    v_b: list = field(default_factory=list)
    step: int = 0
    epoch: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.m_w:
            self.m_w = [np.zeros_like(w) for w in self.head.weights]
            self.v_w = [np.zeros_like(w) for w in self.head.weights]
            self.m_b = [np.zeros_like(b) for b in self.head.biases]
            self.v_b = [np.zeros_like(b) for b in self.head.biases]


def init_train_state(layer_dims, dropout_rate, seed: int) -> TrainState:
    rng = np.random.default_rng(seed)
    return TrainState(head=init_head(layer_dims, dropout_rate, rng), rng_seed=seed)


def _adam_update(params, grads, m, v, step, lr):
    c1 = 1.0 - ADAM_BETA1**step
    c2 = 1.0 - ADAM_BETA2**step
    out = []
    for p, g, mi, vi in zip(params, grads, m, v):
        mi *= ADAM_BETA1
        mi += (1.0 - ADAM_BETA1) * g
        vi *= ADAM_BETA2
        vi += (1.0 - ADAM_BETA2) * g * g
        out.append(p - lr * (mi / c1) / (np.sqrt(vi / c2) + ADAM_EPS))
    return out


def _pair_loss_and_grads(head, fq, fdb, labels, margin, training, rng):
    """Loss of one image pair plus parameter gradients through both sides."""
    eq, cache_q = head_forward_cache(head, fq, training=training, rng=rng)
    edb, cache_db = head_forward_cache(head, fdb, training=training, rng=rng)
    loss, gq, gdb = contrastive_loss(eq, edb, labels, margin)
    gw_q, gb_q = head_backward(head, cache_q, gq)
    gw_d, gb_d = head_backward(head, cache_db, gdb)
    gw = [a + b for a, b in zip(gw_q, gw_d)]
    gb = [a + b for a, b in zip(gb_q, gb_d)]
    return loss, gw, gb


def evaluate_loss(head: EncoderHead, dataset: TrainDataset, margin: float = 1.0) -> float:
    """Mean eval-mode loss over every record in the dataset."""
    if not dataset.records:
        raise ValidationError("cannot evaluate on an empty dataset")
    total = 0.0
    for rec in dataset.records:
        fq = dataset.features[rec.image_i].patch_feats.astype(np.float64)
        fdb = dataset.features[rec.image_j].patch_feats.astype(np.float64)
        eq, _ = head_forward_cache(head, fq)
        edb, _ = head_forward_cache(head, fdb)
        loss, _, _ = contrastive_loss(eq, edb, _labels_for(rec, fq.shape[0], fdb.shape[0]), margin)
        total += loss
    return total / len(dataset.records)


def train(
    state: TrainState,
    dataset: TrainDataset,
    epochs: int,
    batch_size: int,
    lr: float,
    cfg: LossConfig = LossConfig(),
    val_dataset: TrainDataset | None = None,
    augment_strength: float = 0.0,
    steps_per_epoch: int | None = None,
):
    """Run Adam training; keep the head with the lowest validation loss.

    Returns (final TrainState carrying the best head, per-epoch log rows
    of dicts with epoch / train_loss / val_loss). Without a validation
    set the train loss drives checkpoint selection. A non-finite batch
    loss aborts with a diagnostic naming the offending image pairs.
    """
    rng = np.random.default_rng(state.rng_seed)
    if steps_per_epoch is None:
        steps_per_epoch = max(1, len(dataset.records) // batch_size)
    log = []
    best_loss = np.inf
    best_head = state.head
    for epoch in range(1, epochs + 1):
        epoch_loss = 0.0
        for _ in range(steps_per_epoch):
            batch = sample_batch(dataset, cfg, batch_size, rng)
            sum_gw = [np.zeros_like(w) for w in state.head.weights]
            sum_gb = [np.zeros_like(b) for b in state.head.biases]
            batch_loss = 0.0
            for fq, fdb, labels, rec in batch:
                if augment_strength > 0:
                    fq = augment_features(fq, rng, augment_strength)
                    fdb = augment_features(fdb, rng, augment_strength)
                loss, gw, gb = _pair_loss_and_grads(
                    state.head, fq, fdb, labels, cfg.margin,
                    training=state.head.dropout_rate > 0, rng=rng,
                )
                if not np.isfinite(loss):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch} on pair "
                        f"({rec.image_i!r}, {rec.image_j!r})"
                    )
                batch_loss += loss
                for acc, g in zip(sum_gw, gw):
                    acc += g
                for acc, g in zip(sum_gb, gb):
                    acc += g
            scale = 1.0 / len(batch)
            state.step += 1
            new_w = _adam_update(
                state.head.weights, [g * scale for g in sum_gw],
                state.m_w, state.v_w, state.step, lr,
            )
            new_b = _adam_update(
                state.head.biases, [g * scale for g in sum_gb],
                state.m_b, state.v_b, state.step, lr,
            )
            state.head = EncoderHead(new_w, new_b, state.head.dropout_rate)
            epoch_loss += batch_loss * scale
        state.epoch = epoch
        train_loss = epoch_loss / steps_per_epoch
        if val_dataset is not None:
            val_loss = evaluate_loss(state.head, val_dataset, cfg.margin)
        else:
            val_loss = train_loss
        if not np.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        log.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if val_loss < best_loss:
            best_loss = val_loss
            best_head = copy.deepcopy(state.head)
    state.head = best_head
    return state, log


def write_loss_log(log, path) -> None:
    from .io import atomic_write_text

    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{r['epoch']},{r['train_loss']:.10g},{r['val_loss']:.10g}" for r in log]
    atomic_write_text(path, "\n".join(lines) + "\n")
