"""Training losses: centroid-based alignment terms, depth and classification.

Two auxiliary losses shape the embedding space using momentum-averaged
centroids held in a :class:`CentroidBank`:

* ``idc_loss`` pulls each domain's embeddings toward that domain's own
  centroid while pushing them toward the *other* domains' centroids with
  equal weight — inter-domain gaps shrink, so domain identity stops being
  linearly readable.
* ``ics_loss`` compacts real-face embeddings around the real centroid and
  widens the real/fake margin; fake embeddings are pushed away from the
  real centroid but never compacted (spoof appearance is too heterogeneous
  to share one tight cluster).

Centroids enter every loss as constants: gradients flow only into the
current batch's embeddings, never into the bank.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

REAL, FAKE = "real", "fake"
REAL_LABEL = 1


@dataclass
class EmbeddingBatch:
    """Embeddings with their domain ids and liveness labels (1 = real)."""

    features: Tensor            # [N, D]
    domain_ids: np.ndarray      # [N] ints
    labels: np.ndarray          # [N] ints in {0, 1}

    def __post_init__(self):
        self.domain_ids = np.asarray(self.domain_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.features.shape[0]
        if self.features.data.ndim != 2:
            raise ValueError(f"features must be [N, D], got {self.features.shape}")
        if self.domain_ids.shape != (n,) or self.labels.shape != (n,):
            raise ValueError("domain_ids and labels must both have length N")
        bad = set(np.unique(self.labels)) - {0, 1}
        if bad:
            raise ValueError(f"labels must be 0/1, found {sorted(bad)}")

    @property
    def domains(self) -> list[int]:
        return sorted(int(d) for d in np.unique(self.domain_ids))

    def rows_for_domain(self, k: int) -> Tensor:
        idx = np.flatnonzero(self.domain_ids == k)
        if idx.size == 0:
            raise ValueError(f"no samples for domain {k} in batch")
        return T.take_rows(self.features, idx)

    def rows_for_label(self, label: int) -> Tensor:
        idx = np.flatnonzero(self.labels == label)
        if idx.size == 0:
            raise ValueError(f"no samples with label {label} in batch")
        return T.take_rows(self.features, idx)


class CentroidBank:
    """Momentum-averaged per-domain and per-class embedding centroids.

    First update of a key adopts the local centroid exactly; afterwards
    ``c = gamma * c + (1 - gamma) * local``. Stored values are plain
    arrays, deliberately outside any gradient tape.
    """

    def __init__(self, dim: int, gamma: float = 0.9):
        if not 0.0 <= gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {gamma}")
        self.dim = dim
        self.gamma = gamma
        self.domain: dict[int, np.ndarray] = {}
        self.cls: dict[str, np.ndarray] = {}

    def _fold(self, store: dict, key, local: np.ndarray) -> None:
        if key in store:
            store[key] = self.gamma * store[key] + (1.0 - self.gamma) * local
        else:
            store[key] = local.copy()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in sorted(self.domain):
            out[f"centroid.domain.{k}"] = self.domain[k]
        for c in (FAKE, REAL):
            if c in self.cls:
                out[f"centroid.cls.{c}"] = self.cls[c]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            if name.startswith("centroid.domain."):
                self.domain[int(name.rsplit(".", 1)[1])] = np.array(arr)
            elif name.startswith("centroid.cls."):
                self.cls[name.rsplit(".", 1)[1]] = np.array(arr)


def update_centroid_bank(bank: CentroidBank, batch: EmbeddingBatch) -> list[str]:
    """Fold the batch's local centroids into the bank; returns updated keys.

    Groups absent from the batch (a missing domain or a single-class batch)
    are skipped and reported at debug level — their centroids keep their
    previous value.
    """
    feats = batch.features.data
    if feats.shape[1] != bank.dim:
        raise ValueError(f"embedding dim {feats.shape[1]} != bank dim {bank.dim}")
    updated: list[str] = []
    for k in batch.domains:
        bank._fold(bank.domain, k, feats[batch.domain_ids == k].mean(axis=0))
        updated.append(f"domain.{k}")
    for name, label in ((FAKE, 0), (REAL, 1)):
        rows = feats[batch.labels == label]
        if rows.shape[0] == 0:
            log.debug("centroid update: no %s samples in batch, key skipped", name)
            continue
        bank._fold(bank.cls, name, rows.mean(axis=0))
        updated.append(f"cls.{name}")
    return updated


def _mean_sq_dist(rows: Tensor, centroid: np.ndarray) -> Tensor:
    """(1/M) * sum_i ||row_i - centroid||^2 as a tape node."""
    m = rows.shape[0]
    diff = T.sub(rows, T.expand_rows(Tensor(centroid), m))
    return T.div(T.tsum(T.square(diff)), float(m))


def intra_domain_distance(batch: EmbeddingBatch, bank: CentroidBank, k: int) -> Tensor:
    """Mean squared distance of domain-k embeddings to their own centroid."""
    if k not in bank.domain:
        raise ValueError(f"domain {k} has no centroid in the bank")
    return _mean_sq_dist(batch.rows_for_domain(k), bank.domain[k])


def inter_domain_distance(batch: EmbeddingBatch, bank: CentroidBank, k: int) -> Tensor:
    """Mean squared distance of domain-k embeddings to the other centroids,
    averaged over the K-1 other domains registered in the bank."""
    others = [m for m in sorted(bank.domain) if m != k]
    if not others:
        raise ValueError("inter_domain_distance needs >= 2 domains in the bank")
    rows = batch.rows_for_domain(k)
    acc = None
    for m in others:
        term = _mean_sq_dist(rows, bank.domain[m])
        acc = term if acc is None else T.add(acc, term)
    return T.div(acc, float(len(others)))


def idc_loss(batch: EmbeddingBatch, bank: CentroidBank) -> Tensor:
    """Sum over batch domains of (inter-domain - intra-domain) distance.

    Minimizing drives embeddings of every domain toward all centroids
    equally, erasing domain-specific structure.
    """
    if len(bank.domain) < 2:
        raise ValueError("idc_loss needs >= 2 domains in the bank")
    missing = [k for k in batch.domains if k not in bank.domain]
    if missing:
        raise ValueError(f"batch domains {missing} missing from the bank")
    acc = None
    for k in batch.domains:
        term = T.sub(inter_domain_distance(batch, bank, k),
                     intra_domain_distance(batch, bank, k))
        acc = term if acc is None else T.add(acc, term)
    return acc


def ics_loss(batch: EmbeddingBatch, bank: CentroidBank) -> Tensor:
    """real-to-real compactness minus both real/fake cross distances.

    No fake-to-fake term: spoof embeddings are repelled from the real
    centroid but never clustered.
    """
    for c in (REAL, FAKE):
        if c not in bank.cls:
            raise ValueError(f"class centroid {c!r} missing from the bank")
    real_rows = batch.rows_for_label(1)
    fake_rows = batch.rows_for_label(0)
    d_rr = _mean_sq_dist(real_rows, bank.cls[REAL])
    d_rf = _mean_sq_dist(real_rows, bank.cls[FAKE])
    d_fr = _mean_sq_dist(fake_rows, bank.cls[REAL])
    return T.sub(d_rr, T.add(d_rf, d_fr))


def depth_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Squared error summed per map, mean over the batch."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"depth_loss: shape mismatch {pred.shape} vs {target.shape}")
    n = pred.shape[0]
    diff = T.sub(pred, Tensor(target))
    return T.div(T.tsum(T.square(diff)), float(n))


def cls_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Binary cross-entropy on logits, mean-reduced.

    Computed as softplus(z) - z*y, which is exact and finite for any
    logit magnitude.
    """
    labels = np.asarray(labels)
    if logits.data.ndim != 1:
        raise ValueError(f"cls_loss: logits must be [N], got {logits.shape}")
    if labels.shape != logits.shape:
        raise ValueError("cls_loss: labels must match logits length")
    bad = set(np.unique(labels)) - {0, 1}
    if bad:
        raise ValueError(f"cls_loss: labels must be 0/1, found {sorted(bad)}")
    y = Tensor(labels.astype(np.float64))
    return T.tmean(T.sub(T.softplus(logits), T.mul(logits, y)))
