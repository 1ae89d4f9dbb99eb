"""Meta-learning training loop over the base/adaptive parameter split.

Every iteration runs four phases in a fixed order:

1. normal train — task loss (classification + depth) on a batch spanning
   all source domains; an Adam step on the base-tagged parameters only.
2. split — the source domains are partitioned at random into simulated
   train domains and one simulated unseen domain.
3. meta cycle — the full loss (task + alignment terms) on the simulated
   train rows yields a gradient for the adaptive parameters; a shadow copy
   takes one plain gradient step; the same loss evaluated on the simulated
   unseen rows *at the shadow point* yields a second gradient. The live
   adaptive parameters then move along the sum of both gradients
   (first-order mode) or along the exact chain-rule direction obtained via
   a finite-difference Hessian-vector product (exact_small mode, tiny
   parameter counts only).
4. the centroid bank folds in the normal-train batch's embeddings.

The meta cycle simulates deployment on an unseen domain: the adaptive
fusion parameters are optimized so that one step of ordinary training
improves performance on a domain that step never saw.

Only normal train touches the base parameters and the normalization
buffers; only the meta cycle touches the adaptive parameters. An optional
per-iteration hash audit enforces this partition at runtime.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import DataBundle
from .losses import (CentroidBank, EmbeddingBatch, cls_loss, depth_loss,
                     ics_loss, idc_loss, update_centroid_bank)
from .model import Network
from .optim import Adam, Sgd
from .tensor import TAG_ADAPTIVE, TAG_BASE, Tensor

log = logging.getLogger(__name__)

META_MODES = ("first_order", "exact_small")
EXACT_SMALL_LIMIT = 50


@dataclass
class TrainConfig:
    beta1: float = 0.001          # base/inner learning rate
    beta2: float = 0.001          # meta learning rate
    lambda1: float = 0.1          # domain-alignment loss weight
    lambda2: float = 0.01         # class-separation loss weight
    gamma: float = 0.9            # centroid momentum
    epochs: int = 1
    batch_per_domain: int = 8
    seed: int = 0
    meta_mode: str = "first_order"
    max_iters: int = 0            # 0 = run all epochs
    eval_every: int = 0           # extra eval cadence; 0 = epoch ends only

    def __post_init__(self):
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise ValueError("beta1 and beta2 must be > 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda weights must be >= 0")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_per_domain < 2 or self.batch_per_domain % 2:
            raise ValueError("batch_per_domain must be even and >= 2 "
                             "(both classes in every domain group)")
        if self.meta_mode not in META_MODES:
            raise ValueError(f"meta_mode must be one of {META_MODES}, "
                             f"got {self.meta_mode!r}")
        if self.max_iters < 0 or self.eval_every < 0:
            raise ValueError("max_iters/eval_every must be >= 0")


@dataclass(frozen=True)
class DomainSplit:
    trn: tuple[int, ...]
    val: tuple[int, ...]


def split_key(seed: int, iteration: int) -> int:
    """Stable scalar key for the per-iteration domain split."""
    return int(np.random.SeedSequence((seed, iteration)).generate_state(1)[0])


def split_domains(domains, key: int) -> DomainSplit:
    """Uniformly random partition with one simulated-unseen domain."""
    ids = sorted(int(d) for d in domains)
    if len(ids) < 2:
        raise ValueError(f"need >= 2 domains to split, got {ids}")
    rng = np.random.default_rng(np.random.SeedSequence((0x5917, key)))
    v = ids[int(rng.integers(len(ids)))]
    return DomainSplit(trn=tuple(d for d in ids if d != v), val=(v,))


# -- batching -----------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray        # [B, 6, S, S]
    labels: np.ndarray        # [B]
    depths: np.ndarray        # [B, 1, h, h]
    domain_ids: np.ndarray    # [B]

    def restrict(self, domains) -> "Batch":
        keep = np.isin(self.domain_ids, list(domains))
        return Batch(self.images[keep], self.labels[keep],
                     self.depths[keep], self.domain_ids[keep])


class DomainSampler:
    """Class-balanced per-domain batch sampler with per-pool reshuffling.

    Each (domain, label) pool cycles through a shuffled permutation;
    exhaustion reshuffles that pool (epoch boundary). Batches stack
    ``batch_per_domain`` rows per domain, half real / half fake.
    """

    def __init__(self, bundle: DataBundle, batch_per_domain: int,
                 rng: np.random.Generator):
        self.bundle = bundle
        self.bpd = batch_per_domain
        self.rng = rng
        self._order: dict[tuple[int, int], np.ndarray] = {}
        self._cursor: dict[tuple[int, int], int] = {}
        for dom, data in bundle.train.items():
            for label in (0, 1):
                idx = np.flatnonzero(data.labels == label)
                if idx.size < batch_per_domain // 2:
                    raise ValueError(f"domain {dom} label {label}: pool of "
                                     f"{idx.size} can't fill half-batches of "
                                     f"{batch_per_domain // 2}")
                key = (dom, label)
                self._order[key] = self.rng.permutation(idx)
                self._cursor[key] = 0

    @property
    def iters_per_epoch(self) -> int:
        half = self.bpd // 2
        return min(len(order) // half for order in self._order.values())

    def _draw(self, dom: int, label: int, n: int) -> np.ndarray:
        key = (dom, label)
        order, cur = self._order[key], self._cursor[key]
        if cur + n > len(order):
            order = self.rng.permutation(order)
            self._order[key] = order
            cur = 0
        self._cursor[key] = cur + n
        return order[cur:cur + n]

    def next_batch(self, domain_ids) -> Batch:
        half = self.bpd // 2
        images, labels, depths, doms = [], [], [], []
        for dom in sorted(domain_ids):
            data = self.bundle.train[dom]
            idx = np.concatenate([self._draw(dom, 1, half),
                                  self._draw(dom, 0, half)])
            images.append(data.images[idx])
            labels.append(data.labels[idx])
            depths.append(data.depths[idx])
            doms.append(np.full(len(idx), dom, dtype=np.int64))
        return Batch(np.concatenate(images), np.concatenate(labels),
                     np.concatenate(depths), np.concatenate(doms))


# -- loss composition -----------------------------------------------------------

def task_loss(trace, batch: Batch) -> Tensor:
    """Sum over batch domains of (classification + depth) losses."""
    acc = None
    for k in sorted(set(batch.domain_ids.tolist())):
        idx = np.flatnonzero(batch.domain_ids == k)
        term = T.add(cls_loss(T.take_rows(trace.logits, idx), batch.labels[idx]),
                     depth_loss(T.take_rows(trace.depth, idx), batch.depths[idx]))
        acc = term if acc is None else T.add(acc, term)
    return acc


def full_loss(trace, batch: Batch, bank: CentroidBank, lambda1: float,
              lambda2: float) -> Tensor:
    """Task loss plus the weighted embedding-alignment terms."""
    loss = task_loss(trace, batch)
    if lambda1 > 0.0 or lambda2 > 0.0:
        emb = EmbeddingBatch(trace.embedding, batch.domain_ids, batch.labels)
        if lambda1 > 0.0:
            loss = T.add(loss, T.mul(idc_loss(emb, bank), lambda1))
        if lambda2 > 0.0:
            loss = T.add(loss, T.mul(ics_loss(emb, bank), lambda2))
    return loss


# -- schedule phases -------------------------------------------------------------

def normal_train_step(model: Network, batch: Batch, opt, opt_params: dict,
                      expected_domains=None):
    """Task-loss step on the optimizer's parameter set; returns (loss, trace).

    The trace is returned so the caller can reuse the embeddings for the
    centroid update without a second forward pass.
    """
    if expected_domains is not None:
        have = set(batch.domain_ids.tolist())
        want = set(int(d) for d in expected_domains)
        if have != want:
            raise ValueError(f"normal train batch must span domains {sorted(want)}, "
                             f"got {sorted(have)}")
    model.params.zero_grad()
    trace = model.forward(batch.images, "train")
    loss = task_loss(trace, batch)
    loss.backward()
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for n, p in opt_params.items()}
    opt.step(opt_params, grads)
    model.apply_constraints()
    return loss.item(), trace


def meta_train_step(model: Network, batch: Batch, bank: CentroidBank,
                    cfg: TrainConfig, trn_domains):
    """Full loss on simulated-train rows; shadow step for adaptive params.

    Returns (loss value, adaptive gradients, shadow values). Live
    parameters and normalization buffers are not modified.
    """
    have = set(batch.domain_ids.tolist())
    extra = have - set(int(d) for d in trn_domains)
    if extra:
        raise ValueError(f"meta-train batch contains non-train domains {sorted(extra)}")
    model.params.zero_grad()
    trace = model.forward(batch.images, "train", update_stats=False)
    loss = full_loss(trace, batch, bank, cfg.lambda1, cfg.lambda2)
    loss.backward()
    grads: dict[str, np.ndarray] = {}
    shadow: dict[str, np.ndarray] = {}
    for name, p in model.params.items(TAG_ADAPTIVE):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        grads[name] = g.copy()
        shadow[name] = p.data - cfg.beta1 * g
    return loss.item(), grads, shadow


def meta_test_loss(model: Network, batch: Batch, bank: CentroidBank,
                   cfg: TrainConfig, shadow: dict, val_domains):
    """Full loss on simulated-unseen rows with shadow parameters swapped in.

    Gradients are taken at the shadow point; live parameter arrays are
    restored bit-exactly before returning.
    """
    have = set(batch.domain_ids.tolist())
    extra = have - set(int(d) for d in val_domains)
    if extra:
        raise ValueError(f"meta-test batch contains non-val domains {sorted(extra)}")
    originals = {n: p.data for n, p in model.params.items(TAG_ADAPTIVE)}
    try:
        for n, p in model.params.items(TAG_ADAPTIVE):
            p.data = shadow[n]
        model.params.zero_grad()
        trace = model.forward(batch.images, "train", update_stats=False)
        loss = full_loss(trace, batch, bank, cfg.lambda1, cfg.lambda2)
        loss.backward()
        grads = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                 for n, p in model.params.items(TAG_ADAPTIVE)}
    finally:
        for n, p in model.params.items(TAG_ADAPTIVE):
            p.data = originals[n]
    return loss.item(), grads


def meta_optimize(params: dict[str, Tensor], grad_trn: dict, grad_val: dict,
                  beta1: float, beta2: float, mode: str = "first_order",
                  grad_fn=None) -> None:
    """Move the adaptive parameters along the combined meta-gradient.

    first_order: p -= beta2 * (g_trn + g_val), treating the shadow-point
    gradient as if taken at the live point. exact_small additionally
    applies the chain-rule factor (I - beta1 * H_trn) to g_val, with the
    Hessian-vector product approximated by central differences over
    ``grad_fn`` (a callable re-evaluating the meta-train gradient at the
    current live parameter values). Only allowed for tiny parameter counts.
    """
    for n, p in params.items():
        if grad_trn[n].shape != p.data.shape or grad_val[n].shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {n}")
    if mode == "first_order":
        for n, p in params.items():
            p.data -= beta2 * (grad_trn[n] + grad_val[n])
        return
    if mode != "exact_small":
        raise ValueError(f"unknown meta mode {mode!r}")
    dim = sum(p.data.size for p in params.values())
    if dim > EXACT_SMALL_LIMIT:
        raise ValueError(f"exact_small permitted only for <= {EXACT_SMALL_LIMIT} "
                         f"adaptive parameters, have {dim}")
    if grad_fn is None:
        raise ValueError("exact_small needs a grad_fn to probe the Hessian")

    theta_mag = max(float(np.abs(p.data).max()) for p in params.values())
    v_mag = max(float(np.abs(g).max()) for g in grad_val.values())
    h = 1e-5 * (1.0 + theta_mag) / max(v_mag, 1e-12)

    originals = {n: p.data for n, p in params.items()}
    try:
        for n, p in params.items():
            p.data = originals[n] + h * grad_val[n]
        g_plus = grad_fn()
        for n, p in params.items():
            p.data = originals[n] - h * grad_val[n]
        g_minus = grad_fn()
    finally:
        for n, p in params.items():
            p.data = originals[n]
    for n, p in params.items():
        hv = (g_plus[n] - g_minus[n]) / (2.0 * h)
        p.data -= beta2 * (grad_trn[n] + grad_val[n] - beta1 * hv)


# -- the full loop ----------------------------------------------------------------

@dataclass
class TrainResult:
    bank: CentroidBank
    iterations: int
    epochs: int
    records: list = field(default_factory=list)


def _digests(params, names) -> dict[str, bytes]:
    return {n: hashlib.blake2b(params[n].data.tobytes(), digest_size=16).digest()
            for n in names}


class ScheduleViolation(RuntimeError):
    """A training phase wrote parameters outside its contract."""


def run_training(model: Network, bundle: DataBundle, cfg: TrainConfig, *,
                 use_meta: bool = True, use_idc: bool = True,
                 use_ics: bool = True, sink=None, eval_fn=None,
                 epoch_fn=None, audit: bool = True) -> TrainResult:
    """Run the full schedule; deterministic given (model seed, cfg, data).

    ``sink`` receives one JSON-serializable record per iteration (and per
    eval); ``eval_fn(model, iteration)`` is called at the configured
    cadence and its result forwarded to the sink; ``epoch_fn(epoch)`` runs
    at each epoch boundary (checkpointing hook). With ``use_meta`` off or
    a model without adaptive parameters, the meta cycle is skipped and
    Adam trains all parameters — plain ERM.
    """
    source_ids = sorted(bundle.train)
    if len(source_ids) < 2:
        raise ValueError(f"need >= 2 source domains, got {source_ids}")

    eff = TrainConfig(**{**cfg.__dict__,
                         "lambda1": cfg.lambda1 if use_idc else 0.0,
                         "lambda2": cfg.lambda2 if use_ics else 0.0})
    meta_on = use_meta and len(model.adaptive_param_names()) > 0

    base_params = dict(model.params.items(TAG_BASE))
    adaptive_params = dict(model.params.items(TAG_ADAPTIVE))
    opt_params = base_params if meta_on else dict(model.params.items())
    opt = Adam(cfg.beta1)

    sampler = DomainSampler(bundle, cfg.batch_per_domain,
                            np.random.default_rng(
                                np.random.SeedSequence((cfg.seed, 0xBA7C))))

    # cold start: the alignment losses need centroids before iteration 0,
    # so seed the bank from a probe batch drawn off a dedicated stream
    bank = CentroidBank(model.cfg.embed_dim, cfg.gamma)
    probe_sampler = DomainSampler(bundle, cfg.batch_per_domain,
                                  np.random.default_rng(
                                      np.random.SeedSequence((cfg.seed, 0xB007))))
    probe = probe_sampler.next_batch(source_ids)
    with T.no_grad():
        probe_trace = model.forward(probe.images, "train", update_stats=False)
    update_centroid_bank(bank, EmbeddingBatch(probe_trace.embedding,
                                              probe.domain_ids, probe.labels))

    ipe = sampler.iters_per_epoch
    total = cfg.epochs * ipe
    if cfg.max_iters:
        total = min(total, cfg.max_iters)

    records: list[dict] = []

    def emit(rec: dict) -> None:
        records.append(rec)
        if sink is not None:
            sink(rec)

    iteration = 0
    for iteration in range(total):
        snap_adaptive = _digests(model.params, adaptive_params) if audit else None

        batch = sampler.next_batch(source_ids)
        l_base, trace = normal_train_step(model, batch, opt, opt_params,
                                          expected_domains=source_ids)

        if audit and meta_on:
            if _digests(model.params, adaptive_params) != snap_adaptive:
                raise ScheduleViolation("normal train modified adaptive params")

        l_trn = l_val = None
        val_dom = None
        split = split_domains(source_ids, split_key(cfg.seed, iteration))
        if meta_on:
            snap_base = _digests(model.params, base_params) if audit else None
            trn_batch = batch.restrict(split.trn)
            val_batch = batch.restrict(split.val)
            val_dom = split.val[0]

            l_trn, g_trn, shadow = meta_train_step(model, trn_batch, bank,
                                                   eff, split.trn)
            l_val, g_val = meta_test_loss(model, val_batch, bank, eff,
                                          shadow, split.val)
            if audit:
                if _digests(model.params, adaptive_params) != snap_adaptive:
                    raise ScheduleViolation("meta train/test leaked into live "
                                            "adaptive params")

            grad_fn = None
            if cfg.meta_mode == "exact_small":
                def grad_fn():
                    _, g, _ = meta_train_step(model, trn_batch, bank, eff,
                                              split.trn)
                    return g
            meta_optimize(adaptive_params, g_trn, g_val, cfg.beta1, cfg.beta2,
                          mode=cfg.meta_mode, grad_fn=grad_fn)
            if audit:
                if _digests(model.params, base_params) != snap_base:
                    raise ScheduleViolation("meta optimize modified base params")

        update_centroid_bank(bank, EmbeddingBatch(trace.embedding.detach(),
                                                  batch.domain_ids, batch.labels))

        epoch = iteration // ipe
        rec = {"schema": 1, "kind": "train", "iteration": iteration,
               "epoch": epoch, "loss_base": l_base, "loss_meta_train": l_trn,
               "loss_meta_val": l_val, "val_domain": val_dom}
        if trace.alphas[0] is not None:
            rec["alpha_mean"] = [float(a.data.mean()) for a in trace.alphas]
        emit(rec)

        boundary = (iteration + 1) % ipe == 0 or iteration + 1 == total
        if eval_fn is not None and (boundary or (cfg.eval_every
                                                 and (iteration + 1) % cfg.eval_every == 0)):
            ev = eval_fn(model, iteration)
            if ev:
                emit({"schema": 1, "kind": "eval", "iteration": iteration, **ev})
        if epoch_fn is not None and boundary:
            epoch_fn(epoch)

    done_epochs = (total + ipe - 1) // ipe if total else 0
    return TrainResult(bank=bank, iterations=total, epochs=done_epochs,
                       records=records)
