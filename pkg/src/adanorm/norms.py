"""Normalization layers: batch, instance, and learned adaptive fusion.

The adaptive layer normalizes its input twice (batch statistics and
per-sample instance statistics), then mixes the two with per-channel,
per-sample balance factors predicted from the input's own channel means:

    s      = spatial mean of x                  [N, C]
    z      = relu(s @ W.T)                      [N, d]   bottleneck, d = max(C/8, 4)
    b, i   = sigmoid(z @ Wb.T), sigmoid(z @ Wi.T)  [N, C]
    alpha  = b / (b + i)
    y      = alpha * x_bn + (1 - alpha) * x_in, then per-channel affine

Both gate matrices start at zero, so alpha is exactly 0.5 everywhere at
initialization and the layer begins as an even mix. The fixed-mix, BIN and
IBN variants exist as baselines for the normalization comparison.
"""

from __future__ import annotations

import enum

import numpy as np

from . import tensor as T
from .tensor import TAG_ADAPTIVE, TAG_BASE, ParamStore, Tensor

EPS = 1e-5
BN_MOMENTUM = 0.9   # keep-fraction of the running statistic


class NormVariant(enum.Enum):
    BN = "bn"
    IN = "in"
    IN_BN_HALF = "in_bn_half"
    BIN = "bin"
    IBN = "ibn"
    ADAPTIVE = "adaptive"

    @classmethod
    def from_str(cls, s: str) -> "NormVariant":
        try:
            return cls(s.strip().lower())
        except ValueError:
            raise ValueError(f"unknown norm variant {s!r}; expected one of "
                             f"{[v.value for v in cls]}") from None


class BnState:
    """Running mean/variance buffers for batch normalization."""

    def __init__(self, channels: int, eps: float = EPS, momentum: float = BN_MOMENTUM):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)


def batch_norm(x: Tensor, state: BnState, mode: str,
               update_stats: bool = True) -> Tensor:
    """Per-channel normalization; batch statistics in train, running in eval.

    Train mode uses biased variance over (N, H, W) and needs N >= 2; the
    running buffers are folded as r = momentum * r + (1-momentum) * batch.
    """
    if x.data.ndim != 4:
        raise ValueError(f"batch_norm: input must be [N,C,H,W], got {x.shape}")
    if x.shape[1] != state.channels:
        raise ValueError(f"batch_norm: channel axis (1) is {x.shape[1]}, "
                         f"state holds {state.channels}")
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch_norm: train mode needs N >= 2 samples")
        if update_stats:
            m = state.momentum
            state.running_mean = m * state.running_mean + (1 - m) * x.data.mean(axis=(0, 2, 3))
            state.running_var = m * state.running_var + (1 - m) * x.data.var(axis=(0, 2, 3))
        return T.normalize(x, (0, 2, 3), state.eps)
    if mode == "eval":
        n, _, h, w = x.shape
        mu = T.expand_c(Tensor(state.running_mean), n, h, w)
        inv = T.expand_c(Tensor(1.0 / np.sqrt(state.running_var + state.eps)), n, h, w)
        return T.mul(T.sub(x, mu), inv)
    raise ValueError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")


def instance_norm(x: Tensor, eps: float = EPS) -> Tensor:
    """Per-sample-per-channel normalization over the spatial plane."""
    if x.data.ndim != 4:
        raise ValueError(f"instance_norm: input must be [N,C,H,W], got {x.shape}")
    if x.shape[2] * x.shape[3] < 2:
        raise ValueError("instance_norm: needs at least 2 spatial positions")
    return T.normalize(x, (2, 3), eps)


# -- adaptive fusion pipeline --------------------------------------------------

def channel_statistics(x: Tensor) -> Tensor:
    """Spatial mean per channel, [N,C,H,W] -> [N,C]."""
    return T.global_avg_pool(x)


def compact_descriptor(s: Tensor, w: Tensor) -> Tensor:
    """relu(s @ W.T) with W [d, C]: squeeze channel means to d dims."""
    return T.relu(T.matmul(s, T.transpose(w)))


def branch_gates(z: Tensor, w_b: Tensor, w_i: Tensor) -> tuple[Tensor, Tensor]:
    """Two sigmoid gates in (0,1)^[N,C], one per normalization branch."""
    return (T.sigmoid(T.matmul(z, T.transpose(w_b))),
            T.sigmoid(T.matmul(z, T.transpose(w_i))))


def balance_factors(b: Tensor, i: Tensor) -> Tensor:
    """alpha = b / (b + i); gates are positive so this stays in (0, 1)."""
    return T.div(b, T.add(b, i))


def fuse_normalized(x_bn: Tensor, x_in: Tensor, alpha: Tensor,
                    scale: Tensor, shift: Tensor) -> Tensor:
    """alpha-blend the two branches, then shared per-channel affine."""
    n, c, h, w = x_bn.shape
    a = T.expand_nc(alpha, h, w)
    y = T.add(T.mul(a, x_bn), T.mul(1.0 - a, x_in))
    return T.add(T.mul(y, T.expand_c(scale, n, h, w)),
                 T.expand_c(shift, n, h, w))


class NormLayer:
    """One per-block normalization layer of a chosen variant.

    Trainable tensors are registered in the given ParamStore under
    ``{prefix}.*``; adaptive-fusion parameters carry the "adaptive" tag,
    everything else "base". Running statistics live in plain numpy buffers
    exposed via :meth:`buffers`.
    """

    def __init__(self, variant: NormVariant, channels: int,
                 params: ParamStore, prefix: str, rng: np.random.Generator):
        self.variant = variant
        self.channels = channels
        self.prefix = prefix
        self.bn: BnState | None = None
        self.d = 0

        affine_tag = TAG_ADAPTIVE if variant is NormVariant.ADAPTIVE else TAG_BASE
        self.scale = params.add(f"{prefix}.scale", np.ones(channels), affine_tag)
        self.shift = params.add(f"{prefix}.shift", np.zeros(channels), affine_tag)

        if variant is NormVariant.IBN:
            if channels % 2:
                raise ValueError(f"IBN needs an even channel count, got {channels}")
            self.bn = BnState(channels - channels // 2)
        elif variant is not NormVariant.IN:
            self.bn = BnState(channels)

        if variant is NormVariant.BIN:
            self.mix = params.add(f"{prefix}.mix", np.full(channels, 0.5), TAG_BASE)
        if variant is NormVariant.ADAPTIVE:
            self.d = max(channels // 8, 4)
            bound = 1.0 / np.sqrt(channels)
            self.w = params.add(f"{prefix}.w",
                                rng.uniform(-bound, bound, size=(self.d, channels)),
                                TAG_ADAPTIVE)
            self.w_b = params.add(f"{prefix}.w_b", np.zeros((channels, self.d)),
                                  TAG_ADAPTIVE)
            self.w_i = params.add(f"{prefix}.w_i", np.zeros((channels, self.d)),
                                  TAG_ADAPTIVE)

    # -- forward ----------------------------------------------------------

    def forward(self, x: Tensor, mode: str,
                update_stats: bool = True) -> tuple[Tensor, Tensor | None]:
        """Returns (normalized output, balance factors or None)."""
        if x.shape[1] != self.channels:
            raise ValueError(f"{self.prefix}: channel axis (1) is {x.shape[1]}, "
                             f"layer has {self.channels}")
        v = self.variant
        if v is NormVariant.BN:
            return self._affine(batch_norm(x, self.bn, mode, update_stats)), None
        if v is NormVariant.IN:
            return self._affine(instance_norm(x)), None
        if v is NormVariant.IN_BN_HALF:
            y = T.add(T.mul(batch_norm(x, self.bn, mode, update_stats), 0.5),
                      T.mul(instance_norm(x), 0.5))
            return self._affine(y), None
        if v is NormVariant.BIN:
            n, _, h, w = x.shape
            rho = T.expand_c(self.mix, n, h, w)
            y = T.add(T.mul(rho, batch_norm(x, self.bn, mode, update_stats)),
                      T.mul(1.0 - rho, instance_norm(x)))
            return self._affine(y), None
        if v is NormVariant.IBN:
            half = self.channels // 2
            front = instance_norm(T.narrow(x, 1, 0, half))
            back = batch_norm(T.narrow(x, 1, half, self.channels - half),
                              self.bn, mode, update_stats)
            return self._affine(T.concat([front, back], axis=1)), None
        # adaptive fusion
        x_bn = batch_norm(x, self.bn, mode, update_stats)
        x_in = instance_norm(x)
        s = channel_statistics(x)
        z = compact_descriptor(s, self.w)
        b, i = branch_gates(z, self.w_b, self.w_i)
        alpha = balance_factors(b, i)
        return fuse_normalized(x_bn, x_in, alpha, self.scale, self.shift), alpha

    def _affine(self, y: Tensor) -> Tensor:
        n, _, h, w = y.shape
        return T.add(T.mul(y, T.expand_c(self.scale, n, h, w)),
                     T.expand_c(self.shift, n, h, w))

    # -- state ------------------------------------------------------------

    def apply_constraints(self) -> None:
        """Post-step projections (BIN mix weights clipped to [0,1])."""
        if self.variant is NormVariant.BIN:
            np.clip(self.mix.data, 0.0, 1.0, out=self.mix.data)

    def buffers(self) -> dict[str, np.ndarray]:
        if self.bn is None:
            return {}
        return {f"{self.prefix}.running_mean": self.bn.running_mean,
                f"{self.prefix}.running_var": self.bn.running_var}

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        if self.bn is None:
            return
        self.bn.running_mean = np.array(values[f"{self.prefix}.running_mean"])
        self.bn.running_var = np.array(values[f"{self.prefix}.running_var"])
