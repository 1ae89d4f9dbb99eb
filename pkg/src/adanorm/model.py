"""The anti-spoofing network: conv blocks, depth regressor, liveness head.

Each block is conv3x3 -> normalization -> relu -> 2x2 average pooling. The
embedding is the global average pool of the last feature map; a single
linear logit decides live vs spoof, and a small convolutional head
upsamples the last map (depth-to-space) into a face-depth estimate that
serves as an auxiliary regression target — real faces have shape, spoof
presentations are flat.

Parameters are registered in a ParamStore under two tags: everything the
adaptive fusion layers own is "adaptive", the rest is "base". The
meta-schedule in the trainer relies on that split.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .norms import NormLayer, NormVariant
from .tensor import TAG_ADAPTIVE, TAG_BASE, ParamStore, Tensor


@dataclass
class NetworkConfig:
    in_channels: int = 6          # RGB + HSV
    widths: tuple[int, ...] = (16, 32, 64)
    variant: NormVariant = NormVariant.ADAPTIVE
    input_side: int = 32
    depth_map_side: int = 8

    def __post_init__(self):
        if isinstance(self.variant, str):
            self.variant = NormVariant.from_str(self.variant)
        self.widths = tuple(int(w) for w in self.widths)
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if len(self.widths) < 2:
            raise ValueError(f"need at least 2 blocks, got widths={self.widths}")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        n = len(self.widths)
        if self.input_side % (1 << n):
            raise ValueError(f"input_side {self.input_side} not divisible by "
                             f"2^{n} (one pooling per block)")
        final = self.input_side >> n
        if final < 3:
            raise ValueError(f"input_side {self.input_side} too small for "
                             f"{n} blocks: the depth head needs a final "
                             f"feature map of at least 3x3, got {final}x{final}")
        if self.depth_map_side % final:
            raise ValueError(f"depth_map_side {self.depth_map_side} must be a "
                             f"multiple of the final feature side {final}")

    @property
    def final_side(self) -> int:
        return self.input_side >> len(self.widths)

    @property
    def upsample(self) -> int:
        return self.depth_map_side // self.final_side

    @property
    def embed_dim(self) -> int:
        return self.widths[-1]


@dataclass
class ForwardTrace:
    """Everything one forward pass produces."""

    embedding: Tensor                    # [N, D]
    logits: Tensor                       # [N]
    depth: Tensor                        # [N, 1, s, s]
    alphas: list = field(default_factory=list)   # per block, None unless adaptive


class Network:
    """Feature extractor plus depth and liveness heads."""

    def __init__(self, cfg: NetworkConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.params = ParamStore()
        self.norm_layers: list[NormLayer] = []
        rng = np.random.default_rng(np.random.SeedSequence([seed]))

        c_prev = cfg.in_channels
        for i, c in enumerate(cfg.widths):
            fan_in = c_prev * 9
            self.params.add(f"block{i}.conv",
                            rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c, c_prev, 3, 3)),
                            TAG_BASE)
            self.norm_layers.append(
                NormLayer(cfg.variant, c, self.params, f"block{i}.norm", rng))
            c_prev = c

        d = cfg.embed_dim
        bound = 1.0 / np.sqrt(d)
        self.params.add("cls.weight", rng.uniform(-bound, bound, size=(d, 1)), TAG_BASE)
        self.params.add("cls.bias", np.zeros(1), TAG_BASE)
        r = cfg.upsample
        fan_in = c_prev * 9
        self.params.add("depth.conv",
                        rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(r * r, c_prev, 3, 3)),
                        TAG_BASE)
        self.params.add("depth.bias", np.zeros(r * r), TAG_BASE)

    # -- forward ------------------------------------------------------------

    def forward(self, x, mode: str, update_stats: bool | None = None) -> ForwardTrace:
        """Run the network; ``update_stats`` defaults to True in train mode."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if update_stats is None:
            update_stats = mode == "train"
        if not isinstance(x, Tensor):
            x = Tensor(x)
        n, c, h, w = x.shape
        s = self.cfg.input_side
        if c != self.cfg.in_channels or h != s or w != s:
            raise ValueError(f"expected input [N,{self.cfg.in_channels},{s},{s}], "
                             f"got {x.shape}")

        alphas = []
        hmap = x
        for i, width in enumerate(self.cfg.widths):
            hmap = T.conv2d(hmap, self.params[f"block{i}.conv"], stride=1, pad=1)
            hmap, alpha = self.norm_layers[i].forward(hmap, mode, update_stats)
            alphas.append(alpha)
            hmap = T.relu(hmap)
            hmap = T.avg_pool2(hmap)

        embedding = T.global_avg_pool(hmap)
        logit2d = T.add(T.matmul(embedding, self.params["cls.weight"]),
                        T.expand_rows(self.params["cls.bias"], n))
        logits = T.reshape(logit2d, (n,))

        r = self.cfg.upsample
        dmap = T.conv2d(hmap, self.params["depth.conv"], stride=1, pad=1)
        fh = self.cfg.final_side
        dmap = T.add(dmap, T.expand_c(self.params["depth.bias"], n, fh, fh))
        if r > 1:
            dmap = T.pixel_shuffle(dmap, r)
        depth = T.sigmoid(dmap)

        return ForwardTrace(embedding=embedding, logits=logits, depth=depth,
                            alphas=alphas)

    # -- state --------------------------------------------------------------

    def apply_constraints(self) -> None:
        for layer in self.norm_layers:
            layer.apply_constraints()

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self.norm_layers:
            out.update(layer.buffers())
        return out

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        for layer in self.norm_layers:
            layer.load_buffers(values)

    def adaptive_param_names(self) -> list[str]:
        return self.params.names(TAG_ADAPTIVE)

    def base_param_names(self) -> list[str]:
        return self.params.names(TAG_BASE)
