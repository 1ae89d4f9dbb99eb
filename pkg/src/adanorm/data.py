"""Procedural multi-domain face-presentation data.

Each sample is a smooth radial "face" blob with per-sample geometry jitter
rendered on a domain-specific background. The class signal is a
high-frequency interference texture superimposed on the blob for fakes —
a spatial-frequency cue. The domain signal is an appearance transform
(per-channel gain/bias, sensor noise, optics blur) applied to the whole
image. Keeping the class cue in the frequency domain and the domain shift
in the color/blur domain makes the two separable in principle, which is
exactly the tradeoff the normalization study needs.

Real samples carry a cosine-dome depth target matching the blob footprint
(max exactly 1); fakes carry an all-zero map. HSV channels are derived
deterministically from RGB, giving the 6-channel network input.

Generation is pure: a sample is fully determined by (spec, label, seed).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

SIDE = 32
DEPTH_SIDE = 8

CACHE_VERSION = 1
_SAMPLE_TAG = 0xFACE


@dataclass(frozen=True)
class DomainSpec:
    """Appearance transform defining one capture domain."""

    id: int
    color_gain: tuple[float, float, float]
    color_bias: tuple[float, float, float]
    blur_sigma: float
    noise_std: float
    background_palette: int

    def __post_init__(self):
        if any(g <= 0 for g in self.color_gain):
            raise ValueError(f"domain {self.id}: color gains must be > 0")
        if self.blur_sigma < 0 or self.noise_std < 0:
            raise ValueError(f"domain {self.id}: blur/noise must be >= 0")

    def to_dict(self) -> dict:
        return {"id": self.id, "color_gain": list(self.color_gain),
                "color_bias": list(self.color_bias),
                "blur_sigma": self.blur_sigma, "noise_std": self.noise_std,
                "background_palette": self.background_palette}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(id=d["id"], color_gain=tuple(d["color_gain"]),
                   color_bias=tuple(d["color_bias"]), blur_sigma=d["blur_sigma"],
                   noise_std=d["noise_std"],
                   background_palette=d["background_palette"])


# Four domains, increasingly far from domain 0's neutral rendering. Domain 3
# is the strongest shift and the default held-out target. Its difficulty is
# deliberately concentrated in the appearance axes (cast, noise): blur only
# nudges past the source range, because Gaussian blur attenuates the class
# cue's frequency band by exp(-2 pi^2 sigma^2 f^2) and a large sigma would
# erase the signal itself rather than shift its style.
DEFAULT_DOMAINS: tuple[DomainSpec, ...] = (
    DomainSpec(0, (1.00, 1.00, 1.00), (0.00, 0.00, 0.00), 0.00, 0.010, 101),
    DomainSpec(1, (1.20, 0.95, 0.75), (0.05, 0.02, -0.04), 0.35, 0.015, 202),
    DomainSpec(2, (0.70, 0.90, 1.15), (-0.05, 0.00, 0.07), 0.60, 0.020, 303),
    DomainSpec(3, (1.40, 1.12, 0.55), (0.10, -0.05, -0.10), 0.65, 0.030, 404),
)


@dataclass
class Sample:
    image: np.ndarray          # [6, S, S] in [0, 1]
    label: int                 # 1 = real, 0 = fake
    domain_id: int
    depth_target: np.ndarray   # [1, h, h] in [0, 1]


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB -> HSV on a [3, S, S] image, hue scaled to [0, 1].

    Inputs outside [0, 1] are clamped (and logged) rather than rejected.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"rgb_to_hsv: expected [3, S, S], got {rgb.shape}")
    if rgb.min() < 0.0 or rgb.max() > 1.0:
        log.warning("rgb_to_hsv: input outside [0,1] (min %.4f max %.4f), clamping",
                    rgb.min(), rgb.max())
        rgb = np.clip(rgb, 0.0, 1.0)
    r, g, b = rgb
    maxc = rgb.max(axis=0)
    minc = rgb.min(axis=0)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0.0, delta / np.where(maxc > 0.0, maxc, 1.0), 0.0)
    h = np.zeros_like(maxc)
    nz = delta > 0.0
    dz = np.where(nz, delta, 1.0)
    rmax = nz & (maxc == r)
    gmax = nz & ~rmax & (maxc == g)
    bmax = nz & ~rmax & ~gmax
    h[rmax] = (((g - b) / dz)[rmax] / 6.0) % 1.0
    h[gmax] = (((b - r) / dz)[gmax] + 2.0) / 6.0
    h[bmax] = (((r - g) / dz)[bmax] + 4.0) / 6.0
    return np.stack([h, s, v])


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def make_sample(spec: DomainSpec, label: int, seed: int,
                side: int = SIDE, depth_side: int = DEPTH_SIDE) -> Sample:
    """Render one sample. Pure in (spec, label, seed, side, depth_side)."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    if side % depth_side:
        raise ValueError(f"depth_side {depth_side} must divide side {side}")
    rng = np.random.default_rng(
        np.random.SeedSequence((_SAMPLE_TAG, spec.id, label, seed)))
    pal_rng = np.random.default_rng(
        np.random.SeedSequence((spec.background_palette,)))
    palette = pal_rng.uniform(0.15, 0.85, size=(3, 3))

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)

    # background: one palette color plus a gentle linear gradient
    color = palette[rng.integers(3)]
    ang = rng.uniform(0.0, 2.0 * np.pi)
    proj = ((xx / (side - 1) - 0.5) * np.cos(ang)
            + (yy / (side - 1) - 0.5) * np.sin(ang))
    grad = rng.uniform(0.0, 0.15)
    canvas = color[:, None, None] + grad * proj[None]

    # face blob: jittered ellipse with a smooth falloff
    cx = side / 2.0 + rng.uniform(-2.0, 2.0)
    cy = side / 2.0 + rng.uniform(-2.0, 2.0)
    radius = rng.uniform(side * 0.28, side * 0.38)
    squash = rng.uniform(0.85, 1.15)
    theta = rng.uniform(0.0, np.pi)
    xr = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    yr = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    dist = np.sqrt((xr / radius) ** 2 + (yr / (radius * squash)) ** 2)
    mask = _smoothstep(1.5 * (1.0 - dist))
    face = np.array([0.75, 0.62, 0.52]) + rng.uniform(-0.06, 0.06, size=3)
    shade = 0.88 + 0.12 * np.cos(np.clip(dist, 0.0, 1.0) * np.pi / 2.0)
    canvas = canvas * (1.0 - mask[None]) + (face[:, None, None] * shade[None]) * mask[None]

    if label == 0:
        # spoof cue: two-component high-frequency interference pattern,
        # luminance-only so the cue lives in frequency space, not color
        amp = rng.uniform(0.10, 0.16)
        pattern = np.zeros((side, side))
        for _ in range(2):
            f = rng.uniform(0.20, 0.30)
            ang_p = rng.uniform(0.0, np.pi)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            pattern += np.sin(2.0 * np.pi * f
                              * (xx * np.cos(ang_p) + yy * np.sin(ang_p)) + phase)
        canvas = canvas + (amp * 0.5) * (pattern * mask)[None]

    # domain transform: gain/bias -> sensor noise -> optics blur -> clip
    gain = np.asarray(spec.color_gain)[:, None, None]
    bias = np.asarray(spec.color_bias)[:, None, None]
    rgb = canvas * gain + bias
    if spec.noise_std > 0.0:
        rgb = rgb + rng.normal(0.0, spec.noise_std, size=rgb.shape)
    if spec.blur_sigma > 0.0:
        rgb = gaussian_filter(rgb, sigma=(0.0, spec.blur_sigma, spec.blur_sigma),
                              mode="nearest")
    rgb = np.clip(rgb, 0.0, 1.0)

    image = np.concatenate([rgb, rgb_to_hsv(rgb)], axis=0)

    if label == 1:
        dome = np.cos(np.clip(dist, 0.0, 1.0) * np.pi / 2.0)
        block = side // depth_side
        small = dome.reshape(depth_side, block, depth_side, block).mean(axis=(1, 3))
        depth = (small / small.max())[None]
    else:
        depth = np.zeros((1, depth_side, depth_side))

    return Sample(image=image, label=label, domain_id=spec.id,
                  depth_target=depth)


# -- protocol and bulk generation ---------------------------------------------

@dataclass(frozen=True)
class SampleRef:
    """Stable identity of one sample in a protocol."""

    domain_id: int
    split: str        # "train" | "test"
    index: int
    label: int
    seed: int

    @property
    def uid(self) -> tuple:
        return (self.domain_id, self.split, self.index)


@dataclass
class Protocol:
    """Leave-one-domain-out split over a set of domain specs."""

    domains: tuple[DomainSpec, ...]
    held_out: int
    train_per_domain: int
    test_per_domain: int
    data_seed: int
    refs: dict = field(default_factory=dict)   # (split, domain_id) -> [SampleRef]

    @property
    def source_ids(self) -> list[int]:
        return [d.id for d in self.domains if d.id != self.held_out]

    @property
    def target_id(self) -> int:
        return self.held_out


def build_protocol(n_domains: int, held_out: int, train_per_domain: int = 2000,
                   test_per_domain: int = 500, data_seed: int = 0,
                   domains: tuple[DomainSpec, ...] | None = None) -> Protocol:
    """Leave-one-domain-out protocol with balanced labels per split."""
    if domains is None:
        if n_domains > len(DEFAULT_DOMAINS):
            raise ValueError(f"only {len(DEFAULT_DOMAINS)} built-in domains, "
                             f"asked for {n_domains}")
        domains = DEFAULT_DOMAINS[:n_domains]
    if len(domains) != n_domains:
        raise ValueError("domain spec count must equal n_domains")
    if n_domains < 3:
        raise ValueError(f"need >= 3 domains for leave-one-out, got {n_domains}")
    ids = [d.id for d in domains]
    if held_out not in ids:
        raise ValueError(f"held_out {held_out} not among domain ids {ids}")
    if train_per_domain < 2 or test_per_domain < 2:
        raise ValueError("need at least 2 samples per domain per split")

    proto = Protocol(domains=tuple(domains), held_out=held_out,
                     train_per_domain=train_per_domain,
                     test_per_domain=test_per_domain, data_seed=data_seed)
    for spec in domains:
        for split, count, code in (("train", train_per_domain, 0),
                                   ("test", test_per_domain, 1)):
            refs = []
            for idx in range(count):
                # alternate labels -> 50% balance within +-1 sample
                label = (idx + 1) % 2
                seed = int(np.random.SeedSequence(
                    (data_seed, spec.id, code, idx)).generate_state(1)[0])
                refs.append(SampleRef(domain_id=spec.id, split=split, index=idx,
                                      label=label, seed=seed))
            proto.refs[(split, spec.id)] = refs
    return proto


@dataclass
class DomainData:
    """All samples of one domain in one split, as dense arrays."""

    domain_id: int
    images: np.ndarray     # [M, 6, S, S]
    labels: np.ndarray     # [M]
    depths: np.ndarray     # [M, 1, h, h]

    def __len__(self) -> int:
        return len(self.labels)


def generate_domain(proto: Protocol, split: str, domain_id: int,
                    side: int = SIDE, depth_side: int = DEPTH_SIDE) -> DomainData:
    refs = proto.refs[(split, domain_id)]
    spec = next(d for d in proto.domains if d.id == domain_id)
    images = np.empty((len(refs), 6, side, side))
    labels = np.empty(len(refs), dtype=np.int64)
    depths = np.empty((len(refs), 1, depth_side, depth_side))
    for i, ref in enumerate(refs):
        s = make_sample(spec, ref.label, ref.seed, side=side, depth_side=depth_side)
        images[i] = s.image
        labels[i] = s.label
        depths[i] = s.depth_target
    return DomainData(domain_id=domain_id, images=images, labels=labels,
                      depths=depths)


@dataclass
class DataBundle:
    """Sources' train data plus the held-out domain's test data."""

    protocol: Protocol
    train: dict                # domain_id -> DomainData (source domains)
    test: DomainData           # held-out target
    source_test: dict = field(default_factory=dict)


def generate_bundle(proto: Protocol, side: int = SIDE,
                    depth_side: int = DEPTH_SIDE) -> DataBundle:
    train = {k: generate_domain(proto, "train", k, side, depth_side)
             for k in proto.source_ids}
    test = generate_domain(proto, "test", proto.target_id, side, depth_side)
    return DataBundle(protocol=proto, train=train, test=test)


# -- on-disk cache ---------------------------------------------------------------

_HEADER_KEYS = {"version", "spec", "split", "count", "side", "depth_side",
                "data_seed"}


def save_domain_cache(path, proto: Protocol, split: str, data: DomainData) -> None:
    spec = next(d for d in proto.domains if d.id == data.domain_id)
    side = data.images.shape[-1]
    depth_side = data.depths.shape[-1]
    header = {"version": CACHE_VERSION, "spec": spec.to_dict(), "split": split,
              "count": len(data), "side": side, "depth_side": depth_side,
              "data_seed": proto.data_seed}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(data.images.astype("<f8").tobytes())
        fh.write(data.labels.astype("<i8").tobytes())
        fh.write(data.depths.astype("<f8").tobytes())


def load_domain_cache(path) -> tuple[dict, DomainData]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        unknown = set(header) - _HEADER_KEYS
        if unknown:
            raise ValueError(f"cache {path}: unknown header keys {sorted(unknown)}")
        if header.get("version") != CACHE_VERSION:
            raise ValueError(f"cache {path}: unsupported version "
                             f"{header.get('version')}")
        m, s, h = header["count"], header["side"], header["depth_side"]
        images = np.frombuffer(fh.read(m * 6 * s * s * 8), dtype="<f8") \
            .reshape(m, 6, s, s).copy()
        labels = np.frombuffer(fh.read(m * 8), dtype="<i8").copy()
        depths = np.frombuffer(fh.read(m * h * h * 8), dtype="<f8") \
            .reshape(m, 1, h, h).copy()
    return header, DomainData(domain_id=header["spec"]["id"], images=images,
                              labels=labels, depths=depths)
