"""Experiment configuration, the end-to-end runner, and analysis exports.

A run is fully specified by an INI-style config file with four sections
(network, train, data, ablation); every key has a default, unknown keys
are rejected, and the canonical JSON form of the config is hashed into
every artifact so reports and checkpoints can be matched to the settings
that produced them.

``run_experiment`` owns its output directory: it trains, evaluates the
liveness scores on the held-out domain, and writes

    report.json     metrics + scores + config (byte-stable)
    metrics.jsonl   one JSON object per training iteration / eval point
    alpha.csv       balance-factor statistics (adaptive variant only)
    checkpoint.bin  parameters, buffers, centroid bank
    embeddings.csv  optional, for external projection tools

A failure at any stage leaves the artifacts written so far in place and
drops a FAILED marker naming the stage.

Reported numbers use the evaluation set's own error-rate crossing point
as the decision threshold (see metrics module notes) — flattering but
conventional, and stated in the report itself.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .data import (DataBundle, DomainData, build_protocol, generate_bundle)
from .metrics import eer_threshold, hter, roc_auc
from .model import Network, NetworkConfig
from .norms import NormVariant
from .trainer import TrainConfig, run_training

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
ABLATION_VARIANTS = ("bn", "in", "in_bn_half", "bin", "ibn", "adaptive")


class ConfigError(ValueError):
    """The config file (or flag combination) cannot specify a run."""


@dataclass
class DataConfig:
    n_domains: int = 4
    held_out: int = 3
    train_per_domain: int = 2000
    test_per_domain: int = 500
    data_seed: int = 0

    def __post_init__(self):
        if self.n_domains < 3:
            raise ConfigError(f"n_domains must be >= 3, got {self.n_domains}")
        if not 0 <= self.held_out < self.n_domains:
            raise ConfigError(f"held_out {self.held_out} outside "
                              f"0..{self.n_domains - 1}")


@dataclass
class AblationConfig:
    use_meta: bool = True
    use_idc: bool = True
    use_ics: bool = True


@dataclass
class ExperimentConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        return {
            "network": {"in_channels": self.network.in_channels,
                        "widths": list(self.network.widths),
                        "variant": self.network.variant.value,
                        "input_side": self.network.input_side,
                        "depth_map_side": self.network.depth_map_side},
            "train": dict(self.train.__dict__),
            "data": dict(self.data.__dict__),
            "ablation": dict(self.ablation.__dict__),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.blake2b(blob, digest_size=16).hexdigest()


# -- INI parsing -----------------------------------------------------------------

def _parse_widths(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in raw.replace(" ", "").split(",") if tok)
    except ValueError:
        raise ConfigError(f"widths must be comma-separated ints, got {raw!r}")


_SCHEMA = {
    "network": {"in_channels": int, "widths": _parse_widths, "variant": str,
                "input_side": int, "depth_map_side": int},
    "train": {"beta1": float, "beta2": float, "lambda1": float,
              "lambda2": float, "gamma": float, "epochs": int,
              "batch_per_domain": int, "seed": int, "meta_mode": str,
              "max_iters": int, "eval_every": int},
    "data": {"n_domains": int, "held_out": int, "train_per_domain": int,
             "test_per_domain": int, "data_seed": int},
    "ablation": {"use_meta": bool, "use_idc": bool, "use_ics": bool},
}

_BOOLS = {"true": True, "1": True, "yes": True, "on": True,
          "false": False, "0": False, "no": False, "off": False}


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config is not valid INI: {e}") from e

    unknown = set(cp.sections()) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")

    values: dict[str, dict] = {}
    for section, keys in _SCHEMA.items():
        got: dict = {}
        if cp.has_section(section):
            extra = set(cp[section]) - set(keys)
            if extra:
                raise ConfigError(f"[{section}] has unknown keys {sorted(extra)}")
            for key, conv in keys.items():
                if key not in cp[section]:
                    continue
                raw = cp[section][key].strip()
                if conv is bool:
                    if raw.lower() not in _BOOLS:
                        raise ConfigError(f"[{section}] {key} = {raw!r} is not "
                                          f"a boolean")
                    got[key] = _BOOLS[raw.lower()]
                else:
                    try:
                        got[key] = conv(raw)
                    except ConfigError:
                        raise
                    except ValueError:
                        raise ConfigError(f"[{section}] {key} = {raw!r}: "
                                          f"expected {conv.__name__}")
        values[section] = got

    try:
        return ExperimentConfig(network=NetworkConfig(**values["network"]),
                                train=TrainConfig(**values["train"]),
                                data=DataConfig(**values["data"]),
                                ablation=AblationConfig(**values["ablation"]))
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def default_config_text() -> str:
    """A config file listing every key at its default value."""
    cfg = ExperimentConfig()
    d = cfg.to_dict()
    d["network"]["widths"] = ",".join(str(w) for w in d["network"]["widths"])
    lines = []
    for section in ("network", "train", "data", "ablation"):
        lines.append(f"[{section}]")
        for key, val in d[section].items():
            if isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)


# -- evaluation --------------------------------------------------------------------

def liveness_scores(model: Network, images: np.ndarray,
                    batch: int = 64) -> np.ndarray:
    """Sigmoid of the classifier logit, computed in eval mode."""
    out = []
    with T.no_grad():
        for lo in range(0, len(images), batch):
            trace = model.forward(images[lo:lo + batch], "eval")
            out.append(1.0 / (1.0 + np.exp(-trace.logits.data)))
    return np.concatenate(out) if out else np.empty(0)


def alpha_layer_means(model: Network, images: np.ndarray,
                      batch: int = 64) -> list[float]:
    """Mean balance factor per block over the given images (eval mode)."""
    if model.cfg.variant is not NormVariant.ADAPTIVE:
        return []
    sums = np.zeros(len(model.cfg.widths))
    n = 0
    with T.no_grad():
        for lo in range(0, len(images), batch):
            trace = model.forward(images[lo:lo + batch], "eval")
            rows = len(trace.alphas[0].data)
            sums += [a.data.mean() * rows for a in trace.alphas]
            n += rows
    return [float(s / n) for s in sums]


@dataclass
class MetricsReport:
    hter: float
    auc: float
    eer_threshold: float
    far: float
    frr: float
    per_layer_alpha_mean: list
    config_hash: str
    seed: int
    iteration: int
    scores: list
    labels: list

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, "hter": self.hter, "auc": self.auc,
                "eer_threshold": self.eer_threshold, "far": self.far,
                "frr": self.frr,
                "per_layer_alpha_mean": self.per_layer_alpha_mean,
                "config_hash": self.config_hash, "seed": self.seed,
                "iteration": self.iteration,
                "threshold_policy": "error-rate crossing on the evaluation set",
                "scores": self.scores, "labels": self.labels}


def evaluate_model(model: Network, test: DomainData, config_hash: str,
                   seed: int, iteration: int) -> MetricsReport:
    scores = liveness_scores(model, test.images)
    labels = test.labels
    thr, far, frr = eer_threshold(scores, labels)
    return MetricsReport(
        hter=hter(scores, labels, thr), auc=roc_auc(scores, labels),
        eer_threshold=thr, far=far, frr=frr,
        per_layer_alpha_mean=alpha_layer_means(model, test.images),
        config_hash=config_hash, seed=seed, iteration=iteration,
        scores=[float(s) for s in scores],
        labels=[int(x) for x in labels])


# -- analysis exports ---------------------------------------------------------------

def alpha_statistics_rows(model: Network, images: np.ndarray) -> list[list]:
    """Balance-factor statistics for CSV export.

    One summary row per (block, channel) with the mean and variance of
    the factor across the probe images, then per-image rows for each
    block's most sample-sensitive channel (highest variance) so
    per-sample adaptivity is visible without exporting everything.
    """
    if model.cfg.variant is not NormVariant.ADAPTIVE:
        raise ConfigError("balance-factor export needs the adaptive variant, "
                          f"model uses {model.cfg.variant.value!r}")
    with T.no_grad():
        trace = model.forward(images, "eval")
    rows: list[list] = []
    picks: list[tuple[int, int]] = []
    for b, alpha in enumerate(trace.alphas):
        a = alpha.data                      # [N, C]
        var = a.var(axis=0)
        for c in range(a.shape[1]):
            rows.append(["channel", b, c, "", repr(float(var[c])),
                         repr(float(a[:, c].mean()))])
        picks.append((b, int(var.argmax())))
    for b, c in picks:
        a = trace.alphas[b].data
        for i in range(a.shape[0]):
            rows.append(["sample", b, c, i, "", repr(float(a[i, c]))])
    return rows


def write_alpha_csv(path, model: Network, images: np.ndarray) -> int:
    rows = alpha_statistics_rows(model, images)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "block", "channel", "sample", "variance", "value"])
        w.writerows(rows)
    return len(rows)


def write_embeddings_csv(path, model: Network, bundle: DataBundle,
                         per_domain: int = 100) -> int:
    """Embeddings of up to per_domain samples from each source + target."""
    dim = model.cfg.embed_dim
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "role", "label"] + [f"e{i}" for i in range(dim)])
        parts = [(dom, "source", d) for dom, d in sorted(bundle.train.items())]
        parts.append((bundle.test.domain_id, "target", bundle.test))
        for dom, role, data in parts:
            take = min(per_domain, len(data))
            with T.no_grad():
                trace = model.forward(data.images[:take], "eval")
            for i in range(take):
                w.writerow([dom, role, int(data.labels[i])]
                           + [repr(float(v)) for v in trace.embedding.data[i]])
                rows += 1
    return rows


# -- the runner -------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, outdir, *,
                   export_embeddings: bool = False,
                   bundle: DataBundle | None = None) -> MetricsReport:
    """Generate data, train, evaluate, and write all artifacts into outdir."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    chash = cfg.config_hash()
    stage = "setup"
    try:
        stage = "data"
        if bundle is None:
            proto = build_protocol(cfg.data.n_domains, cfg.data.held_out,
                                   cfg.data.train_per_domain,
                                   cfg.data.test_per_domain,
                                   cfg.data.data_seed)
            bundle = generate_bundle(proto, side=cfg.network.input_side,
                                     depth_side=cfg.network.depth_map_side)

        stage = "train"
        model = Network(cfg.network, seed=cfg.train.seed)
        metrics_path = outdir / "metrics.jsonl"
        with open(metrics_path, "w") as fh:
            def sink(rec):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

            def eval_fn(m, iteration):
                rep = evaluate_model(m, bundle.test, chash, cfg.train.seed,
                                     iteration)
                return {"hter": rep.hter, "auc": rep.auc}

            result = run_training(model, bundle, cfg.train,
                                  use_meta=cfg.ablation.use_meta,
                                  use_idc=cfg.ablation.use_idc,
                                  use_ics=cfg.ablation.use_ics,
                                  sink=sink, eval_fn=eval_fn)

        stage = "evaluate"
        report = evaluate_model(model, bundle.test, chash, cfg.train.seed,
                                result.iterations)

        stage = "artifacts"
        payload = dict(report.to_dict(), config=cfg.to_dict())
        (outdir / "report.json").write_text(
            json.dumps(payload, sort_keys=True) + "\n")
        save_checkpoint(outdir / "checkpoint.bin", model, result.bank,
                        result.iterations, chash)
        if cfg.network.variant is NormVariant.ADAPTIVE:
            probe = bundle.test.images[:min(64, len(bundle.test))]
            write_alpha_csv(outdir / "alpha.csv", model, probe)
        if export_embeddings:
            write_embeddings_csv(outdir / "embeddings.csv", model, bundle)
        return report
    except Exception as e:
        (outdir / "FAILED").write_text(f"stage: {stage}\n{type(e).__name__}: {e}\n")
        raise


def run_ablation(cfg: ExperimentConfig, outdir, *,
                 variants=ABLATION_VARIANTS) -> dict:
    """One full run per normalization variant, shared data, summary table.

    Each variant replaces the normalization layer, everything else fixed
    (losses and the meta schedule stay on; the schedule degenerates to
    plain training for variants without adaptive parameters).
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    proto = build_protocol(cfg.data.n_domains, cfg.data.held_out,
                           cfg.data.train_per_domain, cfg.data.test_per_domain,
                           cfg.data.data_seed)
    bundle = generate_bundle(proto, side=cfg.network.input_side,
                             depth_side=cfg.network.depth_map_side)
    summary: dict[str, dict] = {}
    for variant in variants:
        vcfg = ExperimentConfig(
            network=NetworkConfig(**{**cfg.to_dict()["network"],
                                     "variant": variant}),
            train=TrainConfig(**cfg.train.__dict__),
            data=DataConfig(**cfg.data.__dict__),
            ablation=AblationConfig(**cfg.ablation.__dict__))
        rep = run_experiment(vcfg, outdir / variant, bundle=bundle)
        summary[variant] = {"hter": rep.hter, "auc": rep.auc}
    (outdir / "summary.json").write_text(
        json.dumps({"schema": REPORT_SCHEMA, "variants": summary},
                   sort_keys=True) + "\n")
    return summary


def load_report(path) -> dict:
    report = json.loads(Path(path).read_text())
    if report.get("schema") != REPORT_SCHEMA:
        raise ConfigError(f"report {path}: unsupported schema "
                          f"{report.get('schema')}")
    return report


def model_from_report_config(report: dict) -> ExperimentConfig:
    c = report["config"]
    return ExperimentConfig(network=NetworkConfig(**c["network"]),
                            train=TrainConfig(**c["train"]),
                            data=DataConfig(**c["data"]),
                            ablation=AblationConfig(**c["ablation"]))
