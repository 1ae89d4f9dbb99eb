"""Command-line front end.

Exit codes: 0 success, 2 configuration problem (bad flags, bad config
file, mismatched checkpoint), 3 runtime failure (training/evaluation
raised, integrity check failed).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, restore_model
from .data import build_protocol, generate_bundle, generate_domain, \
    save_domain_cache
from .experiment import (ConfigError, ExperimentConfig, evaluate_model,
                         load_config, run_ablation, run_experiment,
                         write_alpha_csv, write_embeddings_csv,
                         ABLATION_VARIANTS)
from .losses import EmbeddingBatch, CentroidBank, cls_loss, depth_loss, \
    ics_loss, idc_loss, update_centroid_bank
from .model import Network, NetworkConfig
from .tensor import Tensor, finite_diff_check

log = logging.getLogger(__name__)


def _load(args) -> ExperimentConfig:
    return load_config(args.config)


def _restore(cfg: ExperimentConfig, path, allow_mismatch: bool) -> Network:
    model = Network(cfg.network, seed=cfg.train.seed)
    ck = load_checkpoint(path)
    expect = None if allow_mismatch else cfg.config_hash()
    try:
        restore_model(model, ck, expect_hash=expect)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return model


def cmd_generate_data(args) -> int:
    cfg = _load(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    proto = build_protocol(cfg.data.n_domains, cfg.data.held_out,
                           cfg.data.train_per_domain,
                           cfg.data.test_per_domain, cfg.data.data_seed)
    for split, dom in sorted(proto.refs):
        data = generate_domain(proto, split, dom, side=cfg.network.input_side,
                               depth_side=cfg.network.depth_map_side)
        path = outdir / f"{split}-domain{dom}.bin"
        save_domain_cache(path, proto, split, data)
        print(f"wrote {path} ({len(data)} samples)")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    report = run_experiment(cfg, args.out,
                            export_embeddings=args.export_embeddings)
    print(json.dumps({"hter": report.hter, "auc": report.auc,
                      "eer_threshold": report.eer_threshold,
                      "iterations": report.iteration}, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    model = _restore(cfg, args.checkpoint, args.allow_config_mismatch)
    proto = build_protocol(cfg.data.n_domains, cfg.data.held_out,
                           cfg.data.train_per_domain,
                           cfg.data.test_per_domain, cfg.data.data_seed)
    test = generate_domain(proto, "test", proto.target_id,
                           side=cfg.network.input_side,
                           depth_side=cfg.network.depth_map_side)
    ck = load_checkpoint(args.checkpoint)
    report = evaluate_model(model, test, cfg.config_hash(), cfg.train.seed,
                            ck.iteration)
    text = json.dumps(report.to_dict(), sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load(args)
    variants = ABLATION_VARIANTS
    if args.variants:
        variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
        bad = set(variants) - set(ABLATION_VARIANTS)
        if bad:
            raise ConfigError(f"unknown variants {sorted(bad)}; choose from "
                              f"{list(ABLATION_VARIANTS)}")
    summary = run_ablation(cfg, args.out, variants=variants)
    print(json.dumps({"variants": summary}, sort_keys=True))
    return 0


def cmd_export_alpha(args) -> int:
    cfg = _load(args)
    model = _restore(cfg, args.checkpoint, args.allow_config_mismatch)
    proto = build_protocol(cfg.data.n_domains, cfg.data.held_out,
                           cfg.data.train_per_domain,
                           cfg.data.test_per_domain, cfg.data.data_seed)
    test = generate_domain(proto, "test", proto.target_id,
                           side=cfg.network.input_side,
                           depth_side=cfg.network.depth_map_side)
    probe = test.images[:min(args.samples, len(test))]
    rows = write_alpha_csv(args.out, model, probe)
    print(f"wrote {args.out} ({rows} rows)")
    return 0


def cmd_export_embeddings(args) -> int:
    cfg = _load(args)
    model = _restore(cfg, args.checkpoint, args.allow_config_mismatch)
    proto = build_protocol(cfg.data.n_domains, cfg.data.held_out,
                           cfg.data.train_per_domain,
                           cfg.data.test_per_domain, cfg.data.data_seed)
    bundle = generate_bundle(proto, side=cfg.network.input_side,
                             depth_side=cfg.network.depth_map_side)
    rows = write_embeddings_csv(args.out, model, bundle,
                                per_domain=args.per_domain)
    print(f"wrote {args.out} ({rows} rows)")
    return 0


# -- gradcheck ----------------------------------------------------------------

def _gradcheck_cases(rng):
    """One (name, rebuild, leaves, tol) case per differentiable surface.

    Leaves are fixed objects; ``rebuild`` reruns the forward graph over
    them, so perturbing a leaf in place is visible to the next call.
    """
    from .norms import NormLayer, NormVariant
    from .tensor import ParamStore

    cases = []

    for variant in ("bn", "in", "adaptive"):
        store = ParamStore()
        layer = NormLayer(NormVariant.from_str(variant), 3, store, "n",
                          np.random.default_rng(rng.integers(2**32)))
        for _, p in store.items():   # zero-init gates block their gradients
            p.data += 0.05 * rng.normal(size=p.data.shape)
        x = Tensor(rng.normal(size=(4, 3, 5, 5)), requires_grad=True)
        leaves = [x] + [p for _, p in store.items()]

        def rebuild(layer=layer, x=x):
            y, _ = layer.forward(x, "train", update_stats=False)
            return T.tsum(T.square(y))
        cases.append((f"norm-{variant}", rebuild, leaves, 1e-6))

    doms = np.repeat([0, 1, 2], 4)
    labels = np.tile([0, 1], 6)
    bank = CentroidBank(5, 0.9)
    update_centroid_bank(bank, EmbeddingBatch(
        Tensor(rng.normal(size=(12, 5))), doms, labels))
    for which, loss_fn in (("idc", idc_loss), ("ics", ics_loss)):
        feats = Tensor(rng.normal(size=(12, 5)), requires_grad=True)

        def rebuild(feats=feats, loss_fn=loss_fn):
            return loss_fn(EmbeddingBatch(feats, doms, labels), bank)
        cases.append((f"loss-{which}", rebuild, [feats], 1e-6))

    xc = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    wc = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
    cases.append(("conv2d",
                  lambda: T.tsum(T.square(T.conv2d(xc, wc, pad=1))),
                  [xc, wc], 1e-6))

    z = Tensor(rng.normal(size=(6,)), requires_grad=True)
    d = Tensor(rng.normal(size=(6, 1, 3, 3)), requires_grad=True)
    y_cls = np.array([0, 1, 1, 0, 1, 0])
    target = rng.uniform(size=(6, 1, 3, 3))
    cases.append(("heads",
                  lambda: T.add(cls_loss(z, y_cls),
                                depth_loss(T.sigmoid(d), target)),
                  [z, d], 1e-6))

    model = Network(NetworkConfig(in_channels=2, widths=(3, 3),
                                  variant="adaptive", input_side=12,
                                  depth_map_side=3),
                    seed=int(rng.integers(2**31)))
    xe = Tensor(rng.normal(size=(4, 2, 12, 12)), requires_grad=True)

    def rebuild_e2e():
        trace = model.forward(xe, "train", update_stats=False)
        return T.add(T.tsum(T.square(trace.logits)),
                     T.tsum(T.square(trace.depth)))
    cases.append(("network-e2e", rebuild_e2e, [xe], 1e-5))

    return cases


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    failures = 0
    for name, rebuild, leaves, tol in _gradcheck_cases(rng):
        worst = max(finite_diff_check(lambda _: rebuild(), leaf)
                    for leaf in leaves)
        ok = worst < tol
        print(f"{'ok  ' if ok else 'FAIL'} {name:16s} max rel err {worst:.3e} "
              f"(tol {tol:.0e})")
        failures += not ok
    if failures:
        print(f"{failures} case(s) failed", file=sys.stderr)
        return 3
    return 0


# -- wiring -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="adanorm",
        description="Train and evaluate the adaptive-normalization "
                    "anti-spoofing model on synthetic multi-domain data.")
    ap.add_argument("--verbose", action="store_true",
                    help="log progress at INFO level")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="INI config file")
        return p

    def with_ckpt(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--allow-config-mismatch", action="store_true",
                       help="skip the config-hash check on load")
        return p

    p = with_config(sub.add_parser(
        "generate-data", help="write the per-domain sample caches"))
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_generate_data)

    p = with_config(sub.add_parser(
        "train", help="run one experiment end to end"))
    p.add_argument("--out", required=True, help="artifact directory")
    p.add_argument("--export-embeddings", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = with_ckpt(with_config(sub.add_parser(
        "evaluate", help="score a checkpoint on the held-out domain")))
    p.add_argument("--out", help="also write the report JSON here")
    p.set_defaults(fn=cmd_evaluate)

    p = with_config(sub.add_parser(
        "ablate", help="run every normalization variant on shared data"))
    p.add_argument("--out", required=True, help="artifact directory")
    p.add_argument("--variants", help="comma-separated subset "
                   f"of {','.join(ABLATION_VARIANTS)}")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck",
                       help="finite-difference integrity sweep of all "
                            "differentiable components")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = with_ckpt(with_config(sub.add_parser(
        "export-alpha", help="balance-factor statistics CSV")))
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=64,
                   help="probe batch size from the held-out test split")
    p.set_defaults(fn=cmd_export_alpha)

    p = with_ckpt(with_config(sub.add_parser(
        "export-embeddings", help="embedding CSV for external projection")))
    p.add_argument("--out", required=True)
    p.add_argument("--per-domain", type=int, default=100)
    p.set_defaults(fn=cmd_export_embeddings)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports and exits
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
