"""Command-line entry point: ``xspec {synth,train,eval,gradcheck,export}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint
from .config import DEFAULT_CONFIG, load_config
from .data import (ManifestError, SieScheme, export_dataset, load_manifest, sample_batch, synth_generate)
from .errors import CheckpointError, ConfigError, NumericalError, SamplerError, SchemeError, XSpecError
from .evaluate import (build_protocol, evaluate_protocol, export_embeddings, extract_features, report_line,
                       write_report)
from .losses import batch_hard_triplet, cross_entropy_id, total_loss
from .model import forward_batch, init_params, module_groups
from .trainer import train

log = logging.getLogger("xspec")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _overrides(args, mapping):
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(item, "--set expects key=value")
        key, _, value = item.partition("=")
        out[key.strip()] = value.strip()
    if args.seed is not None:
        out["seed"] = args.seed
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    return out


def _load_dataset(path):
    if path is None:
        raise ConfigError("--manifest", "a manifest path is required")
    try:
        ds = load_manifest(path)
    except ManifestError as exc:
        if "cannot read" in str(exc):
            raise CliError(EXIT_IO, str(exc)) from None
        raise CliError(EXIT_CONFIG, f"manifest {path}: {exc}") from None
    if len(ds) == 0:
        raise CliError(EXIT_CONFIG, f"manifest {path} has no records")
    return ds


def _image_shape(ds):
    h, w, c = ds[0].load().shape
    return (h, w), c


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    cfg = load_config(args.config, _overrides(args, {"n_ids": "synth.n_ids", "domains": "synth.domains",
                                                     "per_domain": "synth.per_domain"}))
    ds = synth_generate(cfg["synth.n_ids"], cfg["synth.domains"], cfg["synth.per_domain"], cfg.seed,
                        cfg.synth_config())
    try:
        manifest = export_dataset(ds, args.out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset to {args.out}: {exc}") from None
    print(f"wrote {len(ds)} records ({ds.n_ids} ids x {ds.n_domains} domains x "
          f"{cfg['synth.per_domain']} images) to {manifest}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config, _overrides(args, {"sie_scheme": "sie.mode", "lambda_sie": "model.lambda_sie",
                                                     "epochs": "train.total_epochs"}))
    ds = _load_dataset(args.manifest)
    scheme = cfg.sie_scheme(ds)
    hw, channels = _image_shape(ds)
    model_cfg = cfg.model_config(scheme.table_size, ds.n_ids, hw, channels)
    loss_cfg, train_cfg = cfg.loss_config(), cfg.train_config()
    out = Path(args.out)
    if model_cfg.lambda_sie == 0:
        print("SIE disabled (lambda_sie=0)")
    else:
        print(f"SIE mode {scheme.mode}: n_sie={scheme.table_size}, lambda_sie={model_cfg.lambda_sie}")
    t0 = time.perf_counter()
    try:
        result = train(ds, model_cfg, loss_cfg, train_cfg, scheme, out_dir=out, log_path=out / "metrics.log")
    except NumericalError as exc:
        raise CliError(EXIT_NUMERIC, f"training aborted: {exc}") from None
    except SchemeError as exc:
        raise CliError(EXIT_CONFIG, f"sie.mode: {exc}") from None
    except SamplerError as exc:
        raise CliError(EXIT_CONFIG, f"train.P/train.K_batch: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {out}: {exc}") from None
    _ = result
    print(f"trained {train_cfg.total_epochs} epochs; checkpoint {out / 'model.ckpt'}; "
          f"log {out / 'metrics.log'}", )
    print(f"elapsed {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return EXIT_OK


def _load_model(args, cfg, ds):
    params, meta = load_checkpoint(args.checkpoint)
    hw, channels = _image_shape(ds)
    ck = params.config
    want = {"model.dim": ck.dim, "model.layers": ck.layers, "model.heads": ck.heads, "model.patch": ck.patch,
            "model.k_local": ck.k_local, "model.gem_enabled": ck.gem_enabled}
    bad = [k for k, v in want.items() if cfg[k] != v]
    if (ck.image_h, ck.image_w, ck.channels) != (hw[0], hw[1], channels):
        bad.append("image shape")
    if bad:
        detail = ", ".join(f"{k}: config {cfg[k] if k in cfg.values else (hw, channels)} vs checkpoint "
                           f"{want.get(k, (ck.image_h, ck.image_w, ck.channels))}" for k in bad)
        raise CheckpointError(f"checkpoint {args.checkpoint} incompatible with config ({detail})")
    mode = getattr(args, "sie_scheme", None) or meta.get("sie_mode") or cfg["sie.mode"]
    if mode == "none":
        mode = cfg["sie.mode"]
    scheme = SieScheme.for_dataset(mode, ds)
    if ck.lambda_sie != 0 and scheme.table_size != ck.n_sie:
        raise CheckpointError(f"SIE mode {mode} gives {scheme.table_size} rows but the checkpoint has {ck.n_sie}")
    return params, scheme


def cmd_eval(args):
    cfg = load_config(args.config, _overrides(args, {"gallery": "eval.gallery", "probe": "eval.probe"}))
    ds = _load_dataset(args.manifest)
    params, scheme = _load_model(args, cfg, ds)
    pairs = [(cfg["eval.gallery"], cfg["eval.probe"])]
    if cfg["eval.both_directions"]:
        pairs.append((cfg["eval.probe"], cfg["eval.gallery"]))
    rows = []
    for g, p in pairs:
        proto = build_protocol(ds, g, p, cfg["eval.n_gallery"], cfg["eval.n_probe"], cfg.seed)
        if not proto.probe or not proto.gallery:
            raise CliError(EXIT_CONFIG, f"protocol {proto.name} is empty; check eval.gallery / eval.probe")
        res = evaluate_protocol(params, ds, proto, scheme, cfg["eval.normalize"])
        rows.append((proto.name, res))
        print(report_line(proto.name, res) + (f"  (excluded ids: {proto.excluded})" if proto.excluded else ""))
    report = Path(args.report) if args.report else Path(args.checkpoint).with_name("report.csv")
    try:
        write_report(rows, report)
        if args.export_embeddings:
            feats = extract_features(params, ds.records, scheme, cfg["eval.normalize"])
            export_embeddings(feats, ds.records, args.export_embeddings)
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    print(f"report written to {report}")
    return EXIT_OK


def cmd_export(args):
    cfg = load_config(args.config, _overrides(args, {}))
    ds = _load_dataset(args.manifest)
    params, scheme = _load_model(args, cfg, ds)
    feats = extract_features(params, ds.records, scheme, cfg["eval.normalize"])
    try:
        export_embeddings(feats, ds.records, args.out)
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    print(f"wrote {feats.shape[0]} embeddings of dim {feats.shape[1]} to {args.out}")
    return EXIT_OK


def gradcheck_model(cfg, tol=None, h=None, coords=None, P=8, K_batch=4, per_tensor=False):
    """Full-model finite-difference check on one PK batch (SIE-2, CE + triplet).

    Coordinates are sampled per module group unless ``per_tensor`` is set.
    """
    tol = cfg["gradcheck.tol"] if tol is None else tol
    h = cfg["gradcheck.h"] if h is None else h
    coords = cfg["gradcheck.coords"] if coords is None else coords
    ds = synth_generate(P, 2, K_batch // 2, cfg.seed, cfg.synth_config())
    scheme = SieScheme("domain", 2, ds.n_cameras)
    model_cfg = cfg.model_config(scheme.table_size, ds.n_ids)
    params = init_params(model_cfg, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    plan = sample_batch(ds, P, K_batch, 2, rng)
    recs = [ds[k] for k in plan.record_indices]
    images = np.stack([r.load() for r in recs])
    sie = [r.domain for r in recs]
    labels = plan.labels
    loss_cfg = cfg.loss_config()

    def loss_fn():
        feats, logits = forward_batch(images, sie, params)
        return total_loss(cross_entropy_id(logits, labels), batch_hard_triplet(feats, labels, loss_cfg.margin),
                          cfg["gradcheck.lambda_t"])

    groups = None if per_tensor else module_groups(model_cfg)
    return ad.gradcheck_params(loss_fn, dict(params), h=h, tol=tol, max_coords=coords, rng=rng,
                               floor=cfg["gradcheck.floor"], groups=groups)


def cmd_gradcheck(args):
    cfg = load_config(args.config, _overrides(args, {"tol": "gradcheck.tol", "h": "gradcheck.h",
                                                     "coords": "gradcheck.coords"}))
    t0 = time.perf_counter()
    try:
        reports = gradcheck_model(cfg)
    except NumericalError as exc:
        raise CliError(EXIT_NUMERIC, f"gradcheck: {exc}") from None
    worst = max(r.max_rel_err for r in reports.values())
    failed = {k: r for k, r in reports.items() if not r.passed}
    for name, r in reports.items():
        flag = "ok  " if r.passed else "FAIL"
        print(f"{flag} {name:28s} coords={r.n_checked:4d} max_rel_err={r.max_rel_err:.3e} at {r.worst_index}")
    print(f"max relative error {worst:.3e} (tol {cfg['gradcheck.tol']:g}) over {len(reports)} groups "
          f"in {time.perf_counter() - t0:.1f}s")
    if failed:
        print("gradcheck FAILED: " + ", ".join(f"{k}{r.worst_index}={r.max_rel_err:.2e}" for k, r in failed.items()))
        return EXIT_NUMERIC
    print("gradcheck passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (see `xspec --print-defaults`)")
    common.add_argument("--seed", type=int)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="xspec", description="Cross-spectral ViT body recognition at desk scale.")
    parser.add_argument("--print-defaults", action="store_true", help="print the default config and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic multi-domain dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-ids", type=int)
    p.add_argument("--domains", type=int)
    p.add_argument("--per-domain", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="run directory for model.ckpt and metrics.log")
    p.add_argument("--sie-scheme", help="domain | camera | domain+camera | domain+range (aliases: *-only)")
    p.add_argument("--lambda-sie", type=float)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="rank-1/5/10 and mAP for cross-domain protocols")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report")
    p.add_argument("--export-embeddings", metavar="PATH")
    p.add_argument("--sie-scheme")
    p.add_argument("--gallery", help="gallery domain selector, e.g. 0, VIS, VIS@short")
    p.add_argument("--probe", help="probe domain selector")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="full-model finite-difference gradient check")
    p.add_argument("--tol", type=float)
    p.add_argument("--h", type=float)
    p.add_argument("--coords", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export", parents=[common], help="write the embedding table for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sie-scheme")
    p.set_defaults(func=cmd_export)
    return parser


def _apply_thread_cap():
    raw = os.environ.get("XSPEC_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError("XSPEC_THREADS", f"must be a positive integer, got {raw!r}") from None
    try:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:  # pragma: no cover
        pass


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        print(DEFAULT_CONFIG, end="")
        return EXIT_OK
    if not args.command:
        parser.print_help()
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _apply_thread_cap()
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SchemeError, SamplerError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except XSpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
