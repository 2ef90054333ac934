"""Command-line entry point: ``cbcnet <command> ...``.

On failure every command prints ``error: <category>: <message>`` on stderr
and exits non-zero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import cbc_basis as cb
from . import gradcheck
from .data import (
    AugmentSpec,
    default_grating_classes,
    generate_gratings,
    load_dataset,
    save_dataset,
    split,
    to_pgm_bytes,
    write_weights_csv,
)
from .errors import CbcError, ConfigError
from .hybrid_layer import HybridConv
from .model import baseline_of, build, count_conv_params, format_factor, load_config, with_overrides
from .tensor_core import ConvGeometry
from .train import train


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _emit(text: str, out) -> None:
    out.write(text if text.endswith("\n") else text + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, out) -> int:
    config = load_config(args.config)
    if args.alpha is not None or args.variant is not None:
        config = with_overrides(config, args.alpha, args.variant)
    data = load_dataset(args.data)
    if args.val:
        train_set, val_set = data, load_dataset(args.val)
    else:
        train_set, val_set = split(data, args.val_fraction, args.seed)
    if train_set.sample_shape[0] != config["input_shape"][0]:
        raise ConfigError(f"dataset has {train_set.sample_shape[0]} channels, model expects {config['input_shape'][0]}")
    aug = None
    if args.hflip or args.rotate or args.crop:
        aug = AugmentSpec(
            hflip_prob=args.hflip,
            rotation_range=tuple(_floats(args.rotate)) if args.rotate else (0.0, 0.0),
            crop=tuple(_ints(args.crop)) if args.crop else None,
        )
    baseline = load_config(args.baseline) if args.baseline else baseline_of(config)
    model = build(config, args.seed)
    log = (lambda s: print(s, file=sys.stderr)) if args.verbose else None
    report = train(
        model, train_set, val_set, epochs=args.epochs, batch_size=args.batch, seed=args.seed,
        thresholds=_floats(args.thresholds), lr=args.lr, augment_spec=aug, baseline=baseline,
        record_time=args.record_time, log=log,
    )
    target = Path(args.out) if args.out else Path(".")
    if target.is_dir() or args.out is None or args.out.endswith("/"):
        target.mkdir(parents=True, exist_ok=True)
        target = target / report.filename()
    target.write_text(report.to_json())
    if args.model_out:
        Path(args.model_out).write_text(model.to_json())
    best = "n/a" if report.best_acc is None else f"{report.best_acc:.4f}"
    _emit(f"report {target} best_acc={best} epoch_exceeds={json.dumps(report.epoch_exceeds, sort_keys=True)}", out)
    return 0


def cmd_count_params(args, out) -> int:
    config = load_config(args.config)
    if args.alpha is not None or args.variant is not None:
        config = with_overrides(config, args.alpha, args.variant)
    baseline = load_config(args.baseline) if args.baseline else baseline_of(config)
    base_count = count_conv_params(baseline)
    rows = [(baseline.get("name", "baseline"), base_count)]
    if args.table:
        for variant in ("spfd", "spfw"):
            cfg = with_overrides(config, alpha=0.5, variant=variant)
            rows.append((f"{config.get('name', 'model')}-cbc-{variant}", count_conv_params(cfg)))
    else:
        rows = [(config.get("name", "model"), count_conv_params(config))]
    if args.json:
        payload = [{"config": name, "conv_params": n, "compression_factor": format_factor(base_count, n)}
                   for name, n in rows]
        _emit(json.dumps(payload, indent=2), out)
        return 0
    _emit(f"{'config':<24} {'conv_params':>12} {'compression':>12}", out)
    for name, n in rows:
        _emit(f"{name:<24} {n:>12d} {format_factor(base_count, n):>12}", out)
    return 0


def _synth_params(args, variant, channels) -> cb.CbcFilterParams:
    spatial_kind, feature_kind = variant
    if args.params:
        d = json.loads(Path(args.params).read_text())
        spatial_vals = d.get("spatial", [])
        feature_vals = d["feature"]
        if isinstance(spatial_vals, dict):
            keys = {"product": ("wx", "phase_x", "wy", "phase_y"), "direction": ("wx", "wy", "phase"), "unit": ()}
            spatial_vals = [spatial_vals[k] for k in keys[spatial_kind]]
        if isinstance(feature_vals, dict):
            if feature_kind == "direct":
                feature_vals = [feature_vals["amp"], feature_vals["wc"], feature_vals["phase_c"]]
            else:
                feature_vals = feature_vals["amps"]
        p = cb.CbcFilterParams(cb.spatial_from_values(spatial_kind, spatial_vals),
                               cb.feature_from_values(feature_kind, feature_vals))
        if feature_kind == "weight" and p.feature.amps.size != channels:
            raise ConfigError(f"params give {p.feature.amps.size} amplitudes for {channels} channels")
        return p
    geom = ConvGeometry(args.kernel, args.kernel, channels, 1, 1, args.kernel // 2)
    return HybridConv.init(geom, 1.0, variant, args.seed).cbc_filters[0]


def cmd_synth(args, out) -> int:
    variant = cb.parse_variant(args.variant)
    if args.kernel == 1:
        variant = ("unit", variant[1])
    p = _synth_params(args, variant, args.channels)
    weights = cb.synthesize_weights(p, args.kernel, args.kernel, args.channels)
    prefix = args.out_prefix
    if prefix.endswith("/"):
        Path(prefix).mkdir(parents=True, exist_ok=True)
    write_weights_csv(weights, f"{prefix}weights.csv")
    for c in range(args.channels):
        Path(f"{prefix}channel{c}.pgm").write_bytes(to_pgm_bytes(weights[c]))
    Path(f"{prefix}params.json").write_text(json.dumps(p.to_dict(), indent=2) + "\n")
    _emit(f"wrote {args.channels} channel(s) of a {args.kernel}x{args.kernel} {args.variant} filter to {prefix}", out)
    return 0


def cmd_gradcheck(args, out) -> int:
    variants = gradcheck.VARIANT_NAMES if args.variant == "all" else (args.variant,)
    for v in variants:
        cb.parse_variant(v)
    results = gradcheck.run_all(variants, seeds=args.seeds)
    failed = [r for r in results if not r.passed]
    lines = [r.line() for r in (results if args.verbose else failed)]
    worst = max(r.max_rel_error for r in results)
    lines.append(f"{len(results) - len(failed)}/{len(results)} checks passed; worst rel. error {worst:.3e}")
    _emit("\n".join(lines), out)
    if failed:
        print("error: gradcheck: finite-difference mismatch", file=sys.stderr)
        return 1
    return 0


def cmd_gen_data(args, out) -> int:
    if args.task != "gratings":
        raise ConfigError(f"unknown task {args.task!r}")
    data = generate_gratings(
        args.n, default_grating_classes(args.classes, args.frequency), args.size, args.noise, args.seed
    )
    save_dataset(data, args.out)
    _emit(f"wrote {len(data)} samples ({args.classes} classes, {args.size}x{args.size}) to {args.out}", out)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbcnet", description="Hybrid cosine-based convolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model config on a CBC1 dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val", help="separate validation file; default is a seeded split of --data")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--thresholds", default="")
    p.add_argument("--alpha", type=float)
    p.add_argument("--variant")
    p.add_argument("--baseline", help="config used for the compression factor (default: same config at alpha=0)")
    p.add_argument("--hflip", type=float, default=0.0, help="horizontal flip probability")
    p.add_argument("--rotate", help="rotation range in degrees, e.g. 0,45")
    p.add_argument("--crop", help="size,padding for random crops")
    p.add_argument("--out", help="report file, or a directory for an auto-named report")
    p.add_argument("--model-out", help="save the trained model as JSON")
    p.add_argument("--record-time", action="store_true", help="store wall time (makes reports non-reproducible)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("count-params", help="convolutional parameter count and compression factor")
    p.add_argument("--config", required=True)
    p.add_argument("--baseline")
    p.add_argument("--alpha", type=float)
    p.add_argument("--variant")
    p.add_argument("--table", action="store_true", help="also list the alpha=0.5 spfd/spfw variants")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("synth", help="dump one synthesized filter as CSV and PGM")
    p.add_argument("--variant", default="spfw")
    p.add_argument("--kernel", type=int, default=5)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--params", help="JSON with 'spatial' and 'feature' values; random if omitted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", default="gallery/")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--variant", default="all")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write a synthetic CBC1 dataset")
    p.add_argument("--task", default="gratings")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--n", type=int, default=200, help="samples per class")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--frequency", type=float, default=float(np.pi / 2))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, out)
    except CbcError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
    except ValueError as exc:
        print(f"error: value: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
