"""``cmpnet`` command-line interface.

Subcommands: gen-data, train, eval, grad-check, params, suggest-stride.
Options may also come from ``--config FILE`` holding ``key=value`` lines
(keys are option names without the leading dashes); explicit flags win.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import model as M
from .cmp import make_cmp_config, suggest_stride
from .errors import CmpNetError

VARIANT_NAMES = {"baseline": "baseline_gap", "wogap": "baseline_wogap", "cmp": "cmp"}
METRICS_FILE = "metrics.csv"
MODEL_FILE = "best.cmpm"


def _add_common(p):
    p.add_argument("--config", help="key=value file with defaults for these options")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmpnet", description="Channel max pooling CNN toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic fine-grained dataset")
    _add_common(p)
    p.add_argument("--out", help="output directory (required)")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--train-per-class", type=int, default=64)
    p.add_argument("--test-per-class", type=int, default=16)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_gen_data, required=("out",))

    p = sub.add_parser("train", help="train the toycar network")
    _add_common(p)
    p.add_argument("--data", help="dataset directory or manifest (required)")
    p.add_argument("--out", help="run directory for metrics.csv and best.cmpm (required)")
    p.add_argument("--variant", choices=sorted(VARIANT_NAMES), default="cmp")
    p.add_argument("--r", type=float, default=4.0, help="compression factor")
    p.add_argument("--s", type=int, default=None, help="channel stride (default: suggested)")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--conv-lr-ratio", type=float, default=0.1)
    p.add_argument("--lr-min", type=float, default=0.0)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--wd", type=float, default=0.0005)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train, required=("data", "out"))

    p = sub.add_parser("eval", help="test accuracy of a saved model")
    _add_common(p)
    p.add_argument("--model", help="model file (required)")
    p.add_argument("--data", help="dataset directory or manifest (required)")
    p.set_defaults(func=cmd_eval, required=("model", "data"))

    p = sub.add_parser("grad-check", help="finite-difference check of operator gradients")
    _add_common(p)
    from .gradcheck import CHECKS

    p.add_argument("--op", choices=["all", *CHECKS], default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check, required=())

    p = sub.add_parser("params", help="parameter counts with and without CMP")
    _add_common(p)
    p.add_argument("--preset", choices=[*M.HEAD_PRESETS, "toycar"], default="densenet161-head")
    p.add_argument("--r", type=float, default=16.0)
    p.add_argument("--s", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None, help="head width (256 for heads, 64 for toycar)")
    p.add_argument("--classes", type=int, default=None, help="P (196 for heads, 8 for toycar)")
    p.set_defaults(func=cmd_params, required=())

    p = sub.add_parser("suggest-stride", help="stride, kernel size and gap flag for C and r")
    _add_common(p)
    p.add_argument("--c", type=int, help="input channels (required)")
    p.add_argument("--r", type=float, help="compression factor (required)")
    p.set_defaults(func=cmd_suggest_stride, required=("c", "r"))
    return parser


def _apply_config(parser, argv):
    """Re-parse ``argv`` with defaults taken from the --config file."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    values = {}
    try:
        lines = Path(args.config).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        parser.error(f"cannot read config: {exc}")
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, raw = line.partition("=")
        dest = key.strip().replace("-", "_")
        if not eq or dest not in actions:
            parser.error(f"{args.config}:{n}: unknown config key {key.strip()!r}")
        action, raw = actions[dest], raw.strip()
        if isinstance(action, argparse._StoreTrueAction):
            values[dest] = raw.lower() in ("1", "true", "yes", "on")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except ValueError:
            parser.error(f"{args.config}:{n}: bad value for {key.strip()}: {raw!r}")
        if action.choices and value not in action.choices:
            parser.error(f"{args.config}:{n}: {key.strip()} must be one of {sorted(action.choices)}")
        values[dest] = value
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def _limit_threads():
    try:
        threads = int(os.environ.get("CMPNET_THREADS", "1"))
    except ValueError:
        threads = 1
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(max(threads, 1))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    missing = [name for name in args.required if getattr(args, name) is None]
    if missing:
        parser.print_usage(sys.stderr)
        print(f"cmpnet: error: missing required option(s): "
              f"{', '.join('--' + m.replace('_', '-') for m in missing)}", file=sys.stderr)
        return 2
    limiter = _limit_threads()
    try:
        return args.func(args)
    except (CmpNetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


# --- subcommands ------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .data import MANIFEST, generate_dataset

    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: {out} exists and is not empty (use --force)", file=sys.stderr)
        return 1
    m = generate_dataset(out, args.seed, args.classes, args.train_per_class, args.test_per_class, args.size)
    n_train = sum(1 for s in m.samples if s[2] == "train")
    print(f"manifest: {out / MANIFEST}")
    print(f"classes={m.num_classes} train={n_train} test={len(m.samples) - n_train} size={m.image_size}")
    return 0


def _toycar(args, num_classes: int, image_size: int) -> M.ModelSpec:
    variant = VARIANT_NAMES[args.variant]
    s = args.s
    if variant == "cmp":
        C = M.TOYCAR_WIDTHS[-1]
        if s is None:
            s = suggest_stride(C, args.r)
        make_cmp_config(C, args.r, s)
    return M.toycar_spec(variant, args.r, s, num_classes, image_size, args.hidden)


def _print_params(report: M.ParamReport) -> None:
    for name, count in report.per_layer.items():
        print(f"  {name:<14} {count:>12,}")
    print(f"  {'total':<14} {report.total:>12,}")


def cmd_train(args) -> int:
    from .data import load_dataset
    from .trainer import TrainConfig, train, write_metrics_csv

    if args.variant == "cmp":
        # fail on a bad CMP config before touching the data
        _toycar(args, 2, 32)
    data = load_dataset(args.data)
    spec = _toycar(args, data.num_classes, data.x_train.shape[-1])
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr_fc=args.lr, conv_lr_ratio=args.conv_lr_ratio,
        momentum=args.momentum, weight_decay=args.wd, lr_min=args.lr_min, seed=args.seed,
        augment=not args.no_augment,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = M.build_model(spec, args.seed)

    def progress(row):
        print(f"epoch {row.epoch:3d}  loss {row.train_loss:.4f}  train_acc {row.train_acc:.4f}  "
              f"test_acc {row.test_acc:.4f}  lr {row.lr_fc_effective:.5f}", flush=True)

    result = train(state, data, cfg, on_epoch=progress)
    write_metrics_csv(result.rows, out / METRICS_FILE)
    M.save_model(result.best, out / MODEL_FILE)
    report = M.count_parameters(spec)
    print(f"parameters ({spec.variant}):")
    _print_params(report)
    print(f"fc1 input features: {report.fc1_in_features}")
    print(f"final test accuracy: {result.rows[-1].test_acc:.4f}")
    print(f"best test accuracy: {result.rows[result.best_epoch - 1].test_acc:.4f} (epoch {result.best_epoch})")
    print(f"metrics: {out / METRICS_FILE}")
    print(f"model: {out / MODEL_FILE}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .trainer import evaluate

    state = M.load_model(args.model)
    data = load_dataset(args.data)
    acc = evaluate(state, data.x_test, data.y_test, data.mean)
    print(f"test accuracy: {acc:.4f} ({len(data.y_test)} samples)")
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import run_checks

    names = None if args.op == "all" else [args.op]
    results = run_checks(names, args.seed)
    ok = True
    for name, err in results.items():
        passed = err < args.tol
        ok &= passed
        print(f"{name:<10} max_rel_error={err:.3e} {'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_params(args) -> int:
    if args.preset == "toycar":
        hidden = args.hidden or 64
        P = args.classes or 8
        C = M.TOYCAR_WIDTHS[-1]
        s = args.s or suggest_stride(C, args.r)
        base = M.toycar_spec("baseline_wogap", num_classes=P, hidden=hidden)
        comp = M.toycar_spec("cmp", args.r, s, num_classes=P, hidden=hidden)
    else:
        hidden = args.hidden or 256
        P = args.classes or 196
        C = M.HEAD_PRESETS[args.preset][0]
        s = args.s or suggest_stride(C, args.r)
        base = M.head_spec(args.preset, "baseline_wogap", hidden=hidden, num_classes=P)
        comp = M.head_spec(args.preset, "cmp", args.r, s, hidden=hidden, num_classes=P)
    cfg = make_cmp_config(C, args.r, s)
    rb, rc = M.count_parameters(base), M.count_parameters(comp)
    print(f"preset {args.preset}: C={C} r={args.r:g} s={s} k={cfg.kernel_size} "
          f"out_channels={cfg.out_channels} hidden={hidden} classes={P}")
    print("baseline (no CMP):")
    _print_params(rb)
    print("with CMP:")
    _print_params(rc)
    print(f"FC1 baseline {rb.fc1_params:,} vs CMP {rc.fc1_params:,}")
    print(f"FC1 input features {rb.fc1_in_features:,} vs {rc.fc1_in_features:,}")
    print(f"ratio {C / cfg.out_channels:.2f}")
    return 0


def cmd_suggest_stride(args) -> int:
    s = suggest_stride(args.c, args.r)
    cfg = make_cmp_config(args.c, args.r, s)
    print(f"s={s} k={cfg.kernel_size} gaps={str(cfg.gaps).lower()} out_channels={cfg.out_channels}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
