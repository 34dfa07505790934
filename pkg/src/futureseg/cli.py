"""Command-line surface: generate, train, eval, predict, gradcheck.

Every run resolves its configuration from built-in defaults, then an
optional key=value config file, then repeated --set overrides, then the
convenience flags, rejects unknown keys, and writes the resolved snapshot
next to its outputs so the run can be reproduced bit for bit.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .autodiff import GraphError, NonFiniteError, ShapeError
from .data import GenConfig, SegDataset, SegvError, generate_dataset, read_segv, write_segv
from .gradcheck import (
    END_TO_END_TOLERANCE,
    OP_TOLERANCE,
    format_report,
    run_suite,
)
from .segnet import ModelConfig
from .train_eval import (
    CheckpointError,
    TrainConfig,
    evaluate_copy_last,
    evaluate_horizons,
    load_checkpoint,
    predict_autoregressive,
    save_checkpoint,
    train,
)

_MODE_ALIASES = {"none": "none", "uni": "uni", "bi": "bi"}


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


# key -> (parser, default) per subcommand
_SCHEMAS: dict[str, dict[str, tuple]] = {
    "generate": {
        "height": (int, 64), "width": (int, 64), "classes": (int, 4),
        "shapes": (int, 3), "size_min": (int, 10), "size_max": (int, 16),
        "vel_min": (int, 1), "vel_max": (int, 3), "kinds": (str, "rect,disc"),
        "frames": (int, 8), "train_count": (int, 500), "val_count": (int, 100),
        "seed": (int, 7),
    },
    "train": {
        "data": (str, ""), "widths": (_ints, (16, 32, 64, 64)),
        "mode": (str, "uni"), "epochs": (int, 5), "batch": (int, 8),
        "lr": (float, 1e-3), "beta1": (float, 0.9), "beta2": (float, 0.999),
        "eps": (float, 1e-8), "seed": (int, 7), "augment": (_bool, False),
        "horizon": (int, 3), "eval_batch": (int, 16),
    },
    "eval": {
        "data": (str, ""), "checkpoint": (str, ""), "horizon": (int, 3),
        "eval_batch": (int, 16),
    },
    "predict": {
        "data": (str, ""), "checkpoint": (str, ""), "horizon": (int, 3),
        "count": (int, 0),
    },
    "gradcheck": {
        "seed": (int, 0),
    },
}

_FLAG_KEYS = ("seed", "epochs", "mode", "horizon", "data")


def _parse_config_file(path: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            pairs[key.strip()] = value.strip()
    return pairs


def _resolve(command: str, args) -> dict:
    schema = _SCHEMAS[command]
    resolved = {key: default for key, (_, default) in schema.items()}

    def apply(key: str, raw, origin: str):
        if key not in schema:
            raise ValueError(f"unknown config key {key!r} for {command} ({origin})")
        parse = schema[key][0]
        resolved[key] = parse(raw) if isinstance(raw, str) else raw

    if args.config:
        for key, value in _parse_config_file(args.config).items():
            apply(key, value, f"config file {args.config}")
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        apply(key.strip(), value.strip(), "--set")
    for key in _FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            apply(key, value if isinstance(value, str) else str(value), "flag")
    return resolved


def _write_snapshot(out_dir: str, command: str, resolved: dict) -> None:
    lines = [f"# futureseg {command} resolved config"]
    for key in sorted(resolved):
        value = resolved[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    with open(os.path.join(out_dir, "resolved_config.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _require_out(args) -> str:
    if not args.out:
        raise ValueError("--out DIR is required for this subcommand")
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _load_data_dir(path: str) -> tuple[SegDataset, SegDataset]:
    train_p = os.path.join(path, "train.segv")
    val_p = os.path.join(path, "val.segv")
    for p in (train_p, val_p):
        if not os.path.exists(p):
            raise FileNotFoundError(f"missing dataset file {p}")
    return read_segv(train_p), read_segv(val_p)


def _cmd_generate(args) -> int:
    resolved = _resolve("generate", args)
    out = _require_out(args)
    r = resolved
    cfg = GenConfig(height=r["height"], width=r["width"], num_classes=r["classes"],
                    shapes_per_sequence=r["shapes"],
                    size_range=(r["size_min"], r["size_max"]),
                    velocity_range=(r["vel_min"], r["vel_max"]),
                    kinds=tuple(k.strip() for k in r["kinds"].split(",") if k.strip()),
                    frames=r["frames"], count=r["train_count"] + r["val_count"],
                    seed=r["seed"])
    full = generate_dataset(cfg)
    split = r["train_count"]
    write_segv(os.path.join(out, "train.segv"),
               SegDataset(full.sequences[:split], full.num_classes))
    write_segv(os.path.join(out, "val.segv"),
               SegDataset(full.sequences[split:], full.num_classes))
    _write_snapshot(out, "generate", resolved)
    print(f"wrote {split} train / {len(full.sequences) - split} val sequences to {out}")
    return 0


def _cmd_train(args) -> int:
    resolved = _resolve("train", args)
    out = _require_out(args)
    r = resolved
    if not r["data"]:
        raise ValueError("train needs data=DIR (or --data)")
    train_data, val_data = _load_data_dir(r["data"])
    h, w = train_data.sequences[0].shape[1:]
    model_cfg = ModelConfig(num_classes=train_data.num_classes, height=h, width=w,
                            widths=tuple(r["widths"]), mode=r["mode"])
    tcfg = TrainConfig(epochs=r["epochs"], batch_size=r["batch"],
                       learning_rate=r["lr"], beta1=r["beta1"], beta2=r["beta2"],
                       eps=r["eps"], seed=r["seed"], augment=r["augment"],
                       mode=r["mode"], horizon=r["horizon"])
    ckpt, report = train(tcfg, train_data, val_data, model_cfg=model_cfg,
                         log_path=os.path.join(out, "metrics.jsonl"))
    save_checkpoint(os.path.join(out, "model.ckpt"), ckpt)
    _write_snapshot(out, "train", resolved)
    print(report.to_json())
    return 0


def _print_side_by_side(model_reports, copy_reports) -> None:
    print(f"{'horizon':<8}{'model_miou':<12}{'copy_last_miou':<14}")
    for h, (mr, cr) in enumerate(zip(model_reports, copy_reports), start=1):
        print(f"{h:<8}{mr.miou:<12.4f}{cr.miou:<14.4f}")


def _cmd_eval(args) -> int:
    resolved = _resolve("eval", args)
    r = resolved
    if not r["checkpoint"] or not r["data"]:
        raise ValueError("eval needs checkpoint=PATH and data=DIR")
    ckpt = load_checkpoint(r["checkpoint"])
    _, val_data = _load_data_dir(r["data"])
    model_reports = evaluate_horizons(ckpt, val_data, r["horizon"], r["eval_batch"])
    copy_reports = evaluate_copy_last(val_data, r["horizon"], r["eval_batch"])
    _print_side_by_side(model_reports, copy_reports)
    if args.out:
        out = _require_out(args)
        payload = {
            "model": [json.loads(m.to_json()) for m in model_reports],
            "copy_last": [json.loads(c.to_json()) for c in copy_reports],
        }
        with open(os.path.join(out, "eval.json"), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
        _write_snapshot(out, "eval", resolved)
    return 0


def _cmd_predict(args) -> int:
    resolved = _resolve("predict", args)
    out = _require_out(args)
    r = resolved
    if not r["checkpoint"] or not r["data"]:
        raise ValueError("predict needs checkpoint=PATH and data=DIR")
    ckpt = load_checkpoint(r["checkpoint"])
    _, val_data = _load_data_dir(r["data"])
    seqs = val_data.sequences
    if r["count"]:
        seqs = seqs[:r["count"]]
    predicted = []
    for seq in seqs:
        inputs = [seq[t] for t in range(4)]
        preds = predict_autoregressive(ckpt, inputs, r["horizon"])
        predicted.append(np.stack(preds).astype(np.uint8))
    write_segv(os.path.join(out, "predictions.segv"),
               SegDataset(predicted, ckpt.config.num_classes))
    _write_snapshot(out, "predict", resolved)
    print(f"wrote {len(predicted)} predicted sequences (horizon {r['horizon']}) to {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    resolved = _resolve("gradcheck", args)
    results = run_suite(seed=resolved["seed"])
    print(format_report(results))
    if args.out:
        out = _require_out(args)
        with open(os.path.join(out, "gradcheck.json"), "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)
        _write_snapshot(out, "gradcheck", resolved)
    ok = all(err < (END_TO_END_TOLERANCE if name == "end_to_end" else OP_TOLERANCE)
             for name, err in results.items())
    return 0 if ok else 1


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "gradcheck": _cmd_gradcheck,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="futureseg",
        description="Predict future segmentation maps from the last four frames.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        schema = _SCHEMAS[name]
        if "seed" in schema:
            p.add_argument("--seed", type=int)
        if "data" in schema:
            p.add_argument("--data", help="dataset directory")
        if "epochs" in schema:
            p.add_argument("--epochs", type=int)
        if "mode" in schema:
            p.add_argument("--mode", choices=sorted(_MODE_ALIASES))
        if "horizon" in schema:
            p.add_argument("--horizon", type=int)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ShapeError, NonFiniteError, GraphError, SegvError, CheckpointError,
            FileNotFoundError, ValueError, IndexError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
