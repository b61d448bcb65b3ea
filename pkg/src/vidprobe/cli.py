"""Command-line pipeline: synthesize datasets, fit probes, evaluate, sweep.

Each command resolves its configuration as dataclass defaults, overridden by
the JSON config file (--config), overridden by explicit CLI flags; the fully
resolved config is echoed into a per-run directory named by its hash so reruns
with different settings never overwrite each other.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

from .metrics import EvalConfig, evaluate_probe
from .oracle import Dial, OracleConfig, build_oracle_dataset
from .probe import ProbeConfig, config_hash, init_parameters, load_checkpoint
from .tensorstore import load_feature_clip, load_manifest
from .trainer import TrainConfig, train_probe


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return json.loads(p.read_text(encoding="utf-8"))


def _section(config_cls, file_cfg: dict, key: str, overrides: dict):
    """Dataclass defaults <- config-file section <- CLI overrides."""
    merged = dict(file_cfg.get(key, {}))
    allowed = {f.name for f in dataclass_fields(config_cls)}
    unknown = set(merged) - allowed
    if unknown:
        raise ValueError(f"unknown {key} config fields: {sorted(unknown)}")
    for name, value in overrides.items():
        if value is not None:
            merged[name] = value
    return config_cls(**merged)


def _run_dir(base: str, tag: str, resolved: dict) -> Path:
    out = Path(base) / f"{tag}_{config_hash(resolved)}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(
        json.dumps(resolved, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return out


def _resolve_manifest(data_root: str, split: str) -> Path:
    p = Path(data_root)
    if p.is_file():
        return p
    candidate = p / f"{split}.txt"
    if candidate.is_file():
        return candidate
    raise FileNotFoundError(f"no {split} manifest found at {p} (looked for {candidate})")


def cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.config)
    oracle_cfg = _section(
        OracleConfig, file_cfg, "oracle", {"kind": args.kind, "seed": args.seed}
    )
    n_scenes = args.scenes if args.scenes is not None else file_cfg.get("scenes", 10)
    dials = None
    if "dials" in file_cfg:
        dials = [Dial(**d) for d in file_cfg["dials"]]
    resolved = {
        "command": "synth",
        "scenes": n_scenes,
        "oracle": oracle_cfg.to_dict(),
        "dials": [vars(d) for d in dials] if dials else None,
        "train_ratio": file_cfg.get("train_ratio", 0.9),
    }
    out = _run_dir(args.out, "synth", resolved)
    train_path, test_path = build_oracle_dataset(
        n_scenes, oracle_cfg, out, dials=dials, train_ratio=resolved["train_ratio"]
    )
    print(train_path)
    print(test_path)
    return 0


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    probe_cfg = _section(ProbeConfig, file_cfg, "probe", {})
    train_cfg = _section(
        TrainConfig, file_cfg, "train", {"seed": args.seed, "data_fraction": args.data_fraction}
    )
    manifest = _resolve_manifest(args.data_root, "train")
    resolved = {
        "command": "train",
        "backbone": args.backbone,
        "manifest": str(manifest),
        "probe": probe_cfg.to_dict(),
        "train": train_cfg.to_dict(),
    }
    out = _run_dir(args.out, "train", resolved)
    _, log = train_probe(manifest, args.backbone, probe_cfg, train_cfg, out_dir=out)
    final = out / f"probe_{args.backbone}_{train_cfg.steps}"
    print(final)
    if log:
        last = log[-1]
        print(f"final step {last['step']}: total={last.get('total', float('nan')):.6f}")
    return 0


def cmd_eval(args) -> int:
    file_cfg = _load_config_file(args.config)
    thetas = tuple(float(x) for x in args.theta.split(",")) if args.theta else None
    eval_cfg = _section(EvalConfig, file_cfg, "eval", {"seed": args.seed, "thetas": thetas})
    manifest = _resolve_manifest(args.data_root, "test")
    if args.checkpoint:
        probe = load_checkpoint(args.checkpoint)
    else:
        probe_cfg = _section(ProbeConfig, file_cfg, "probe", {})
        probe = init_parameters(probe_cfg, args.seed or 0)
    resolved = {
        "command": "eval",
        "backbone": args.backbone,
        "manifest": str(manifest),
        "checkpoint": args.checkpoint,
        "probe": probe.cfg.to_dict(),
        "eval": {**eval_cfg.__dict__, "thetas": list(eval_cfg.thetas)},
        "point_display_x10": args.point_display_x10,
    }
    out = _run_dir(args.out, "eval", resolved)
    report = evaluate_probe(probe, manifest, args.backbone, eval_cfg)
    report.point_display_x10 = args.point_display_x10
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_table(), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.to_table(), end="")
    print(out / "report.json")
    return 0


def cmd_sweep(args) -> int:
    file_cfg = _load_config_file(args.config)
    probe_cfg = _section(ProbeConfig, file_cfg, "probe", {})
    train_cfg = _section(TrainConfig, file_cfg, "train", {"seed": args.seed})
    eval_cfg = _section(EvalConfig, file_cfg, "eval", {})
    train_manifest = _resolve_manifest(args.data_root, "train")
    test_manifest = _resolve_manifest(args.data_root, "test")
    manifest = load_manifest(train_manifest)
    backbones = args.backbones.split(",") if args.backbones else manifest.backbones()
    resolved = {
        "command": "sweep",
        "backbones": backbones,
        "manifest": str(train_manifest),
        "probe": probe_cfg.to_dict(),
        "train": train_cfg.to_dict(),
    }
    out = _run_dir(args.out, "sweep", resolved)

    root = train_manifest.parent
    cells = {}
    results = []
    for backbone in backbones:
        entry = manifest.entries[0]
        if backbone not in entry.features:
            raise ValueError(f"backbone {backbone!r} missing from manifest")
        meta = load_feature_clip(root / entry.features[backbone]).meta
        layer = meta.get("layer", -1)
        timestep = meta.get("timestep", -1)
        probe, _ = train_probe(train_manifest, backbone, probe_cfg, train_cfg, out_dir=out / backbone)
        report = evaluate_probe(probe, test_manifest, backbone, eval_cfg)
        point = report.aggregate["point_err"]
        cells[(layer, timestep)] = point
        results.append(
            {"backbone": backbone, "layer": layer, "timestep": timestep, "point_err": point}
        )
        print(f"{backbone}: layer={layer} timestep={timestep} point_err={point:.6f}")

    layers = sorted({k[0] for k in cells})
    steps = sorted({k[1] for k in cells})
    lines = ["layer\\timestep," + ",".join(str(t) for t in steps)]
    for layer in layers:
        row = [str(layer)]
        for t in steps:
            row.append(repr(cells[(layer, t)]) if (layer, t) in cells else "")
        lines.append(",".join(row))
    (out / "grid.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "sweep_results.json").write_text(
        json.dumps(results, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(out / "grid.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidprobe",
        description="Probe the 3D awareness of frozen video features with a shallow multi-view readout.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic oracle dataset")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="output directory root")
    p.add_argument("--scenes", type=int, help="number of scenes")
    p.add_argument("--kind", choices=["orbit", "flythrough"], help="camera path kind")
    p.add_argument("--seed", type=int, help="dataset seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a probe on frozen features")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data-root", required=True, help="dataset root or train manifest path")
    p.add_argument("--backbone", required=True, help="feature set to train on")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-fraction", type=float, help="fraction of train scenes to use")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run the metric suite on a checkpoint")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data-root", required=True, help="dataset root or test manifest path")
    p.add_argument("--backbone", required=True)
    p.add_argument("--checkpoint", help="checkpoint directory; omitted = untrained probe")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--theta", help="comma-separated AUC thresholds, e.g. 5,30")
    p.add_argument("--point-display-x10", action="store_true", help="scale point error x10 in tables")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train one probe per feature variant and grid the results")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data-root", required=True)
    p.add_argument("--backbones", help="comma-separated backbone ids (default: all in manifest)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a clean one-line failure, nonzero status
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
