"""Command-line entry point: train / attack / eval / visualize.

Every command takes --config plus any number of --section.key=value
overrides, honors PATCHADV_* environment variables, and writes a resolved
config snapshot next to its outputs. Errors exit nonzero with a single-line
`error: ...` message on stderr (config problems exit 2).
"""

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, load_config, save_config, train_config_from
from .data import load_image, load_manifest, preprocess_image
from .evaluation import run_setting_suite
from .generator import perturb
from .surrogate import load_classifier
from .training import load_checkpoint, train_generator
from .visualize import attack_cam_grid, save_image


def _require(cfg, section, key):
    value = cfg[section][key]
    if not value:
        raise ConfigError(f"{section}.{key}: required value is not set")
    return value


def _load_surrogate(cfg):
    _require(cfg, "surrogate", "weights")
    spec = {k: v for k, v in cfg["surrogate"].items() if v is not None}
    return load_classifier(spec)


def _images_to_tensor(arrays):
    stacked = np.stack(arrays).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(stacked))


def cmd_train(cfg):
    manifest_path = _require(cfg, "data", "train_manifest")
    classes_path = cfg["data"]["classes"] or None
    manifest = load_manifest(manifest_path, classes_path)
    surrogate = _load_surrogate(cfg)
    tcfg = train_config_from(cfg)
    resume = cfg["train"]["resume"] or None
    checkpoint = train_generator(manifest, surrogate, tcfg, resume=resume)
    save_config(cfg, Path(tcfg.checkpoint_dir) / "resolved_config.yaml")
    with open(Path(tcfg.checkpoint_dir) / "training_log.csv", newline="") as fh:
        rows = [row for row in csv.DictReader(fh)]
    last_epoch = max(int(r["epoch"]) for r in rows)
    finals = [float(r["total"]) for r in rows if int(r["epoch"]) == last_epoch]
    finite = [v for v in finals if not math.isnan(v)]
    mean_total = sum(finite) / len(finite) if finite else math.nan
    print(f"final epoch {last_epoch + 1}: mean objective {mean_total:.6f} "
          f"over {len(finals)} steps")
    print(f"checkpoint: {checkpoint}")
    return 0


def cmd_attack(cfg, input_dir, output_dir):
    checkpoint = _require(cfg, "attack", "checkpoint")
    epsilon = float(cfg["attack"]["epsilon"])
    net, _ = load_checkpoint(checkpoint)
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise ConfigError(f"input directory not found: {input_dir}")
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in sorted(p for p in input_dir.iterdir() if p.is_file()):
        try:
            array = preprocess_image(load_image(path))
        except (ValueError, OSError) as err:
            print(f"warning: skipping {path}: {err}", file=sys.stderr)
            continue
        images = _images_to_tensor([array])
        with torch.no_grad():
            perturbed = perturb(net, images, epsilon)
        out_path = output_dir / (path.stem + ".png")
        save_image(perturbed[0].permute(1, 2, 0).numpy(), out_path)
        rows.append([path.name, float((perturbed - images).abs().max()) * 255.0])
    with open(output_dir / "deltas.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "max_delta_255"])
        writer.writerows(rows)
    save_config(cfg, output_dir / "resolved_config.yaml")
    print(f"perturbed {len(rows)} image(s) into {output_dir}")
    return 0


def cmd_eval(cfg):
    checkpoint = _require(cfg, "attack", "checkpoint")
    specs = _require(cfg, "eval", "victims")
    victims, load_errors = [], []
    for spec in specs:
        try:
            victims.append(load_classifier(spec))
        except Exception as err:  # noqa: BLE001 - per-victim faults are reported rows
            load_errors.append((str(spec.get("id", "?")), str(err)))
    manifests = {
        name: load_manifest(path) for name, path in (cfg["eval"]["manifests"] or {}).items()
    }
    if not victims:
        for victim_id, message in load_errors:
            print(f"error loading victim {victim_id}: {message}", file=sys.stderr)
        raise ConfigError("eval.victims: no victim could be loaded")
    report = run_setting_suite(
        checkpoint, victims, manifests,
        epsilon=float(cfg["attack"]["epsilon"]),
        batch_size=int(cfg["eval"]["batch_size"]),
    )
    report.errors.extend(load_errors)
    report_dir = Path(cfg["eval"]["report_dir"])
    report_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(report_dir / "report.csv")
    table = report.format_table()
    (report_dir / "report.txt").write_text(table + "\n")
    save_config(cfg, report_dir / "resolved_config.yaml")
    print(table)
    return 0 if report.rows else 1


def cmd_visualize(cfg, image_paths, out=None):
    checkpoint = _require(cfg, "attack", "checkpoint")
    net, _ = load_checkpoint(checkpoint)
    surrogate = _load_surrogate(cfg)
    arrays = [preprocess_image(load_image(p)) for p in image_paths]
    images = _images_to_tensor(arrays)
    cam_class = cfg["visualize"]["cam_class"]
    class_index = None
    if cam_class is not None:
        if isinstance(cam_class, int):
            class_index = cam_class
        elif surrogate.classes and cam_class in surrogate.classes:
            class_index = surrogate.classes.index(cam_class)
        else:
            raise ConfigError(f"visualize.cam_class: unknown class {cam_class!r}")
    grid = attack_cam_grid(net, surrogate, images, float(cfg["attack"]["epsilon"]),
                           class_index=class_index)
    out_path = Path(out or cfg["visualize"]["output"])
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image(grid, out_path)
    save_config(cfg, out_path.with_name(out_path.stem + "_resolved_config.yaml"))
    print(f"grid written to {out_path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="patchadv",
        description="Train and evaluate transferable image perturbation generators.",
    )
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--seed", type=int, help="override train.seed")
    parser.add_argument("--out", help="override the command's primary output location")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", help="train the perturbation generator")
    p_attack = sub.add_parser("attack", help="perturb a directory of images")
    p_attack.add_argument("input_dir")
    p_attack.add_argument("output_dir")
    sub.add_parser("eval", help="evaluate a checkpoint against victim classifiers")
    p_vis = sub.add_parser("visualize", help="clean/perturbed CAM comparison grid")
    p_vis.add_argument("images", nargs="+")
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = []
        for token in extra:
            if token.startswith("--") and "=" in token and "." in token.split("=", 1)[0]:
                overrides.append(token[2:])
            else:
                raise ConfigError(f"unrecognized argument {token!r}")
        cfg = load_config(args.config, overrides=overrides)
        if args.seed is not None:
            cfg["train"]["seed"] = args.seed
        if args.out:
            section_key = {
                "train": ("train", "checkpoint_dir"),
                "eval": ("eval", "report_dir"),
                "visualize": ("visualize", "output"),
            }.get(args.command)
            if section_key:
                cfg[section_key[0]][section_key[1]] = args.out
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "attack":
            return cmd_attack(cfg, args.input_dir, args.output_dir)
        if args.command == "eval":
            return cmd_eval(cfg)
        return cmd_visualize(cfg, args.images, out=args.out)
    except ConfigError as err:
        print(f"error: {str(err).splitlines()[0]}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - CLI boundary
        message = " ".join(str(err).split()) or type(err).__name__
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
