"""Command line entry point: the pipeline as subcommands.

Values resolve in three layers: built-in defaults, then a JSON config file
(--config), then explicit flags. Every run that writes a report stamps the
resolved configuration, the seed, and a build identifier into it, so a report
is enough to re-run the experiment. Exit codes: 0 ok, 2 bad config or usage,
3 bad data, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import costmodel, domainforge, fixtures, trainkit
from .augment import AugmentConfig, preview_stages
from .domainforge import ForgeConfig, read_dataset, write_dataset
from .errors import CedgError, ConfigError, DataError
from .models import (
    SpearConfig, build_resnet20, build_spearnet, load_bundle, save_bundle,
)
from .ppm import read_ppm, write_ppm
from .rng import stream
from .tensor import PRESETS, SgdConfig

AUGMENT_STAGE_NAMES = ("crop", "flip", "gray", "smooth", "mask")


def _build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"cedg-{__version__}+{out.stdout.strip()}"
    except OSError:
        pass
    return f"cedg-{__version__}"


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return cfg


def _resolve(args, key: str, default):
    """Flag beats config file beats default. Flags parsed as None mean unset."""
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    return args._config.get(key, default)


def _int_tuple(text: str, expect: int | None = None) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in str(text).replace(" ", "").split(","))
    except ValueError as e:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from e
    if expect is not None and len(vals) != expect:
        raise ConfigError(f"expected {expect} comma-separated integers, got {text!r}")
    return vals


def _augment_config(args) -> AugmentConfig:
    spec = _resolve(args, "augment", "crop,flip,gray,smooth,mask")
    names = [] if spec in ("none", "") else str(spec).replace(" ", "").split(",")
    for n in names:
        if n not in AUGMENT_STAGE_NAMES:
            raise ConfigError(f"unknown augmentation stage {n!r} "
                              f"(known: {', '.join(AUGMENT_STAGE_NAMES)})")
    return AugmentConfig(**{n: (n in names) for n in AUGMENT_STAGE_NAMES})


def _sgd_from_preset(args, preset_key: str, default_preset: str) -> SgdConfig:
    name = _resolve(args, preset_key, default_preset)
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (known: {', '.join(sorted(PRESETS))})")
    cfg = PRESETS[name]
    lr = _resolve(args, "lr", None)
    if lr is not None:
        cfg = SgdConfig(batch_size=cfg.batch_size, lr_schedule=((0, None, float(lr)),),
                        weight_decay=cfg.weight_decay, momentum=cfg.momentum,
                        dampening=cfg.dampening, nesterov=cfg.nesterov)
    batch = _resolve(args, "batch-size", None)
    if batch is not None:
        cfg = SgdConfig(batch_size=int(batch), lr_schedule=cfg.lr_schedule,
                        weight_decay=cfg.weight_decay, momentum=cfg.momentum,
                        dampening=cfg.dampening, nesterov=cfg.nesterov)
    return cfg


def _spear_config(args) -> SpearConfig:
    blocks = _int_tuple(_resolve(args, "spear-blocks", "5,5,4"), 3)
    widths = _int_tuple(_resolve(args, "spear-widths", "8,16,32"), 3)
    return SpearConfig(stage_blocks=blocks, bottleneck_widths=widths)


def _report_skeleton(command: str, args, extra_config: dict) -> dict:
    return {
        "command": command,
        "build": _build_id(),
        "seed": int(_resolve(args, "seed", 0)),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": extra_config,
    }


def _write_report(args, report: dict) -> None:
    path = getattr(args, "report", None)
    if path:
        trainkit.write_summary_json(path, report)


def _eval_payload(ev: trainkit.EvalResult, categories) -> dict:
    acc = [None if np.isnan(a) else round(float(a), 6) for a in ev.per_class_acc]
    return {"categories": list(categories),
            "confusion": ev.confusion.tolist(),
            "per_class_accuracy": acc,
            "ave": round(float(ev.ave), 6),
            "er": round(float(ev.er), 6)}


def _sgd_payload(cfg: SgdConfig) -> dict:
    return {"batch_size": cfg.batch_size,
            "lr_schedule": [list(seg) for seg in cfg.lr_schedule],
            "weight_decay": cfg.weight_decay, "momentum": cfg.momentum,
            "dampening": cfg.dampening, "nesterov": cfg.nesterov}


def _records_payload(records) -> list[dict]:
    return [{"epoch": r.epoch, "train_loss": round(r.train_loss, 6),
             "val_ave": round(r.val_ave, 6), "val_er": round(r.val_er, 6)}
            for r in records]


def _require_same_categories(train, val) -> None:
    if train.categories != val.categories:
        raise DataError(f"train categories {train.categories} != "
                        f"val categories {val.categories}")


# -- subcommands --------------------------------------------------------------------


def cmd_make_fixtures(args) -> int:
    seed = int(_resolve(args, "seed", 0))
    counts = {"corpus_images": int(_resolve(args, "corpus-images", 120)),
              "train_count": int(_resolve(args, "train-count", 400)),
              "val_count": int(_resolve(args, "val-count", 200))}
    paths = fixtures.make_fixtures(args.out, seed=seed, **counts)
    report = _report_skeleton("make-fixtures", args, dict(counts, out=str(args.out)))
    report["paths"] = paths
    _write_report(args, report)
    print(json.dumps(paths, indent=2))
    return 0


def cmd_forge(args) -> int:
    lam = float(_resolve(args, "lambda", 0.7))
    cfg = ForgeConfig(score_threshold=lam,
                      min_side=int(_resolve(args, "min-side", 2)),
                      output_size=int(_resolve(args, "output-size", 32)))
    manifest = domainforge.load_corpus(args.manifest)
    proposals = domainforge.load_proposals(args.proposals)
    ds, stats = domainforge.forge_dataset(manifest, proposals, cfg)
    seed = int(_resolve(args, "seed", 0))
    provenance = {"manifest": str(args.manifest), "proposals": str(args.proposals),
                  "score_threshold": lam, "build": _build_id()}
    write_dataset(args.out, ds, provenance=provenance)
    report = _report_skeleton("forge", args, {
        "lambda": lam, "min_side": cfg.min_side, "output_size": cfg.output_size,
        "manifest": str(args.manifest), "proposals": str(args.proposals),
        "out": str(args.out)})
    report["kept_regions"] = stats.kept_regions
    report["dropped_regions"] = stats.dropped_regions
    report["per_category"] = stats.per_category
    report["corpus_skipped"] = manifest.skipped
    _write_report(args, report)
    print(json.dumps({"out": str(args.out), "samples": len(ds),
                      "per_category": stats.per_category}, indent=2))
    return 0


def cmd_pretrain_teacher(args) -> int:
    seed = int(_resolve(args, "seed", 0))
    epochs = int(_resolve(args, "epochs", 3))
    sgd = _sgd_from_preset(args, "preset", "pretrain")
    train = read_dataset(args.train)
    val = read_dataset(args.val)
    _require_same_categories(train, val)
    bundle = build_resnet20(num_classes=len(train.categories), seed=seed)
    records = trainkit.pretrain_teacher(bundle, train, val, cfg=sgd,
                                        epochs=epochs, seed=seed)
    save_bundle(args.out, bundle)
    if getattr(args, "records", None):
        trainkit.write_records_csv(args.records, records)
    best = min(records, key=lambda r: (r.val_er, r.epoch))
    report = _report_skeleton("pretrain-teacher", args, {
        "epochs": epochs, "sgd": _sgd_payload(sgd), "train": str(args.train),
        "val": str(args.val), "out": str(args.out)})
    report["records"] = _records_payload(records)
    report["best_epoch"] = best.epoch
    report["best_val_er"] = round(best.val_er, 6)
    _write_report(args, report)
    print(json.dumps({"out": str(args.out), "best_epoch": best.epoch,
                      "best_val_er": round(best.val_er, 6)}, indent=2))
    return 0


def cmd_distill(args) -> int:
    seed = int(_resolve(args, "seed", 0))
    epochs = int(_resolve(args, "epochs", 20))
    sgd = _sgd_from_preset(args, "preset", "stage1")
    teacher = load_bundle(args.teacher)
    common = read_dataset(args.train)
    spear = _spear_config(args)
    student = build_spearnet(spear, num_classes=teacher.num_classes, seed=seed,
                             teacher=teacher)
    result = trainkit.distill_stage1(
        teacher, student, common, cfg=sgd, epochs=epochs, seed=seed,
        finetune_re=bool(_resolve(args, "finetune-re", False)),
        finetune_epochs=int(_resolve(args, "finetune-epochs", 5)))
    save_bundle(args.out, student)
    report = _report_skeleton("distill", args, {
        "epochs": epochs, "sgd": _sgd_payload(sgd),
        "spear_blocks": list(spear.stage_blocks),
        "spear_widths": list(spear.bottleneck_widths),
        "teacher": str(args.teacher), "train": str(args.train),
        "out": str(args.out)})
    report["initial_heldout_lrp"] = round(result.initial_heldout, 6)
    report["best_epoch"] = result.best_epoch
    report["best_heldout_lrp"] = round(result.best_heldout, 6)
    report["records"] = [{"epoch": r.epoch, "train_lrp": round(r.train_lrp, 6),
                          "heldout_lrp": round(r.heldout_lrp, 6)}
                         for r in result.records]
    _write_report(args, report)
    print(json.dumps({"out": str(args.out),
                      "initial_heldout_lrp": round(result.initial_heldout, 6),
                      "best_heldout_lrp": round(result.best_heldout, 6),
                      "best_epoch": result.best_epoch}, indent=2))
    return 0


def cmd_train(args) -> int:
    seed = int(_resolve(args, "seed", 0))
    student = load_bundle(args.student)
    train = read_dataset(args.train)
    val = read_dataset(args.val)
    _require_same_categories(train, val)
    sgd = _sgd_from_preset(args, "preset", "stage3")
    cfg = trainkit.Stage3Config(
        sgd=sgd,
        epochs=_int_tuple(_resolve(args, "epochs", "5,4,5"), 3),
        gamma=float(_resolve(args, "gamma", 2.0)),
        use_cbw=not bool(_resolve(args, "no-cbw", False)),
        augment=_augment_config(args),
        variant=str(_resolve(args, "variant", "A1")),
        enlarged_hidden=_int_tuple(_resolve(args, "enlarged-hidden", "10240,64"), 2),
        seed=seed,
        workers=int(_resolve(args, "threads", 1)))
    result = trainkit.train_stage3(student, train, val, cfg)
    save_bundle(args.out, student)
    report = _report_skeleton("train", args, {
        "epochs": list(cfg.epochs), "gamma": cfg.gamma, "cbw": cfg.use_cbw,
        "variant": cfg.variant, "enlarged_hidden": list(cfg.enlarged_hidden),
        "sgd": _sgd_payload(sgd),
        "augment": [n for n in AUGMENT_STAGE_NAMES if getattr(cfg.augment, n)],
        "student": str(args.student), "train": str(args.train),
        "val": str(args.val), "out": str(args.out)})
    for name, step in result.steps.items():
        report[name] = {"records": _records_payload(step.records),
                        "best_epoch": step.best_epoch,
                        "best_val_ave": round(step.best_ave, 6)}
    report["final"] = _eval_payload(result.final, val.categories)
    if getattr(args, "records", None):
        trainkit.write_records_csv(args.records, result.steps["step3"].records)
    _write_report(args, report)
    print(json.dumps({"out": str(args.out),
                      "final_ave": round(result.final.ave, 6),
                      "final_er": round(result.final.er, 6)}, indent=2))
    return 0


def cmd_baseline(args) -> int:
    seed = int(_resolve(args, "seed", 0))
    train = read_dataset(args.train)
    val = read_dataset(args.val)
    _require_same_categories(train, val)
    phase1 = _sgd_from_preset(args, "phase1-preset", "stage1")
    phase2 = _sgd_from_preset(args, "phase2-preset", "stage3")
    p1_lr = _resolve(args, "phase1-lr", None)
    if p1_lr is not None:
        phase1 = SgdConfig(batch_size=phase1.batch_size,
                           lr_schedule=((0, None, float(p1_lr)),),
                           weight_decay=phase1.weight_decay, momentum=phase1.momentum,
                           dampening=phase1.dampening, nesterov=phase1.nesterov)
    cfg = trainkit.BaselineConfig(
        spear=_spear_config(args),
        variant=str(_resolve(args, "variant", "A1")),
        gamma=float(_resolve(args, "gamma", 2.0)),
        use_cbw=not bool(_resolve(args, "no-cbw", False)),
        augment=_augment_config(args),
        phase1=phase1, phase2=phase2,
        patience=int(_resolve(args, "patience", 50)),
        max_epochs=_int_tuple(_resolve(args, "max-epochs", "200,100"), 2),
        seed=seed,
        workers=int(_resolve(args, "threads", 1)))
    result = trainkit.baseline_no_cedg(train, val, cfg)
    save_bundle(args.out, result.bundle)
    report = _report_skeleton("baseline", args, {
        "patience": cfg.patience, "max_epochs": list(cfg.max_epochs),
        "gamma": cfg.gamma, "cbw": cfg.use_cbw, "variant": cfg.variant,
        "phase1": _sgd_payload(phase1), "phase2": _sgd_payload(phase2),
        "train": str(args.train), "val": str(args.val), "out": str(args.out)})
    report["records"] = _records_payload(result.records)
    report["phase1_epochs"] = result.phase1_epochs
    report["final"] = _eval_payload(result.final, val.categories)
    if getattr(args, "records", None):
        trainkit.write_records_csv(args.records, result.records)
    _write_report(args, report)
    print(json.dumps({"out": str(args.out),
                      "final_ave": round(result.final.ave, 6),
                      "final_er": round(result.final.er, 6)}, indent=2))
    return 0


def cmd_eval(args) -> int:
    bundle = load_bundle(args.checkpoint)
    ds = read_dataset(args.dataset)
    ev = trainkit.evaluate(bundle, ds)
    payload = _eval_payload(ev, ds.categories)
    report = _report_skeleton("eval", args, {"dataset": str(args.dataset),
                                             "checkpoint": str(args.checkpoint)})
    report.update(payload)
    _write_report(args, report)
    print(json.dumps(payload, indent=2))
    return 0


def cmd_cost(args) -> int:
    arch = str(_resolve(args, "arch", "spearnet"))
    num_classes = int(_resolve(args, "num-classes", 10))
    seed = 0
    if arch == "resnet20":
        bundle = build_resnet20(num_classes=num_classes, seed=seed)
    elif arch == "spearnet":
        bundle = build_spearnet(_spear_config(args), num_classes=num_classes, seed=seed)
    else:
        raise ConfigError(f"unknown arch {arch!r} (known: resnet20, spearnet)")
    whole = costmodel.bundle_report([bundle.base_spec, bundle.mid_spec, bundle.re_spec])
    base = costmodel.analyze(bundle.base_spec, (3, 32, 32))
    trunk = costmodel.bundle_report([bundle.base_spec, bundle.mid_spec])
    payload = {
        "arch": arch,
        "conv_layers": (bundle.base_spec.conv_layer_count()
                        + bundle.mid_spec.conv_layer_count()),
        "total_macs": whole.total_macs,
        "total_params": whole.total_params,
        "sections": {
            "base": {"macs": base.total_macs, "params": base.total_params},
            "mid": {"macs": trunk.total_macs - base.total_macs,
                    "params": trunk.total_params - base.total_params},
            "re": {"macs": whole.total_macs - trunk.total_macs,
                   "params": whole.total_params - trunk.total_params},
        },
    }
    report = _report_skeleton("cost", args, {"arch": arch, "num_classes": num_classes})
    report.update(payload)
    _write_report(args, report)
    print(json.dumps(payload, indent=2))
    return 0


def cmd_augment_preview(args) -> int:
    seed = int(_resolve(args, "seed", 0))
    img = read_ppm(args.image)
    cfg = _augment_config(args)
    rng = stream(seed, "augment-preview")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (name, stage_img) in enumerate(preview_stages(img, cfg, rng)):
        path = out_dir / f"{i:02d}_{name}.ppm"
        write_ppm(path, stage_img)
        written.append(str(path))
    print(json.dumps({"stages": written}, indent=2))
    return 0


# -- parser ----------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--report", help="write a JSON report here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cedg",
        description="Budgeted convnet training: distillation, dataset forging, "
                    "three-step classifier training, and a static cost model.")
    parser.add_argument("--version", action="version", version=_build_id())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-fixtures", help="generate the synthetic desk-scale corpus")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--corpus-images", type=int, dest="corpus_images")
    p.add_argument("--train-count", type=int, dest="train_count")
    p.add_argument("--val-count", type=int, dest="val_count")
    p.set_defaults(func=cmd_make_fixtures)

    p = sub.add_parser("forge", help="build a labeled dataset from a weak corpus")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", type=float, dest="_lambda", help="score threshold")
    p.add_argument("--min-side", type=int, dest="min_side")
    p.add_argument("--output-size", type=int, dest="output_size")
    p.set_defaults(func=cmd_forge)

    p = sub.add_parser("pretrain-teacher", help="supervised pretraining of the teacher")
    _add_common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--preset")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--records", help="write per-epoch CSV here")
    p.set_defaults(func=cmd_pretrain_teacher)

    p = sub.add_parser("distill", help="match the student trunk to the teacher features")
    _add_common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--preset")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--spear-blocks", dest="spear_blocks")
    p.add_argument("--spear-widths", dest="spear_widths")
    p.add_argument("--finetune-re", action="store_true", dest="finetune_re",
                   default=None)
    p.add_argument("--finetune-epochs", type=int, dest="finetune_epochs")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("train", help="three-step classifier training on the forged set")
    _add_common(p)
    p.add_argument("--student", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", help="three comma-separated step lengths")
    p.add_argument("--preset")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--variant", choices=("A1", "A2", "A3", "A4"))
    p.add_argument("--gamma", type=float)
    p.add_argument("--no-cbw", action="store_true", dest="no_cbw", default=None)
    p.add_argument("--augment", help="comma list of stages, or 'none'")
    p.add_argument("--enlarged-hidden", dest="enlarged_hidden")
    p.add_argument("--threads", type=int)
    p.add_argument("--records", help="write step-3 per-epoch CSV here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baseline", help="end-to-end training without distillation")
    _add_common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", dest="max_epochs")
    p.add_argument("--phase1-preset", dest="phase1_preset")
    p.add_argument("--phase2-preset", dest="phase2_preset")
    p.add_argument("--phase1-lr", type=float, dest="phase1_lr")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--variant", choices=("A1", "A2", "A3", "A4"))
    p.add_argument("--gamma", type=float)
    p.add_argument("--no-cbw", action="store_true", dest="no_cbw", default=None)
    p.add_argument("--augment")
    p.add_argument("--spear-blocks", dest="spear_blocks")
    p.add_argument("--spear-widths", dest="spear_widths")
    p.add_argument("--threads", type=int)
    p.add_argument("--records")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="confusion matrix and AVE/ER for a checkpoint")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost", help="static multiply and parameter counts")
    _add_common(p)
    p.add_argument("--arch", choices=("resnet20", "spearnet"))
    p.add_argument("--num-classes", type=int, dest="num_classes")
    p.add_argument("--spear-blocks", dest="spear_blocks")
    p.add_argument("--spear-widths", dest="spear_widths")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("augment-preview", help="write each augmentation stage as an image")
    _add_common(p)
    p.add_argument("--image", required=True, help="input PPM")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--augment")
    p.set_defaults(func=cmd_augment_preview)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args._config = _load_config_file(getattr(args, "config", None))
        if getattr(args, "_lambda", None) is not None:
            args._config = dict(args._config)
            args._config["lambda"] = args._lambda
        return args.func(args)
    except CedgError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
