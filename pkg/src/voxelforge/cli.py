"""Command-line entry point wiring every stage into reproducible runs.

Six subcommands: phantom (synthesize a labeled dataset), preprocess,
train, infer, merge, evaluate. One JSON config document drives a run;
--seed, --jobs, and --out override the matching config fields. Every
command writes a manifest whose first section is the fully resolved
config, so a run can be replayed from its own output. All config
problems are collected and reported in a single pass, and every handled
failure exits non-zero with a one-line "<error-class>: message" on
stderr.

Case files pair across directories by filename stem. Per-case work is
independent, so --jobs N fans it out over a thread pool without
changing any output byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .augment import POLICY_A, POLICY_B
from .infer import (
    EnsembleSpec,
    binarize,
    load_checkpoint,
    merge_labelmaps,
    predict_regions,
    reconstruct,
    transform_count,
)
from .metrics import RegionMetrics, aggregate, evaluate_case
from .preprocess import PreprocMode, brain_bounding_box, prepare_case
from .tensornet import save_params
from .train import (
    ScheduleA,
    ScheduleB,
    SWAConfig,
    TrainConfig,
    five_fold_split,
    train_pipeline_A,
    train_pipeline_B,
)
from .unet3d import ArchConfig, DiceLossSpec, DiceVariant, NormKind
from .volio import LabelMap, Volume4D, generate_phantom, read_segvol, write_segvol

logger = logging.getLogger(__name__)

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

_MODES = {"minmax": PreprocMode.MINMAX_CLIP, "zscore": PreprocMode.ZSCORE_NONZERO}
_NORMS = {"group": NormKind.GROUP, "instance": NormKind.INSTANCE}
_VARIANTS = {"squared": DiceVariant.SQUARED_DENOM, "plain": DiceVariant.PLAIN_DENOM}


class CliError(Exception):
    """Handled failure; printed as one line and mapped to an exit code."""

    exit_code = 1
    error_class = "error"


class ConfigError(CliError):
    exit_code = 2
    error_class = "config-error"


class InputError(CliError):
    exit_code = 3
    error_class = "input-error"


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------

_SECTION_DEFAULTS = {
    "phantom": {"cases": 5, "dims": [32, 32, 32]},
    "preprocess": {"images": None, "labels": None, "mode": "minmax"},
    "train": {
        "images": None,
        "labels": None,
        "pipeline": "A",
        "folds": 5,
        "mode": None,  # defaults per pipeline: A -> minmax, B -> zscore
        "patch": [16, 16, 16],
        "toy_scale_factor": 1,
        "arch": {"base_width": 8, "norm": "group"},
        "dice": {"variant": "squared", "epsilon": 1.0, "double_numerator": True},
        "schedule_a": {
            "epochs_total": 200,
            "flat_epochs": 100,
            "lr0": 1e-4,
            "swa": {"lr_restart": 5e-5, "cycle_epochs": 30, "snapshot_every": 3, "cycles": 5},
        },
        "schedule_b": {"epochs_max": 400, "lr0": 1e-4, "batch": 3},
    },
    "infer": {
        "images": None,
        "checkpoints": None,
        "arch": {"base_width": 8, "norm": "group"},
        "mode": "minmax",
        "tta": True,
        "threshold": 0.5,
    },
    "merge": {"a": None, "b": None},
    "evaluate": {"pred": None, "ref": None},
}

_GLOBAL_KEYS = ("seed", "out", "jobs")


def _merge_section(name: str, user: dict, errors: list[str]) -> dict:
    """Defaults overlaid with user values; unknown keys are collected."""
    defaults = _SECTION_DEFAULTS[name]
    out = {}
    for key, value in defaults.items():
        out[key] = json.loads(json.dumps(value)) if isinstance(value, (dict, list)) else value
    for key, value in user.items():
        if key not in defaults:
            errors.append(f"{name}.{key}: unknown field")
            continue
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                errors.append(f"{name}.{key}: expected an object")
                continue
            for sub, subval in value.items():
                if sub not in defaults[key]:
                    errors.append(f"{name}.{key}.{sub}: unknown field")
                elif isinstance(defaults[key][sub], dict):
                    if not isinstance(subval, dict):
                        errors.append(f"{name}.{key}.{sub}: expected an object")
                    else:
                        for s2, v2 in subval.items():
                            if s2 not in defaults[key][sub]:
                                errors.append(f"{name}.{key}.{sub}.{s2}: unknown field")
                            else:
                                out[key][sub][s2] = v2
                else:
                    out[key][sub] = subval
        else:
            out[key] = value
    return out


def _expect_int(errors, section, cfg, key, minimum):
    v = cfg.get(key)
    if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
        errors.append(f"{section}.{key}: expected an integer >= {minimum}, got {v!r}")
        return False
    return True


def _expect_choice(errors, section, cfg, key, choices):
    v = cfg.get(key)
    if v not in choices:
        errors.append(f"{section}.{key}: expected one of {sorted(choices)}, got {v!r}")
        return False
    return True


def _expect_dims(errors, section, cfg, key, minimum=1):
    v = cfg.get(key)
    ok = isinstance(v, (list, tuple)) and len(v) == 3 and all(
        isinstance(d, int) and not isinstance(d, bool) and d >= minimum for d in v
    )
    if not ok:
        errors.append(f"{section}.{key}: expected 3 integers >= {minimum}, got {v!r}")
    return ok


def _expect_path(errors, section, cfg, key, kind="directory"):
    v = cfg.get(key)
    if not isinstance(v, str) or not v:
        errors.append(f"{section}.{key}: required {kind} path is missing")
        return False
    return True


def resolve_config(raw: dict, command: str, overrides: dict) -> dict:
    """Validate the whole document in one pass and fill in defaults.

    Raises ConfigError listing every problem found, not just the first.
    """
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError("config: top-level JSON value must be an object")
    resolved = {"seed": raw.get("seed"), "out": raw.get("out", "."), "jobs": raw.get("jobs", 1)}
    for key in raw:
        if key not in _GLOBAL_KEYS and key not in _SECTION_DEFAULTS:
            errors.append(f"{key}: unknown section")
    for name in _SECTION_DEFAULTS:
        user = raw.get(name, {})
        if not isinstance(user, dict):
            errors.append(f"{name}: expected an object")
            user = {}
        resolved[name] = _merge_section(name, user, errors)

    for key, value in overrides.items():
        if value is not None:
            resolved[key] = value

    if resolved["seed"] is None:
        errors.append("seed: required (set it in the config or pass --seed)")
    elif not isinstance(resolved["seed"], int) or isinstance(resolved["seed"], bool) or resolved["seed"] < 0:
        errors.append(f"seed: expected a non-negative integer, got {resolved['seed']!r}")
    if not isinstance(resolved["jobs"], int) or isinstance(resolved["jobs"], bool) or resolved["jobs"] < 1:
        errors.append(f"jobs: expected an integer >= 1, got {resolved['jobs']!r}")
    if not isinstance(resolved["out"], str) or not resolved["out"]:
        errors.append(f"out: expected a non-empty path, got {resolved['out']!r}")

    ph = resolved["phantom"]
    _expect_int(errors, "phantom", ph, "cases", 1)
    _expect_dims(errors, "phantom", ph, "dims", minimum=16)

    pp = resolved["preprocess"]
    _expect_choice(errors, "preprocess", pp, "mode", set(_MODES))
    if command == "preprocess":
        _expect_path(errors, "preprocess", pp, "images")

    tr = resolved["train"]
    _expect_choice(errors, "train", tr, "pipeline", {"A", "B"})
    if tr["mode"] is None:
        tr["mode"] = "minmax" if tr["pipeline"] == "A" else "zscore"
    _expect_choice(errors, "train", tr, "mode", set(_MODES))
    _expect_choice(errors, "train", tr, "folds", {1, 5})
    if tr["pipeline"] == "B" and tr["folds"] == 1:
        errors.append("train.folds: pipeline B needs held-out validation, use folds=5")
    if _expect_dims(errors, "train", tr, "patch", minimum=8):
        if any(p % 8 for p in tr["patch"]):
            errors.append(f"train.patch: dims {tr['patch']} must be divisible by 8")
    _expect_int(errors, "train", tr, "toy_scale_factor", 1)
    _expect_int(errors, "train.arch", tr["arch"], "base_width", 2)
    _expect_choice(errors, "train.arch", tr["arch"], "norm", set(_NORMS))
    _expect_choice(errors, "train.dice", tr["dice"], "variant", set(_VARIANTS))
    if not isinstance(tr["dice"]["double_numerator"], bool):
        errors.append("train.dice.double_numerator: expected a boolean")
    sa = tr["schedule_a"]
    for key in ("epochs_total", "flat_epochs"):
        _expect_int(errors, "train.schedule_a", sa, key, 0)
    swa = sa["swa"]
    for key in ("cycle_epochs", "snapshot_every", "cycles"):
        _expect_int(errors, "train.schedule_a.swa", swa, key, 1)
    _expect_int(errors, "train.schedule_b", tr["schedule_b"], "epochs_max", 1)
    _expect_int(errors, "train.schedule_b", tr["schedule_b"], "batch", 1)
    if command == "train":
        _expect_path(errors, "train", tr, "images")
        _expect_path(errors, "train", tr, "labels")
        if not errors:
            try:
                _effective_schedule(tr)
            except ValueError as exc:
                errors.append(f"train.schedule_a: {exc}")

    inf = resolved["infer"]
    _expect_choice(errors, "infer", inf, "mode", set(_MODES))
    if not isinstance(inf["tta"], bool):
        errors.append(f"infer.tta: expected a boolean, got {inf['tta']!r}")
    if not isinstance(inf["threshold"], (int, float)) or not 0.0 < inf["threshold"] < 1.0:
        errors.append(f"infer.threshold: expected a number in (0, 1), got {inf['threshold']!r}")
    _expect_int(errors, "infer.arch", inf["arch"], "base_width", 2)
    _expect_choice(errors, "infer.arch", inf["arch"], "norm", set(_NORMS))
    if command == "infer":
        _expect_path(errors, "infer", inf, "images")
        cks = inf["checkpoints"]
        if not isinstance(cks, list) or not cks or not all(isinstance(c, str) for c in cks):
            errors.append("infer.checkpoints: expected a non-empty list of paths")

    if command == "merge":
        _expect_path(errors, "merge", resolved["merge"], "a")
        _expect_path(errors, "merge", resolved["merge"], "b")
    if command == "evaluate":
        _expect_path(errors, "evaluate", resolved["evaluate"], "pred")
        _expect_path(errors, "evaluate", resolved["evaluate"], "ref")

    if errors:
        raise ConfigError("; ".join(errors))
    return resolved


def _scale(value: int, factor: int) -> int:
    return max(1, value // factor)


def _effective_schedule(tr: dict) -> ScheduleA | ScheduleB:
    """Schedule with every epoch count divided by the toy factor."""
    factor = tr["toy_scale_factor"]
    if tr["pipeline"] == "A":
        sa = tr["schedule_a"]
        swa = sa["swa"]
        return ScheduleA(
            epochs_total=_scale(sa["epochs_total"], factor),
            flat_epochs=min(_scale(sa["flat_epochs"], factor), _scale(sa["epochs_total"], factor)),
            lr0=sa["lr0"],
            swa=SWAConfig(
                lr_restart=swa["lr_restart"],
                cycle_epochs=_scale(swa["cycle_epochs"], factor),
                snapshot_every=_scale(swa["snapshot_every"], factor),
                cycles=swa["cycles"],
            ),
        )
    sb = tr["schedule_b"]
    return ScheduleB(epochs_max=_scale(sb["epochs_max"], factor), lr0=sb["lr0"], batch=sb["batch"])


def _arch_from(cfg: dict) -> ArchConfig:
    return ArchConfig(base_width=cfg["base_width"], norm=_NORMS[cfg["norm"]])


# ---------------------------------------------------------------------------
# Shared file plumbing
# ---------------------------------------------------------------------------


def _case_files(directory, what: str) -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"{what} directory not found: {d}")
    files = {p.stem: p for p in sorted(d.glob("*.segv"))}
    if not files:
        raise InputError(f"no .segv files in {what} directory: {d}")
    return files


def _paired_stems(a: dict[str, Path], b: dict[str, Path], a_what: str, b_what: str) -> list[str]:
    only_a = sorted(set(a) - set(b))
    only_b = sorted(set(b) - set(a))
    if only_a or only_b:
        parts = []
        if only_a:
            parts.append(f"missing from {b_what}: {', '.join(only_a)}")
        if only_b:
            parts.append(f"missing from {a_what}: {', '.join(only_b)}")
        raise InputError(f"case sets differ; {'; '.join(parts)}")
    return sorted(a)


def _read_volume(path: Path) -> Volume4D:
    v = read_segvol(path)
    if not isinstance(v, Volume4D):
        raise InputError(f"{path} holds a labelmap, expected a multichannel volume")
    return v


def _read_labelmap(path: Path) -> LabelMap:
    lm = read_segvol(path)
    if not isinstance(lm, LabelMap):
        raise InputError(f"{path} holds a multichannel volume, expected a labelmap")
    return lm


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _run_per_case(stems, fn, jobs: int) -> list:
    """Apply fn to each stem, optionally on a thread pool; order preserved."""
    if jobs <= 1:
        return [fn(stem) for stem in stems]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, stems))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_phantom(cfg: dict) -> None:
    out = Path(cfg["out"])
    images = out / "images"
    labels = out / "labels"
    images.mkdir(parents=True, exist_ok=True)
    labels.mkdir(parents=True, exist_ok=True)
    dims = tuple(cfg["phantom"]["dims"])
    stems = [f"phantom{i:02d}" for i in range(cfg["phantom"]["cases"])]

    def build(stem: str) -> str:
        index = stems.index(stem)
        v, lm = generate_phantom(cfg["seed"] + index, dims)
        write_segvol(v, images / f"{stem}.segv")
        write_segvol(lm, labels / f"{stem}.segv")
        logger.info("phantom %s written", stem)
        return stem

    _run_per_case(stems, build, cfg["jobs"])
    _write_json(out / "phantom_manifest.json", {"config": cfg, "command": "phantom", "cases": stems})


def cmd_preprocess(cfg: dict) -> None:
    out = Path(cfg["out"])
    section = cfg["preprocess"]
    mode = _MODES[section["mode"]]
    images = _case_files(section["images"], "images")
    labels = _case_files(section["labels"], "labels") if section["labels"] else None
    stems = sorted(images) if labels is None else _paired_stems(images, labels, "images", "labels")
    (out / "images").mkdir(parents=True, exist_ok=True)
    if labels is not None:
        (out / "labels").mkdir(parents=True, exist_ok=True)

    def process(stem: str) -> dict:
        v = _read_volume(images[stem])
        lm = _read_labelmap(labels[stem]) if labels is not None else None
        box = brain_bounding_box(v)
        out_v, out_lm = prepare_case(v, lm, mode)
        write_segvol(out_v, out / "images" / f"{stem}.segv")
        if out_lm is not None:
            write_segvol(out_lm, out / "labels" / f"{stem}.segv")
        return {
            "case": stem,
            "orig_dims": list(v.spatial_dims),
            "bbox_min": list(box.min),
            "bbox_max": list(box.max),
        }

    records = _run_per_case(stems, process, cfg["jobs"])
    _write_json(
        out / "preprocess_manifest.json",
        {"config": cfg, "command": "preprocess", "cases": records},
    )


def _load_cases(image_files, label_files, stems):
    return {
        stem: (_read_volume(image_files[stem]), _read_labelmap(label_files[stem])) for stem in stems
    }


def cmd_train(cfg: dict) -> None:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    tr = cfg["train"]
    images = _case_files(tr["images"], "images")
    labels = _case_files(tr["labels"], "labels")
    stems = _paired_stems(images, labels, "images", "labels")
    cases = _load_cases(images, labels, stems)
    schedule = _effective_schedule(tr)
    arch = _arch_from(tr["arch"])
    dice_spec = DiceLossSpec(
        variant=_VARIANTS[tr["dice"]["variant"]],
        epsilon=tr["dice"]["epsilon"],
        double_numerator=tr["dice"]["double_numerator"],
    )
    policy = POLICY_A if tr["pipeline"] == "A" else POLICY_B

    if tr["folds"] == 1:
        fold_sets = [(stems, [])]
    else:
        if len(stems) < 5:
            raise InputError(f"five folds need at least 5 cases, found {len(stems)}")
        split = five_fold_split(stems, cfg["seed"])
        fold_sets = [split.train_val(i) for i in range(5)]

    fold_manifests = []
    for i, (train_ids, val_ids) in enumerate(fold_sets):
        train_cfg = TrainConfig(
            arch=arch,
            dice=dice_spec,
            policy=policy,
            preproc_mode=_MODES[tr["mode"]],
            patch=tuple(tr["patch"]),
            seed=cfg["seed"] + i,
        )
        train_cases = [cases[s] for s in train_ids]
        if tr["pipeline"] == "A":
            model, manifest = train_pipeline_A(train_cases, train_cfg, schedule)
        else:
            val_cases = [cases[s] for s in val_ids]
            model, manifest = train_pipeline_B(train_cases, val_cases, train_cfg, schedule)
        ckpt = out / f"fold{i}.tnpk"
        save_params(model.state_dict(), ckpt)
        manifest["fold"] = i
        manifest["checkpoint"] = ckpt.name
        manifest["train_cases"] = list(train_ids)
        manifest["val_cases"] = list(val_ids)
        fold_manifests.append(manifest)
        logger.info("fold %d trained on %d cases -> %s", i, len(train_ids), ckpt.name)

    _write_json(
        out / "train_manifest.json",
        {
            "config": cfg,
            "command": "train",
            "pipeline": tr["pipeline"],
            "effective_schedule": _schedule_dict(schedule),
            "folds": fold_manifests,
        },
    )


def _schedule_dict(schedule) -> dict:
    if isinstance(schedule, ScheduleA):
        d = asdict(schedule)
        d["kind"] = "A"
        return d
    d = asdict(schedule)
    d["kind"] = "B"
    return d


def cmd_infer(cfg: dict) -> None:
    out = Path(cfg["out"])
    section = cfg["infer"]
    images = _case_files(section["images"], "images")
    stems = sorted(images)
    arch = _arch_from(section["arch"])
    models = []
    for path in section["checkpoints"]:
        if not Path(path).is_file():
            raise InputError(f"checkpoint not found: {path}")
        try:
            models.append(load_checkpoint(path, arch))
        except ValueError as exc:
            raise InputError(str(exc)) from None
    spec = EnsembleSpec(models=tuple(models), tta=section["tta"], threshold=section["threshold"])
    mode = _MODES[section["mode"]]
    (out / "predictions").mkdir(parents=True, exist_ok=True)

    def infer_one(stem: str) -> tuple[dict, float]:
        start = time.perf_counter()
        v = _read_volume(images[stem])
        box = brain_bounding_box(v)
        prepped, _ = prepare_case(v, None, mode)
        probs = predict_regions(spec, prepped)
        masks = binarize(probs, spec.threshold)
        cropped = reconstruct(masks, spacing_mm=v.header.spacing_mm)
        full = np.zeros(v.spatial_dims, dtype=np.uint8)
        full[box.slices()] = cropped.labels
        write_segvol(LabelMap.from_array(full, spacing_mm=v.header.spacing_mm), out / "predictions" / f"{stem}.segv")
        padded_dims = tuple(-(-d // 8) * 8 for d in prepped.spatial_dims)
        n_transforms = transform_count(spec.tta, padded_dims)
        record = {
            "case": stem,
            "transforms": n_transforms,
            "predictions": n_transforms * len(models),
        }
        logger.info("case %s: %d predictions", stem, record["predictions"])
        return record, time.perf_counter() - start

    results = _run_per_case(stems, infer_one, cfg["jobs"])
    records = [r for r, _ in results]
    _write_json(
        out / "infer_manifest.json",
        {
            "config": cfg,
            "command": "infer",
            "checkpoints": [Path(p).name for p in section["checkpoints"]],
            "threshold": section["threshold"],
            "tta": section["tta"],
            "cases": records,
        },
    )
    # wall-clock times live apart from the manifest so replays stay byte-identical
    _write_json(
        out / "infer_timing.json",
        {"cases": [{"case": r["case"], "seconds": t} for r, t in results]},
    )


def cmd_merge(cfg: dict) -> None:
    out = Path(cfg["out"])
    a_files = _case_files(cfg["merge"]["a"], "first labelmap")
    b_files = _case_files(cfg["merge"]["b"], "second labelmap")
    stems = _paired_stems(a_files, b_files, "first labelmap", "second labelmap")
    (out / "merged").mkdir(parents=True, exist_ok=True)

    def merge_one(stem: str) -> str:
        merged = merge_labelmaps(_read_labelmap(a_files[stem]), _read_labelmap(b_files[stem]))
        write_segvol(merged, out / "merged" / f"{stem}.segv")
        return stem

    _run_per_case(stems, merge_one, cfg["jobs"])
    _write_json(out / "merge_manifest.json", {"config": cfg, "command": "merge", "cases": stems})


def cmd_evaluate(cfg: dict) -> None:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    pred_files = _case_files(cfg["evaluate"]["pred"], "prediction")
    ref_files = _case_files(cfg["evaluate"]["ref"], "reference")
    stems = _paired_stems(pred_files, ref_files, "prediction", "reference")

    def evaluate_one(stem: str) -> dict:
        report = evaluate_case(_read_labelmap(pred_files[stem]), _read_labelmap(ref_files[stem]))
        return {region: asdict(m) for region, m in report.items()}

    per_case = _run_per_case(stems, evaluate_one, cfg["jobs"])
    case_reports = [
        {region: RegionMetrics(**values) for region, values in rep.items()} for rep in per_case
    ]
    report = aggregate(case_reports)
    _write_json(
        out / "metrics.json",
        {
            "config": cfg,
            "command": "evaluate",
            "per_case": dict(zip(stems, per_case)),
            "aggregate": report.to_json_dict(),
        },
    )
    table = report.to_text_table()
    (out / "metrics.txt").write_text(table + "\n")
    print(table)


_COMMANDS = {
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "infer": cmd_infer,
    "merge": cmd_merge,
    "evaluate": cmd_evaluate,
}


def _setup_logging() -> None:
    level_name = os.environ.get("VOXELFORGE_LOG", "error").lower()
    if level_name not in _LOG_LEVELS:
        raise ConfigError(
            f"VOXELFORGE_LOG: expected one of {sorted(_LOG_LEVELS)}, got {level_name!r}"
        )
    logging.basicConfig(
        level=_LOG_LEVELS[level_name],
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxelforge", description="Brain tumor segmentation pipeline."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config document")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--jobs", type=int, default=None, help="parallel case workers")
        p.add_argument("--out", default=None, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        raw = _load_config_file(args.config)
        cfg = resolve_config(
            raw, args.command, {"seed": args.seed, "jobs": args.jobs, "out": args.out}
        )
        _COMMANDS[args.command](cfg)
    except CliError as exc:
        message = str(exc).replace("\n", "; ")
        print(f"{exc.error_class}: {message}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
