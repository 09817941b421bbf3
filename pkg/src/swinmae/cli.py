"""Command-line entry point: ``swinmae <command> [flags]``.

Every command writes into ``--out`` and embeds the effective run config
(command, profile, seed, full model and schedule, command options) in each
artifact it produces. Passing that embedded JSON back through ``--config``
reproduces the artifact byte for byte.

On failure a single JSON line goes to stderr, anything the command already
wrote is removed, and the exit code is 1 (usage/config), 2 (data) or
3 (numerical failure).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from swinmae.checkpoint import CheckpointError, NamedTensorStore, load_checkpoint, save_checkpoint
from swinmae.config import ConfigError, ModelConfig, ScheduleConfig, profile
from swinmae.data import (
    DataError,
    ManifestError,
    foreground_only,
    ingest_manifest,
    load_manifest,
    make_splits,
    subset_fraction,
    synth_corpus,
)
from swinmae.downstream import TransferError, TransferPolicy
from swinmae.optim import NonFiniteError
from swinmae.stats import (
    CrossValError,
    MetricKind,
    UndefinedMetric,
    auroc,
    bootstrap_compare,
    delong_test,
    mean_report,
    metric_report,
    paired_ttest,
    result_rows,
    write_results_csv,
    CrossValResult,
)
from swinmae.training import (
    downstream_store,
    evaluate_seg,
    finetune_cls,
    finetune_seg,
    predict_proba,
    pretrain_run,
    write_log_csv,
)

log = logging.getLogger("swinmae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_DATA_ERRORS = (DataError, ManifestError, CheckpointError, TransferError, CrossValError, UndefinedMetric,
                FileNotFoundError, ValueError)

# per-command options and their defaults; None means "derive from the model config"
OPTIONS: dict[str, dict[str, Any]] = {
    "synth": {"n": 200, "size": None, "classes": 3, "noise": 0.05},
    "pretrain": {"manifest": None, "modality": None},
    "finetune-seg": {"manifest": None, "ckpt": None, "policy": "radiological-seg", "fraction": 1.0, "fold": 0,
                     "foreground": False},
    "finetune-cls": {"manifest": None, "ckpt": None, "policy": "classify", "fraction": 1.0, "fold": 0},
    "evaluate": {"reference": None, "candidate": None, "resamples": 1000},
    "efficiency-sweep": {"manifest": None, "ckpt": None, "policy": "radiological-seg", "fold": 0,
                         "fractions": [0.1, 0.5, 0.8, 1.0], "seeds": None, "foreground": False,
                         "resamples": 1000},
}
_STAGE = {"pretrain": "pretrain", "finetune-seg": "finetune_seg", "efficiency-sweep": "finetune_seg",
          "finetune-cls": "finetune_cls"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- run config ----------------------------------------------------------------

@dataclass
class RunConfig:
    command: str
    profile: str = "toy"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: Optional[ScheduleConfig] = None
    options: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "profile": self.profile,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "schedule": None if self.schedule is None else self.schedule.to_dict(),
            "options": self.options,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


_MODEL_KEYS = set(ModelConfig().to_dict())
_SCHEDULE_KEYS = set(ScheduleConfig().to_dict())
_TOP_KEYS = {"command", "profile", "seed", "model", "schedule", "options"}


def _parse_set(items: list[str]) -> tuple[dict, dict]:
    model, sched = {}, {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if key in _MODEL_KEYS:
            model[key] = value
        elif key in _SCHEDULE_KEYS:
            sched[key] = value
        else:
            raise ConfigError(f"--set: unknown config key {key!r}")
    return model, sched


def _tupled(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def build_run_config(command: str, args: argparse.Namespace) -> RunConfig:
    """Merge, lowest to highest precedence: profile defaults, --config file, flags."""
    file_cfg: dict = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(file_cfg) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if file_cfg.get("command", command) != command:
            raise ConfigError(f"config was written for {file_cfg['command']!r}, not {command!r}")

    prof_name = args.profile or file_cfg.get("profile") or "toy"
    prof = profile(prof_name)
    seed = args.seed if args.seed is not None else int(file_cfg.get("seed", 0))

    set_model, set_sched = _parse_set(getattr(args, "set", None))
    model_d = {**prof.model.to_dict(), **(file_cfg.get("model") or {}), **set_model}
    try:
        model = ModelConfig.from_dict(_tupled(model_d))
        model.validate()
    except TypeError as exc:
        raise ConfigError(f"bad model config value: {exc}") from None

    schedule = None
    if command in _STAGE:
        base = getattr(prof, _STAGE[command])
        sched_d = {**base.to_dict(), **(file_cfg.get("schedule") or {}), **set_sched}
        try:
            schedule = ScheduleConfig.from_dict(_tupled(sched_d))
        except TypeError as exc:
            raise ConfigError(f"bad schedule value: {exc}") from None
    elif set_sched or file_cfg.get("schedule"):
        raise ConfigError(f"{command} takes no schedule settings")

    defaults = OPTIONS[command]
    from_file = file_cfg.get("options") or {}
    unknown = set(from_file) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown options for {command}: {sorted(unknown)}")
    options = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        options[key] = flag if flag is not None else from_file.get(key, default)
    return RunConfig(command, prof_name, seed, model, schedule, options)


# -- output bookkeeping ------------------------------------------------------------

class Outputs:
    """Tracks files a command creates so a failure can remove them."""

    def __init__(self, root):
        if root is None:
            raise UsageError("--out is required")
        self.root = Path(root)
        self.created_root = not self.root.exists()
        self.paths: list[Path] = []
        self.root.mkdir(parents=True, exist_ok=True)

    def __call__(self, name: str) -> Path:
        p = self.root / name
        self.paths.append(p)
        return p

    def rollback(self) -> None:
        for p in reversed(self.paths):
            for q in (p, p.with_name(p.name + ".tmp")):
                if q.is_dir():
                    shutil.rmtree(q, ignore_errors=True)
                elif q.exists():
                    q.unlink()
        if self.created_root and self.root.exists() and not any(self.root.iterdir()):
            self.root.rmdir()


def _comment(run: RunConfig) -> str:
    return f"run_config={run.to_json()}"


def schedule_echo(stage: str, s: ScheduleConfig) -> str:
    return (f"{stage} schedule: lr {s.base_lr!r} warmup {s.warmup_epochs} epochs {s.total_epochs} "
            f"batch {s.batch_size} weight_decay {s.weight_decay!r}")


def _records(run: RunConfig, need: str):
    manifest_path = run.options.get("manifest")
    if not manifest_path:
        raise UsageError("--manifest is required")
    manifest = load_manifest(manifest_path, target_size=run.model.image_size)
    records = ingest_manifest(manifest)
    if not records:
        raise DataError("manifest has no entries")
    chans = {r.pixels.shape[2] for r in records}
    if chans != {run.model.in_chans}:
        raise DataError(f"images have {sorted(chans)} channel(s), model expects {run.model.in_chans}")
    if need == "mask" and any(r.seg_mask is None for r in records):
        raise DataError("segmentation needs a mask_path for every entry")
    if need == "label" and any(r.class_label is None for r in records):
        raise DataError("classification needs a class_label for every entry")
    return manifest, records


def _checkpoint(run: RunConfig) -> Optional[NamedTensorStore]:
    policy = TransferPolicy(run.options["policy"])
    path = run.options.get("ckpt")
    if policy is TransferPolicy.SCRATCH:
        return None
    if not path:
        raise UsageError(f"--ckpt is required for policy {policy.value}")
    return load_checkpoint(path)


def _fold_records(run: RunConfig, records, fraction: float):
    by_id = {r.id: r for r in records}
    split = make_splits([r.id for r in records], run.seed)
    k = int(run.options["fold"])
    if not 0 <= k < len(split.folds):
        raise UsageError(f"--fold must be in [0, {len(split.folds)})")
    sub = subset_fraction(split, fraction, run.seed).folds[k]
    pick = lambda ids: [by_id[i] for i in ids]  # noqa: E731
    return split.folds[k], pick(sub.train), pick(sub.val), pick(sub.test)


def _write_cases(path, run: RunConfig, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# {_comment(run)}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_cases(path) -> tuple[list[str], list[dict]]:
    try:
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    reader = csv.DictReader(lines)
    rows = list(reader)
    if not rows or reader.fieldnames is None or "id" not in reader.fieldnames:
        raise DataError(f"{path}: not a per-case results file")
    return reader.fieldnames, rows


# -- commands ----------------------------------------------------------------------

def cmd_synth(run: RunConfig, out: Outputs) -> str:
    o = run.options
    size = o["size"] or list(run.model.image_size)
    if isinstance(size, int):
        size = [size, size]
    o["size"] = [int(v) for v in size]
    for name in ("images", "masks", "manifest.jsonl"):
        out(name)
    manifest, _ = synth_corpus(int(o["n"]), tuple(o["size"]), int(o["classes"]), float(o["noise"]), run.seed,
                               out_dir=out.root, extra_meta={"run_config": run.to_dict()})
    return f"wrote {len(manifest)} images to {out.root}"


def cmd_pretrain(run: RunConfig, out: Outputs) -> str:
    manifest, records = _records(run, "image")
    if run.options["modality"]:
        records = [r for r in records if r.modality.value == run.options["modality"]]
        if not records:
            raise DataError(f"no images with modality {run.options['modality']}")
    print(schedule_echo("pretrain", run.schedule))
    ckpt, log_csv = out("pretrain.ckpt"), out("pretrain_log.csv")
    _, history = pretrain_run(records, run.model, run.schedule, out=ckpt, seed=run.seed,
                              modality=run.options["modality"], extra_metadata={"run_config": run.to_dict()})
    write_log_csv(history, log_csv, comment=_comment(run))
    last = f"{history[-1].mean_loss:.6f}" if history else "n/a"
    return f"pretrained {len(records)} images for {run.schedule.total_epochs} epochs, final loss {last}"


def cmd_finetune_seg(run: RunConfig, out: Outputs) -> str:
    manifest, records = _records(run, "mask")
    n_classes = manifest.class_count
    if run.options["foreground"]:
        records, n_classes = foreground_only(records), 2
    ckpt = _checkpoint(run)
    print(schedule_echo("finetune_seg", run.schedule))
    _, train, val, test = _fold_records(run, records, float(run.options["fraction"]))
    paths = [out(n) for n in ("finetune_seg.ckpt", "transfer_report.csv", "finetune_log.csv", "cases.csv")]
    model, report, history = finetune_seg(train, run.model, n_classes, run.schedule, run.seed, ckpt,
                                          run.options["policy"], val)
    save_checkpoint(downstream_store(model, report, run.schedule, run.seed, {"run_config": run.to_dict()}), paths[0])
    report.to_csv(paths[1], comment=_comment(run))
    write_log_csv(history, paths[2], comment=_comment(run))
    scores = evaluate_seg(model, test)
    _write_cases(paths[3], run, ["id", "dice"], [[i, f"{scores[i]:.9f}"] for i in sorted(scores)])
    return f"test dice {np.mean(list(scores.values())):.4f} over {len(scores)} cases ({len(train)} train)"


def cmd_finetune_cls(run: RunConfig, out: Outputs) -> str:
    manifest, records = _records(run, "label")
    n_classes = manifest.class_count
    ckpt = _checkpoint(run)
    print(schedule_echo("finetune_cls", run.schedule))
    _, train, val, test = _fold_records(run, records, float(run.options["fraction"]))
    paths = [out(n) for n in ("finetune_cls.ckpt", "transfer_report.csv", "finetune_log.csv", "cases.csv")]
    model, report, history = finetune_cls(train, run.model, n_classes, run.schedule, run.seed, ckpt,
                                          run.options["policy"], val)
    save_checkpoint(downstream_store(model, report, run.schedule, run.seed, {"run_config": run.to_dict()}), paths[0])
    report.to_csv(paths[1], comment=_comment(run))
    write_log_csv(history, paths[2], comment=_comment(run))
    probs = predict_proba(model, test)
    rows = [[r.id, r.class_label, *(f"{p:.9f}" for p in probs[i])] for i, r in enumerate(test)]
    _write_cases(paths[3], run, ["id", "label", *(f"p_{k}" for k in range(n_classes))], rows)
    return f"classified {len(test)} test cases ({len(train)} train)"


def _aligned(ref_rows, cand_rows, ref_path, cand_path):
    ref = {r["id"]: r for r in ref_rows}
    cand = {r["id"]: r for r in cand_rows}
    if set(ref) != set(cand):
        raise DataError(f"{ref_path} and {cand_path} cover different case ids")
    ids = sorted(ref)
    return ids, [ref[i] for i in ids], [cand[i] for i in ids]


def cmd_evaluate(run: RunConfig, out: Outputs) -> str:
    o = run.options
    if not o["reference"] or not o["candidate"]:
        raise UsageError("--reference and --candidate are required")
    ref_fields, ref_rows = _read_cases(o["reference"])
    cand_fields, cand_rows = _read_cases(o["candidate"])
    if ref_fields != cand_fields:
        raise DataError("result files have different columns")
    ids, ref, cand = _aligned(ref_rows, cand_rows, o["reference"], o["candidate"])
    n, B = len(ids), int(o["resamples"])
    names = (Path(o["reference"]).parent.name or "reference", Path(o["candidate"]).parent.name or "candidate")
    if "dice" in ref_fields:
        task, kind = "seg", MetricKind.DICE
        a = np.array([float(r["dice"]) for r in ref])
        b = np.array([float(r["dice"]) for r in cand])
        reps = [mean_report(a, B, run.seed, kind), mean_report(b, B, run.seed, kind)]
        cmp = paired_ttest(b, a)
    else:
        task, kind = "cls", MetricKind.AUROC
        pcols = [c for c in ref_fields if c.startswith("p_")]
        labels = np.array([int(r["label"]) for r in ref])
        if [int(r["label"]) for r in cand] != labels.tolist():
            raise DataError("result files disagree on case labels")
        pa = np.array([[float(r[c]) for c in pcols] for r in ref])
        pb = np.array([[float(r[c]) for c in pcols] for r in cand])
        metric = lambda p: (lambda idx: auroc(p[idx], labels[idx]))  # noqa: E731
        reps = [metric_report(kind, metric(pa), n, B, run.seed), metric_report(kind, metric(pb), n, B, run.seed)]
        present = np.unique(labels)
        if len(present) == 2:
            pos = (labels == present[1]).astype(int)
            cmp = delong_test(pb[:, present[1]], pa[:, present[1]], pos).comparison
        else:
            cmp = bootstrap_compare(metric(pb), metric(pa), n, B, run.seed)
    rows = []
    for name, rep, p in zip(names, reps, (None, cmp.p_value)):
        rows += result_rows(task, name, CrossValResult([], rep), p)
    path = out("results.csv")
    write_results_csv(rows, path, comment=_comment(run))
    return f"{kind.value}: {names[0]} {reps[0].point:.4f} vs {names[1]} {reps[1].point:.4f}, p={cmp.p_value:.4g}"


def cmd_efficiency_sweep(run: RunConfig, out: Outputs) -> str:
    o = run.options
    manifest, records = _records(run, "mask")
    n_classes = manifest.class_count
    if o["foreground"]:
        records, n_classes = foreground_only(records), 2
    ckpt = _checkpoint(run)
    seeds = o["seeds"] if o["seeds"] is not None else [run.seed]
    o["seeds"] = [int(s) for s in seeds]
    print(schedule_echo("finetune_seg", run.schedule))
    path = out("sweep.csv")
    rows = []
    for frac in o["fractions"]:
        _, train, _, test = _fold_records(run, records, float(frac))
        per_case = np.zeros(len(test))
        for s in o["seeds"]:
            model, _, _ = finetune_seg(train, run.model, n_classes, run.schedule, s, ckpt, o["policy"])
            scores = evaluate_seg(model, test)
            per_case += np.array([scores[r.id] for r in test])
        rep = mean_report(per_case / len(o["seeds"]), int(o["resamples"]), run.seed)
        rows.append([f"{float(frac):g}", f"{rep.point:.6f}", f"{rep.ci_low:.6f}", f"{rep.ci_high:.6f}"])
        log.info("fraction %s: %d train, dice %s", frac, len(train), rows[-1][1])
    _write_cases(path, run, ["fraction", "metric", "ci_low", "ci_high"], rows)
    return "; ".join(f"{r[0]}: {r[1]}" for r in rows)


def cmd_inspect(path, run_config_only: bool = False) -> str:
    store = load_checkpoint(path)
    if run_config_only:
        rc = store.metadata.get("run_config")
        if rc is None:
            raise DataError(f"{path} has no embedded run config")
        return json.dumps(rc, sort_keys=True, indent=2)
    lines = ["metadata:", json.dumps(store.metadata, sort_keys=True, indent=2), "tensors:"]
    table = store.table()
    width = max((len(r["name"]) for r in table), default=4)
    lines.append(f"{'name':<{width}}  {'shape':<18} {'offset':>10} {'length':>10}")
    for r in table:
        shape = "x".join(map(str, r["shape"])) or "scalar"
        lines.append(f"{r['name']:<{width}}  {shape:<18} {r['offset']:>10} {r['length']:>10}")
    total = sum(int(np.prod(r["shape"], dtype=np.int64)) for r in table)
    lines.append(f"{len(table)} tensors, {total} parameters")
    return "\n".join(lines)


def cmd_show_config(run: RunConfig) -> str:
    prof = profile(run.profile)
    out = [f"profile {run.profile}"]
    for stage in ("pretrain", "finetune_seg", "finetune_cls"):
        s = getattr(prof, stage)
        if run.schedule is not None and _STAGE.get(run.command) == stage:
            s = run.schedule
        out.append(schedule_echo(stage, s))
    out.append("model " + json.dumps(run.model.to_dict(), sort_keys=True))
    return "\n".join(out)


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune-seg": cmd_finetune_seg,
    "finetune-cls": cmd_finetune_cls,
    "evaluate": cmd_evaluate,
    "efficiency-sweep": cmd_efficiency_sweep,
}


# -- argument parsing ----------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="swinmae", description="Swin masked-autoencoder pretraining and downstream evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, schedule=True):
        sp.add_argument("--config", help="JSON run config (unknown keys are rejected)")
        sp.add_argument("--profile", choices=["toy", "paper"])
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one model%s field (repeatable)" % (" or schedule" if schedule else ""))
        sp.add_argument("-v", "--verbose", action="store_true")

    s = sub.add_parser("synth", help="write a synthetic shapes corpus and manifest")
    common(s, schedule=False)
    s.add_argument("--n", type=int)
    s.add_argument("--size", type=int, help="square image side (default: model image size)")
    s.add_argument("--classes", type=int, help="number of shape classes (2-5)")
    s.add_argument("--noise", type=float)

    s = sub.add_parser("pretrain", help="MAE pretraining")
    common(s)
    s.add_argument("--manifest")
    s.add_argument("--modality", choices=["MR", "CT_PET", "US", "XRAY", "COLOR", "SYNTH"])

    for name, pol in (("finetune-seg", "radiological-seg"), ("finetune-cls", "classify")):
        s = sub.add_parser(name, help=f"{name.split('-')[1]} finetuning on one fold")
        common(s)
        s.add_argument("--manifest")
        s.add_argument("--ckpt", help="pretrained checkpoint")
        s.add_argument("--policy", choices=[t.value for t in TransferPolicy], help=f"default {pol}")
        s.add_argument("--fraction", type=float, help="fraction of the fold's train set")
        s.add_argument("--fold", type=int)
        if name == "finetune-seg":
            s.add_argument("--foreground", action="store_true", default=None,
                           help="merge all foreground classes into one")

    s = sub.add_parser("evaluate", help="compare two per-case result files")
    common(s, schedule=False)
    s.add_argument("--reference", help="cases.csv of the reference model")
    s.add_argument("--candidate", help="cases.csv of the compared model")
    s.add_argument("--resamples", type=int)

    s = sub.add_parser("efficiency-sweep", help="finetune on nested train fractions")
    common(s)
    s.add_argument("--manifest")
    s.add_argument("--ckpt")
    s.add_argument("--policy", choices=[t.value for t in TransferPolicy])
    s.add_argument("--fold", type=int)
    s.add_argument("--fraction", dest="fractions", type=_floats, help="comma-separated fractions")
    s.add_argument("--seeds", type=_ints, help="comma-separated finetuning seeds")
    s.add_argument("--foreground", action="store_true", default=None)
    s.add_argument("--resamples", type=int)

    s = sub.add_parser("inspect", help="print a checkpoint's tensor table and metadata")
    s.add_argument("ckpt")
    s.add_argument("--run-config", action="store_true", help="print only the embedded run config")

    s = sub.add_parser("show-config", help="echo the effective configuration")
    s.add_argument("--config")
    s.add_argument("--profile", choices=["toy", "paper"])
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--stage", choices=["pretrain", "finetune-seg", "finetune-cls"], default="pretrain")
    return p


def _fail(command: Optional[str], exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(json.dumps({"error": type(exc).__name__, "exit_code": code, "command": command, "message": msg},
                     sort_keys=True), file=sys.stderr)
    return code


def main(argv: Optional[list[str]] = None) -> int:
    parser = make_parser()
    command = None
    out = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if command == "inspect":
            print(cmd_inspect(args.ckpt, args.run_config))
            return EXIT_OK
        if command == "show-config":
            print(cmd_show_config(build_run_config(args.stage, args)))
            return EXIT_OK
        run = build_run_config(command, args)
        if run.options.get("policy") is not None:
            run.options["policy"] = TransferPolicy(run.options["policy"]).value
        out = Outputs(args.out)
        print(COMMANDS[command](run, out))
        return EXIT_OK
    except (UsageError, ConfigError) as exc:
        code = EXIT_USAGE
        err = exc
    except NonFiniteError as exc:
        code, err = EXIT_NUMERIC, exc
    except _DATA_ERRORS as exc:
        code, err = EXIT_DATA, exc
    except BaseException:
        if out is not None:
            out.rollback()
        raise
    if out is not None:
        out.rollback()
    return _fail(command, err, code)


if __name__ == "__main__":
    sys.exit(main())
