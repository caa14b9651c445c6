"""Command-line entry points: train, eval, analyze and sweep.

Every command is driven by a YAML run config with ``data``, ``train`` and
optional ``output`` sections. Exit codes are stable: 0 success, 1 invalid
input, 2 training diverged, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import yaml

from . import __version__
from .data import (DatasetError, SyntheticConfig, coco_class_count, dataset_fingerprint,
                   generate_synthetic_dataset, load_coco_json, sample_labeled_split)
from .detector import Detector
from .evaluation import diagnostics_over_training, map_50_95
from .trainer import (CheckpointError, ConfigError, TrainConfig, TrainingDiverged,
                      load_checkpoint, train)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_DIVERGED = 2
EXIT_IO = 3

OUTPUT_ROOT_ENV = "SSDET_OUTPUT_ROOT"
SWEEP_PARAMS = ("delta", "alpha", "lambda_u", "burn_in_iters", "roi_cls_loss")
SECTIONS = ("data", "train", "output")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class RunManifest:
    config: dict
    seed: int
    code_version: str
    dataset_fingerprint: str
    output_dir: str

    def write(self, run_dir: Path) -> Path:
        path = Path(run_dir) / "manifest.json"
        if path.exists():
            raise CliError(f"{run_dir} already holds a run; pick a fresh output directory")
        run_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def code_version() -> str:
    """Package version plus a hash of the package sources."""
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# --- config ---------------------------------------------------------------

def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from exc
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise CliError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise CliError(f"config {path} must be a mapping")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise CliError(f"config {path}: unknown sections {sorted(unknown)}")
    return raw


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key=value`` strings; keys without a section prefix go to ``train``."""
    out = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise CliError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if parts[0] not in SECTIONS:
            parts = ["train"] + parts
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise CliError(f"override {item!r}: {p} is not a mapping")
        try:
            node[parts[-1]] = yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise CliError(f"override {item!r}: cannot parse value") from exc
    return out


def _resolve(path, base_dir: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base_dir / p


def _load_source(source, base_dir: Path, what: str) -> tuple:
    """(samples, class_count) for a ``{synthetic: {...}}`` or ``{coco: path}`` block."""
    if not isinstance(source, dict) or len({"synthetic", "coco"} & set(source)) != 1:
        raise CliError(f"data.{what}: give exactly one of 'synthetic' or 'coco'")
    if "coco" in source:
        path = _resolve(source["coco"], base_dir)
        if not path.is_file():
            raise CliError(f"data.{what}: dataset file {path} does not exist", EXIT_IO)
        try:
            return load_coco_json(path), coco_class_count(path)
        except DatasetError as exc:
            raise CliError(f"data.{what}: {exc}") from exc
    try:
        fields = dict(source["synthetic"] or {})
        for k in ("class_frequencies", "objects_per_image", "size_range"):
            if k in fields:
                fields[k] = tuple(fields[k])
        cfg = SyntheticConfig(**fields)
        return generate_synthetic_dataset(cfg), cfg.class_count
    except (TypeError, DatasetError) as exc:
        raise CliError(f"data.{what}.synthetic: {exc}") from exc


@dataclass
class RunData:
    split: object
    test: list
    class_count: int
    fingerprint: str


def build_data(data_cfg: dict, base_dir: Path) -> RunData:
    data_cfg = dict(data_cfg or {})
    train_source = {k: data_cfg[k] for k in ("synthetic", "coco") if k in data_cfg}
    samples, class_count = _load_source(train_source or {"synthetic": {}}, base_dir, "train")
    test, test_classes = [], class_count
    if data_cfg.get("test") is not None:
        test, test_classes = _load_source(data_cfg["test"], base_dir, "test")
    if test_classes != class_count:
        raise CliError(f"data.test has {test_classes} classes, training data has {class_count}")
    try:
        split = sample_labeled_split(samples, float(data_cfg.get("labeled_fraction", 0.01)),
                                     int(data_cfg.get("split_seed", 0)), class_count)
    except DatasetError as exc:
        raise CliError(f"data: {exc}") from exc
    h = hashlib.sha256()
    h.update(dataset_fingerprint(samples).encode())
    h.update(dataset_fingerprint(test).encode())
    h.update(repr(sorted(s.image_id for s in split.labeled)).encode())
    return RunData(split, test, class_count, h.hexdigest())


def _train_config(train_cfg: dict) -> TrainConfig:
    try:
        cfg = TrainConfig.from_dict(train_cfg or {})
        cfg.validate()
    except ConfigError as exc:
        raise CliError(f"train.{exc}" if not str(exc).startswith("unknown") else str(exc)) from exc
    return cfg


def _run_dir(raw: dict, out_dir) -> Path:
    if out_dir:
        return Path(out_dir)
    name = (raw.get("output") or {}).get("name", "run")
    return output_root() / str(name)


# --- commands -------------------------------------------------------------

def _train_one(raw: dict, base_dir: Path, run_dir: Path) -> tuple:
    """Validate everything, write the manifest, train. Returns (status, records)."""
    cfg = _train_config(raw.get("train"))
    data = build_data(raw.get("data"), base_dir)
    if (run_dir / "manifest.json").exists() or (run_dir / "metrics.jsonl").exists():
        raise CliError(f"{run_dir} already holds a run; pick a fresh output directory")
    resolved = {"data": raw.get("data") or {}, "train": cfg.to_dict(),
                "output": raw.get("output") or {}}
    RunManifest(resolved, cfg.seed, code_version(), data.fingerprint, str(run_dir)).write(run_dir)
    try:
        _, records = train(cfg, data.split, data.test, run_dir)
        return "completed", records
    except TrainingDiverged as exc:
        log.warning("%s", exc)
        return "diverged", getattr(exc, "records", [])


def cmd_train(config_path, overrides=(), out_dir=None) -> int:
    raw = apply_overrides(load_config(config_path), overrides)
    run_dir = _run_dir(raw, out_dir)
    status, records = _train_one(raw, Path(config_path).parent, run_dir)
    final = next((r for r in reversed(records) if r.get("kind") == "eval"), None)
    print(json.dumps({"status": status, "run_dir": str(run_dir),
                      "teacher_mAP": final.get("teacher_mAP") if final else None,
                      "student_mAP": final.get("student_mAP") if final else None}))
    return EXIT_OK if status == "completed" else EXIT_DIVERGED


def _eval_samples(data_path: Path) -> tuple:
    if not data_path.is_file():
        raise CliError(f"dataset {data_path} does not exist", EXIT_IO)
    if data_path.suffix in (".yaml", ".yml"):
        raw = load_config(data_path)
        data_cfg = raw.get("data") or {}
        if data_cfg.get("test") is None:
            raise CliError(f"{data_path}: data.test is required for evaluation")
        return _load_source(data_cfg["test"], data_path.parent, "test")
    try:
        return load_coco_json(data_path), coco_class_count(data_path)
    except DatasetError as exc:
        raise CliError(str(exc)) from exc


def cmd_eval(ckpt, data, which: str = "teacher", out=None) -> int:
    ckpt = Path(ckpt)
    if which not in ("teacher", "student"):
        raise CliError("--which must be 'teacher' or 'student'")
    if not ckpt.is_file():
        raise CliError(f"checkpoint {ckpt} does not exist", EXIT_IO)
    try:
        state, cfg = load_checkpoint(ckpt)
    except CheckpointError as exc:
        raise CliError(str(exc)) from exc
    samples, class_count = _eval_samples(Path(data))
    if class_count != cfg.detector.num_classes:
        raise CliError(f"checkpoint predicts {cfg.detector.num_classes} classes, "
                       f"dataset has {class_count}")
    params, evaluated = state.student, "student"
    if which == "teacher":
        if state.teacher is not None and cfg.use_ema:
            params, evaluated = state.teacher, "teacher"
        else:
            # no separate teacher exists (burn-in, supervised-only or shared weights)
            evaluated = "student (no separate teacher)"
    detector = Detector(cfg.detector)
    preds = []
    for start in range(0, len(samples), 64):
        preds += detector.predict(params, [s.image for s in samples[start:start + 64]],
                                  cfg.eval_score_floor, cfg.nms_iou)
    report = map_50_95(preds, [s.boxes for s in samples])
    result = {"checkpoint": str(ckpt), "iteration": state.iteration, "which": which,
              "evaluated": evaluated, "images": len(samples), "report": report.to_dict()}
    text = json.dumps(result, indent=2, sort_keys=True)
    out = Path(out) if out else ckpt.with_name(f"{ckpt.stem}.eval.{which}.json")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}", EXIT_IO) from exc
    print(text)
    return EXIT_OK


def read_metrics(run_dir) -> list:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.is_file():
        raise CliError(f"{path} does not exist", EXIT_IO)
    records = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}:{n}: malformed record") from exc
    return records


def _plot_series(ax, xs, ys, label, **kw):
    pts = [(x, y) for x, y in zip(xs, ys) if y is not None]
    if pts:
        ax.plot(*zip(*pts), marker="o", label=label, **kw)


def cmd_analyze(run_dir) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    records = read_metrics(run_dir)
    if not any(r.get("kind") == "eval" for r in records):
        raise CliError(f"{run_dir}: metric log holds no evaluation records")
    series = diagnostics_over_training(records)
    out = run_dir / "analysis"
    out.mkdir(exist_ok=True)
    it = series.iterations
    limit = series.burn_in_limit or {}

    panels = [("pseudo_accuracy", series.accuracy, "accuracy", "pseudo-label accuracy"),
              ("pseudo_miou", series.miou, "miou", "pseudo-label mIoU"),
              ("boxes_per_image", series.boxes_per_image, "boxes_per_image",
               "pseudo boxes per image")]
    files = []
    for name, ys, key, title in panels:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        _plot_series(ax, it, ys, "mutual learning")
        if limit.get(key) is not None:
            ax.axhline(limit[key], color="gray", ls="--", label="burn-in limit")
        if name == "boxes_per_image":
            _plot_series(ax, it, series.gt_boxes_per_image, "ground truth", color="k", ls=":")
        ax.set_xlabel("iteration")
        ax.set_title(title)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / f"{name}.png", dpi=90)
        plt.close(fig)
        files.append(f"{name}.png")

    fig, ax = plt.subplots(figsize=(5, 3.5))
    _plot_series(ax, it, series.teacher_mAP, "teacher")
    _plot_series(ax, it, series.student_mAP, "student")
    ax.set_xlabel("iteration")
    ax.set_title("mAP@[.5:.95]")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "map.png", dpi=90)
    plt.close(fig)
    files.append("map.png")

    last = next((i for i in range(len(it) - 1, -1, -1)
                 if series.class_histograms[i] is not None), None)
    kl_final = None
    if last is not None and series.gt_class_histogram is not None:
        import numpy as np

        kl_final = series.kl[last]
        pseudo = np.asarray(series.class_histograms[last], dtype=float)
        gt = np.asarray(series.gt_class_histogram, dtype=float)
        k = np.arange(len(gt))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar(k - 0.2, gt / max(gt.sum(), 1), 0.4, label="ground truth")
        ax.bar(k + 0.2, pseudo / max(pseudo.sum(), 1), 0.4, label="pseudo-labels")
        ax.set_xlabel("class")
        ax.set_ylabel("fraction of boxes")
        ax.set_title(f"class distribution, KL = {kl_final:.4f}")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / "kl_histogram.png", dpi=90)
        plt.close(fig)
        files.append("kl_histogram.png")

    dump = {"series": series.to_dict(), "final_kl": kl_final, "plots": sorted(files),
            "final_teacher_mAP": next((v for v in reversed(series.teacher_mAP) if v is not None), None),
            "final_student_mAP": next((v for v in reversed(series.student_mAP) if v is not None), None)}
    (out / "analysis.json").write_text(json.dumps(dump, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"analysis_dir": str(out), "plots": sorted(files)}))
    return EXIT_OK


def parse_sweep_values(param: str, values) -> list:
    if param not in SWEEP_PARAMS:
        raise CliError(f"--param must be one of {', '.join(SWEEP_PARAMS)}")
    items = [v.strip() for v in values.split(",")] if isinstance(values, str) else list(values)
    if not items or any(v == "" for v in items):
        raise CliError("--values must be a nonempty comma-separated list")
    if param == "roi_cls_loss":
        return [str(v) for v in items]
    try:
        if param == "burn_in_iters":
            return [int(v) for v in items]
        return [float(v) for v in items]
    except ValueError as exc:
        raise CliError(f"--values: {exc}") from exc


def cmd_sweep(config_path, param, values, overrides=(), out_dir=None) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    values = parse_sweep_values(param, values)
    raw = apply_overrides(load_config(config_path), overrides)
    base_dir = Path(config_path).parent
    # fail on bad config or data before any cell runs
    _train_config(raw.get("train"))
    sweep_dir = Path(out_dir) if out_dir else _run_dir(raw, None).with_name(
        f"{_run_dir(raw, None).name}_sweep_{param}")
    key = "loss.roi_cls_loss" if param == "roi_cls_loss" else param
    rows = []
    for v in values:
        cell = apply_overrides(raw, [f"train.{key}={json.dumps(v)}"])
        cell_dir = sweep_dir / f"{param}={v}"
        status, records = _train_one(cell, base_dir, cell_dir)
        final = next((r for r in reversed(records) if r.get("kind") == "eval"), {})
        pseudo = final.get("pseudo") or {}
        mAP = final.get("teacher_mAP")
        if mAP is None:
            mAP = final.get("student_mAP")
        rows.append({"value": v, "status": status, "final_mAP": mAP if status == "completed" else None,
                     "boxes_per_image": pseudo.get("boxes_per_image"), "kl": pseudo.get("kl"),
                     "accuracy": pseudo.get("accuracy"), "run_dir": str(cell_dir)})
    report = {"param": param, "rows": rows}
    sweep_dir.mkdir(parents=True, exist_ok=True)
    (sweep_dir / "sweep_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

    fig, ax = plt.subplots(figsize=(5, 3.5))
    labels = [str(r["value"]) for r in rows]
    ax.bar(range(len(rows)), [r["final_mAP"] or 0.0 for r in rows])
    for i, r in enumerate(rows):
        if r["status"] != "completed":
            ax.text(i, 0.0, r["status"], ha="center", va="bottom", rotation=90, fontsize=8)
    ax.set_xticks(range(len(rows)), labels)
    ax.set_xlabel(param)
    ax.set_ylabel("final mAP@[.5:.95]")
    fig.tight_layout()
    fig.savefig(sweep_dir / "sweep.png", dpi=90)
    plt.close(fig)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# --- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssdet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", help="run directory (default: $%s/<output.name>)" % OUTPUT_ROOT_ENV)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="COCO annotation file or a run config")
    p.add_argument("--which", choices=("teacher", "student"), default="teacher")
    p.add_argument("--out")

    p = sub.add_parser("analyze", help="plot pseudo-label diagnostics of a run")
    p.add_argument("--run", required=True)

    p = sub.add_parser("sweep", help="train once per value of one parameter")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(args.config, args.overrides, args.out)
        if args.command == "eval":
            return cmd_eval(args.ckpt, args.data, args.which, args.out)
        if args.command == "analyze":
            return cmd_analyze(args.run)
        return cmd_sweep(args.config, args.param, args.values, args.overrides, args.out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
