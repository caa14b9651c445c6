"""Burn-In followed by teacher-student mutual learning."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .augment import AugmentConfig, strong_augment, weak_augment
from .data import class_histogram
from .detector import (Detector, DetectorConfig, ParamVector, clone_params, params_from_state,
                       params_to_state)
from .ema import ema_update
from .evaluation import class_histogram_kl, map_50_95, pseudo_diagnostics
from .losses import LossBreakdown, LossConfig, batch_detection_loss, pad_targets
from .pseudolabel import generate_pseudo_labels

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ssdet-train-state"
CHECKPOINT_VERSION = 1

BURN_IN = "burn_in"
MUTUAL = "mutual"


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, iteration, snapshot=None):
        super().__init__(message)
        self.iteration = iteration
        self.snapshot = snapshot


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    delta: float = 0.7
    lambda_u: float = 4.0
    alpha: float = 0.9996
    use_ema: bool = True
    supervised_only: bool = False
    labeled_batch: int = 8
    unlabeled_batch: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    burn_in_iters: int = 300
    total_iters: int = 3000
    seed: int = 0
    eval_every: int = 500
    log_every: int = 50
    checkpoint_every: int = 0
    nms_iou: float = 0.5
    eval_score_floor: float = 0.05
    match_iou: float = 0.5
    diag_images: int = 100
    kl_epsilon: float = 1e-6
    kl_direction: str = "gt_pseudo"
    divergence_loss: float = 1e4
    divergence_patience: int = 10
    labeled_augment: str = "weak"  # or "strong"
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def validate(self) -> None:
        if self.total_iters < 1:
            raise ConfigError("total_iters: must be >= 1")
        if not 0 <= self.burn_in_iters < self.total_iters:
            raise ConfigError("burn_in_iters: must satisfy 0 <= burn_in_iters < total_iters")
        if self.labeled_batch < 1 or self.unlabeled_batch < 1:
            raise ConfigError("labeled_batch/unlabeled_batch: must be >= 1")
        if self.lambda_u < 0:
            raise ConfigError("lambda_u: must be >= 0")
        if not 0 <= self.alpha <= 1:
            raise ConfigError("alpha: must be in [0, 1]")
        if not 0 <= self.delta <= 1:
            raise ConfigError("delta: must be in [0, 1]")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate: must be positive")
        if self.eval_every < 1 or self.log_every < 1:
            raise ConfigError("eval_every/log_every: must be >= 1")
        if self.labeled_augment not in ("weak", "strong"):
            raise ConfigError("labeled_augment: must be 'weak' or 'strong'")
        try:
            self.loss.validate()
        except ValueError as exc:
            raise ConfigError(f"loss: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        try:
            if "loss" in d:
                d["loss"] = LossConfig(**d["loss"])
            if "augment" in d:
                d["augment"] = AugmentConfig.from_dict(d["augment"])
            if "detector" in d:
                d["detector"] = DetectorConfig.from_dict(d["detector"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**d)


@dataclass
class TrainState:
    student: ParamVector
    teacher: Optional[ParamVector]
    optimizer: torch.optim.Optimizer
    iteration: int
    rng: dict
    stage: str
    bad_steps: int = 0


# Burn-in length relative to the 1% setting, following the schedule shape
# 1/2/6/12/20 for 0.5/1/2/5/10% labeled.
_BURN_IN_SHAPE = {0.005: 0.5, 0.01: 1.0, 0.02: 3.0, 0.05: 6.0, 0.10: 10.0}


def burn_in_iters_for_fraction(fraction: float, base_iters: int = 300) -> int:
    """Burn-in steps for a labeled fraction, with ``base_iters`` at 1%.

    Fractions between the tabulated points are interpolated linearly;
    outside the table the nearest end is used.
    """
    if not 0 < fraction <= 1:
        raise ConfigError(f"labeled fraction must be in (0, 1], got {fraction}")
    xs = sorted(_BURN_IN_SHAPE)
    scale = float(np.interp(fraction, xs, [_BURN_IN_SHAPE[x] for x in xs]))
    return max(1, int(round(base_iters * scale)))


def _make_optimizer(student: ParamVector, cfg: TrainConfig):
    return torch.optim.SGD([student.values], lr=cfg.learning_rate, momentum=cfg.momentum)


def init_state(cfg: TrainConfig, detector: Detector) -> TrainState:
    values = detector.init_params(cfg.seed).values.requires_grad_(True)
    student = ParamVector(values, detector.layout)
    # the labeled and unlabeled branches draw from separate streams, so a
    # mutual step with lambda_u = 0 consumes randomness exactly like a
    # supervised step
    names = ("sampler", "sampler_u", "augment", "augment_u", "loss", "loss_u")
    streams = np.random.SeedSequence(cfg.seed).spawn(len(names))
    rng = {k: np.random.default_rng(s) for k, s in zip(names, streams)}
    return TrainState(student, None, _make_optimizer(student, cfg), 0, rng, BURN_IN)


def _teacher_view(state: TrainState, cfg: TrainConfig) -> ParamVector:
    # without EMA the teacher shares the student's weights
    if not cfg.use_ema or state.teacher is None:
        return state.student
    return state.teacher


def _flip_image(image, rng, p):
    # unlabeled images go through here so their boxes are never touched
    if rng.random() < p:
        return np.ascontiguousarray(image[:, ::-1])
    return image


def _labeled_views(samples, rng, cfg: TrainConfig):
    images, boxes = [], []
    for s in samples:
        pair = weak_augment(s, rng, cfg.augment.flip_p)
        img = pair.image
        if cfg.labeled_augment == "strong":
            img = strong_augment(img, rng, cfg.augment)
        images.append(img)
        boxes.append(pair.boxes)
    return images, boxes


def _batch_losses(detector: Detector, params: ParamVector, images, targets, cfg: TrainConfig,
                  unsupervised: bool, rng=None) -> LossBreakdown:
    """Batched equivalent of averaging supervised/unsupervised_loss over images."""
    dtype = params.values.dtype
    feats = detector.features(params, images)
    obj, dl = detector.rpn_heads(params, feats)
    boxes, valid = detector.select_proposals_batch(obj, dl)
    # targets join the proposal set, as in standard two-stage training
    gt_boxes, _, gt_valid = pad_targets(targets, dtype)
    roi_boxes = torch.cat([boxes, gt_boxes], dim=1)
    roi_valid = torch.cat([valid, gt_valid], dim=1)
    logits, deltas = detector.roi_heads(params, feats, roi_boxes)
    return batch_detection_loss(obj, dl, detector.anchors(dtype), roi_boxes, roi_valid, logits,
                                deltas, targets, cfg.loss, regression=not unsupervised, rng=rng)


def _optimize(state: TrainState, total: torch.Tensor, cfg: TrainConfig) -> None:
    value = float(total.detach())
    finite = math.isfinite(value)
    if not finite or value > cfg.divergence_loss:
        state.bad_steps += 1
    else:
        state.bad_steps = 0
    if finite:
        state.optimizer.zero_grad(set_to_none=True)
        total.backward()
        state.optimizer.step()
    if state.bad_steps >= cfg.divergence_patience or not state.student.is_finite():
        raise TrainingDiverged(
            f"diverged at iteration {state.iteration}: loss {value}", state.iteration,
            snapshot={"iteration": state.iteration, "loss": value, "stage": state.stage})


def supervised_step(state: TrainState, labeled_batch, cfg: TrainConfig,
                    detector: Detector) -> tuple:
    images, boxes = _labeled_views(labeled_batch, state.rng["augment"], cfg)
    sup = _batch_losses(detector, state.student, images, boxes, cfg, unsupervised=False,
                        rng=state.rng["loss"])
    state.iteration += 1
    _optimize(state, sup.total, cfg)
    return state, {"sup": sup.as_floats(), "total": float(sup.total.detach())}


def mutual_step(state: TrainState, labeled_batch, unlabeled_batch, cfg: TrainConfig,
                detector: Detector) -> tuple:
    """One student SGD step on sup + lambda_u * unsup, then EMA into the teacher."""
    if state.stage != MUTUAL:
        raise RuntimeError("mutual_step requires the mutual-learning stage")
    images, boxes = _labeled_views(labeled_batch, state.rng["augment"], cfg)
    rng = state.rng["augment_u"]
    weak_u = [_flip_image(s.image, rng, cfg.augment.flip_p) for s in unlabeled_batch]
    strong_u = [strong_augment(img, rng, cfg.augment) for img in weak_u]

    teacher = _teacher_view(state, cfg)
    pseudo = generate_pseudo_labels(detector, teacher, weak_u, cfg.delta, cfg.nms_iou,
                                    state.iteration)
    pseudo_boxes = [p.boxes for p in pseudo]

    sup = _batch_losses(detector, state.student, images, boxes, cfg, unsupervised=False,
                        rng=state.rng["loss"])
    unsup = _batch_losses(detector, state.student, strong_u, pseudo_boxes, cfg, unsupervised=True,
                          rng=state.rng["loss_u"])
    total = sup.total + cfg.lambda_u * unsup.total
    state.iteration += 1
    _optimize(state, total, cfg)
    if cfg.use_ema:
        ema_update(state.teacher, state.student, cfg.alpha, in_place=True)
    info = {"sup": sup.as_floats(), "unsup": unsup.as_floats(), "total": float(total.detach()),
            "pseudo_per_image": sum(len(b) for b in pseudo_boxes) / max(len(pseudo_boxes), 1)}
    return state, info


def enter_mutual_stage(state: TrainState) -> TrainState:
    """Duplicate the current weights into the teacher."""
    state.teacher = clone_params(state.student)
    state.stage = MUTUAL
    return state


def _sample(rng, pool, size):
    idx = rng.choice(len(pool), size=size, replace=len(pool) < size)
    return [pool[i] for i in idx]


class _Run:
    """Bookkeeping shared by burn-in and the mutual loop."""

    def __init__(self, cfg, split, test_samples=None, run_dir=None, detector=None):
        cfg.validate()
        if cfg.detector.num_classes != split.class_count:
            cfg = replace(cfg, detector=replace(cfg.detector, num_classes=split.class_count))
        if not split.labeled:
            raise ConfigError("split has no labeled images")
        self.cfg = cfg
        self.split = split
        self.detector = detector or Detector(cfg.detector)
        self.test = test_samples or []
        self.run_dir = Path(run_dir) if run_dir else None
        self.records = []
        self._log_file = None
        if self.run_dir:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            self._log_file = open(self.run_dir / "metrics.jsonl", "a")
        diag = split.unlabeled[: cfg.diag_images]
        self.diag_images = [s.image for s in diag]
        self.diag_gt = [split.hidden_gt.get(s.image_id, []) for s in diag]

    def emit(self, record: dict):
        self.records.append(record)
        if self._log_file:
            self._log_file.write(json.dumps(record, sort_keys=True) + "\n")
            self._log_file.flush()

    def close(self):
        if self._log_file:
            self._log_file.close()
            self._log_file = None

    def evaluate(self, params) -> Optional[dict]:
        if not self.test:
            return None
        preds = []
        for start in range(0, len(self.test), 64):
            chunk = [s.image for s in self.test[start:start + 64]]
            preds += self.detector.predict(params, chunk, self.cfg.eval_score_floor, self.cfg.nms_iou)
        return map_50_95(preds, [s.boxes for s in self.test]).to_dict()

    def pseudo_diag(self, teacher, iteration) -> Optional[dict]:
        if not self.diag_images:
            return None
        cfg = self.cfg
        sets = []
        for start in range(0, len(self.diag_images), 64):
            sets += generate_pseudo_labels(self.detector, teacher,
                                           self.diag_images[start:start + 64],
                                           cfg.delta, cfg.nms_iou, iteration)
        d = pseudo_diagnostics(sets, self.diag_gt, self.split.class_count, cfg.match_iou).to_dict()
        gt_hist = class_histogram(self.diag_gt, self.split.class_count)
        d["gt_class_histogram"] = gt_hist.tolist()
        d["gt_boxes_per_image"] = float(gt_hist.sum()) / len(self.diag_gt)
        d["kl"] = class_histogram_kl(d["class_histogram"], gt_hist, cfg.kl_epsilon, cfg.kl_direction)
        return d

    def eval_record(self, state: TrainState) -> dict:
        student = self.evaluate(state.student)
        rec = {"kind": "eval", "iteration": state.iteration, "stage": state.stage,
               "student": student, "student_mAP": student["mAP"] if student else None}
        if state.stage == MUTUAL:
            teacher = _teacher_view(state, self.cfg)
            t_eval = student if teacher is state.student else self.evaluate(teacher)
            rec["teacher"] = t_eval
            rec["teacher_mAP"] = t_eval["mAP"] if t_eval else None
            rec["pseudo"] = self.pseudo_diag(teacher, state.iteration)
        else:
            rec["teacher"] = None
            rec["teacher_mAP"] = None
            rec["pseudo"] = None
        return rec

    def checkpoint(self, state: TrainState, name: str):
        if self.run_dir:
            save_checkpoint(state, self.run_dir / "checkpoints" / name, self.cfg)


def _maybe_log(run: _Run, state: TrainState, info: dict):
    cfg = run.cfg
    if state.iteration % cfg.log_every == 0:
        run.emit({"kind": "train", "iteration": state.iteration, "stage": state.stage, **info})
    if state.iteration % cfg.eval_every == 0 and state.iteration < cfg.total_iters:
        run.emit(run.eval_record(state))
    if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
        run.checkpoint(state, f"iter_{state.iteration:07d}.pt")


def _run_burn_in(run: _Run, state: TrainState, iters: int) -> TrainState:
    cfg = run.cfg
    while state.iteration < iters:
        batch = _sample(state.rng["sampler"], run.split.labeled, cfg.labeled_batch)
        state, info = supervised_step(state, batch, cfg, run.detector)
        _maybe_log(run, state, info)
    return state


def burn_in(cfg: TrainConfig, split, detector: Detector | None = None) -> TrainState:
    """Supervised training for ``burn_in_iters`` steps, then weight duplication."""
    run = _Run(cfg, split, detector=detector)
    state = init_state(run.cfg, run.detector)
    state = _run_burn_in(run, state, cfg.burn_in_iters)
    return enter_mutual_stage(state)


def _finish_burn_in(run: _Run, state: TrainState) -> TrainState:
    state = enter_mutual_stage(state)
    teacher = _teacher_view(state, run.cfg)
    run.emit({"kind": "burn_in_limit", "iteration": state.iteration,
              "mAP": (run.evaluate(teacher) or {}).get("mAP"),
              "pseudo": run.pseudo_diag(teacher, state.iteration)})
    run.checkpoint(state, "burn_in.pt")
    return state


def train(cfg: TrainConfig, split, test_samples=None, run_dir=None,
          state: TrainState | None = None) -> tuple:
    """Full regimen. Returns ``(final_state, records)``.

    The teacher is what gets evaluated as the run's result; the student is
    evaluated alongside it. With ``supervised_only`` every step is a
    supervised step and only the student exists.
    """
    run = _Run(cfg, split, test_samples, run_dir)
    cfg = run.cfg
    try:
        if state is None:
            state = init_state(cfg, run.detector)
            run.emit({"kind": "start", "config": cfg.to_dict(),
                      "labeled": len(split.labeled), "unlabeled": len(split.unlabeled)})
        if cfg.supervised_only:
            state = _run_burn_in(run, state, cfg.total_iters)
        else:
            if state.stage == BURN_IN:
                state = _run_burn_in(run, state, cfg.burn_in_iters)
                state = _finish_burn_in(run, state)
            while state.iteration < cfg.total_iters:
                lab = _sample(state.rng["sampler"], split.labeled, cfg.labeled_batch)
                unl = (_sample(state.rng["sampler_u"], split.unlabeled, cfg.unlabeled_batch)
                       if split.unlabeled else [])
                state, info = mutual_step(state, lab, unl, cfg, run.detector)
                _maybe_log(run, state, info)
        final = run.eval_record(state)
        final["final"] = True
        run.emit(final)
        run.checkpoint(state, "last.pt")
        run.emit({"kind": "end", "status": "completed", "iteration": state.iteration})
        return state, run.records
    except TrainingDiverged as exc:
        run.emit({"kind": "end", "status": "diverged", "iteration": exc.iteration,
                  "message": str(exc)})
        if run.run_dir:
            save_checkpoint(state, run.run_dir / "checkpoints" / "diverged.pt", cfg)
        exc.records = run.records
        raise
    finally:
        run.close()


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(state: TrainState, path, cfg: TrainConfig | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    shared = state.teacher is None or state.teacher is state.student
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": state.stage,
        "iteration": state.iteration,
        "bad_steps": state.bad_steps,
        "student": params_to_state(state.student),
        "teacher": None if shared else params_to_state(state.teacher),
        "optimizer": state.optimizer.state_dict(),
        "rng": {k: g.bit_generator.state for k, g in state.rng.items()},
        "config": json.dumps(cfg.to_dict(), sort_keys=True) if cfg else None,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, cfg: TrainConfig | None = None) -> tuple:
    """Returns ``(state, config)``; the config comes from the file unless given."""
    try:
        payload = torch.load(Path(path), weights_only=False)
    except Exception as exc:  # torch raises many types on corrupt archives
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a training checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {payload.get('version')} "
                              f"is not supported (expected {CHECKPOINT_VERSION})")
    if cfg is None:
        cfg = TrainConfig.from_dict(json.loads(payload["config"])) if payload["config"] else TrainConfig()
    student = params_from_state(payload["student"])
    expected = Detector(cfg.detector).layout
    if student.layout != expected:
        raise CheckpointError(
            f"{path}: layout mismatch; file has {len(student.layout.entries)} tensors "
            f"({student.layout.size} values), config expects {len(expected.entries)} "
            f"({expected.size} values)")
    student.values.requires_grad_(True)
    opt = _make_optimizer(student, cfg)
    opt.load_state_dict(payload["optimizer"])
    rng = {}
    for k, st in payload["rng"].items():
        g = np.random.default_rng()
        g.bit_generator.state = st
        rng[k] = g
    teacher = params_from_state(payload["teacher"]) if payload["teacher"] else None
    stage = payload["stage"]
    if stage == MUTUAL and teacher is None:
        teacher = student
    state = TrainState(student, teacher, opt, payload["iteration"], rng, stage,
                       payload.get("bad_steps", 0))
    return state, cfg


def checkpoint_roundtrip(state: TrainState, path, cfg: TrainConfig | None = None) -> TrainState:
    save_checkpoint(state, path, cfg)
    return load_checkpoint(path, cfg)[0]
