"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The training experiments (criteria 7 to 12) share one cache of runs, so
the grid of criterion 7 also feeds criteria 9, 10 and 12. The schedule
comes from ``configs/desk.yaml``.
"""

import json
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from ssdet.cli import EXIT_OK, build_data, cmd_train
from ssdet.data import SyntheticConfig, generate_synthetic_dataset
from ssdet.detector import REGRESSION_PARAMS, Detector, DetectorConfig, ParamLayout, ParamVector
from ssdet.ema import closed_form_teacher, ema_update
from ssdet.evaluation import map_50_95
from ssdet.losses import (LossConfig, batch_detection_loss, focal_loss, pad_targets,
                          unsupervised_loss)
from ssdet.pseudolabel import classwise_nms, threshold_sweep
from ssdet.trainer import TrainConfig, burn_in_iters_for_fraction, train

from oracles import (gradient_check, lb, nms_oracle, pr_oracle_ap, random_dets,
                     simulate_sgd_ema)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SEEDS = (0, 1, 2, 3, 4)
GRID = {
    "focal+EMA": {},
    "focal, no EMA": {"use_ema": False},
    "CE+EMA": {"loss": {"roi_cls_loss": "cross_entropy"}},
    "CE, no EMA": {"use_ema": False, "loss": {"roi_cls_loss": "cross_entropy"}},
}


def _vec(values):
    t = torch.as_tensor(np.asarray(values, dtype=np.float64)).reshape(-1)
    return ParamVector(t, ParamLayout((("w", 0, (t.numel(),)),)))


# --- criteria 1 to 6: algebra and oracles -----------------------------------

def test_c01_ema_algebra(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    affine_ok = True
    for alpha in (0.0, 0.1, 0.5, 0.9, 0.9996, 1.0):
        t, s = rng.normal(size=200) * 10, rng.normal(size=200) * 10
        out = ema_update(_vec(t), _vec(s), alpha).values.numpy()
        want = np.array([alpha * a + (1.0 - alpha) * b for a, b in zip(t, s)])
        affine_ok &= bool(np.array_equal(out, want))
    t, s = rng.normal(size=50), rng.normal(size=50)
    degenerate_ok = (np.array_equal(ema_update(_vec(t), _vec(s), 1.0).values.numpy(), t)
                     and np.array_equal(ema_update(_vec(t), _vec(s), 0.0).values.numpy(), s))
    teacher = _vec(t)
    for _ in range(100):
        teacher = ema_update(teacher, _vec(s), 0.9)
    gap = teacher.values.numpy() - s
    geo_err = float(np.max(np.abs(gap - 0.9 ** 100 * (t - s))))
    elapsed = time.perf_counter() - start
    ok = affine_ok and degenerate_ok and geo_err <= 1e-9 and elapsed < 1.0
    criterion(1, ok, f"affine exact={affine_ok}, alpha in {{0,1}} exact={degenerate_ok}, "
                     f"|gap - 0.9^100 gap0|max={geo_err:.1e}, {elapsed:.3f}s")
    assert ok


def test_c02_closed_form_teacher(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 5))
    y = x @ rng.normal(size=5) + 0.1 * rng.normal(size=40)
    cases = {
        "scalar": (np.array([3.0]), lambda w: 2.0 * (w - 1.0)),
        "linear": (np.zeros(5), lambda w: x.T @ (x @ w - y) / len(y)),
    }
    worst = 0.0
    for theta0, grad_fn in cases.values():
        for alpha in (0.5, 0.9, 0.99):
            teachers, grads = simulate_sgd_ema(theta0, grad_fn, alpha, 0.05, 50)
            gvecs = [_vec(g) for g in grads]
            for i in range(1, 52):
                got = closed_form_teacher(_vec(theta0), gvecs, alpha, 0.05, i).values.numpy()
                worst = max(worst, float(np.max(np.abs(got - teachers[i - 1]))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and elapsed < 1.0
    criterion(2, ok, f"max |closed form - simulation| over 50 steps = {worst:.1e}, {elapsed:.3f}s")
    assert ok


def test_c03_focal_loss(criterion):
    rng = np.random.default_rng(0)
    ce_err, below = 0.0, True
    for _ in range(10_000):
        p = rng.dirichlet(np.ones(int(rng.integers(2, 8))))
        t = int(rng.integers(len(p)))
        ce = -math.log(max(p[t], 1e-7))
        ce_err = max(ce_err, abs(focal_loss(p, t, 0.0) - ce))
        below &= focal_loss(p, t, 2.0) <= focal_loss(p, t, 0.0)
    ref = focal_loss([0.9, 0.1], 0, 2.0)
    ok = ce_err <= 1e-9 and below and abs(ref - 1.0536e-3) <= 1e-7
    criterion(3, ok, f"|FL_0 - CE|max={ce_err:.1e}, FL_2 <= CE on 10000 vectors={below}, "
                     f"FL_2(0.9)={ref:.7e}")
    assert ok


def test_c04_no_regression_gradient(criterion):
    det = Detector(DetectorConfig(num_classes=6))
    nonzero, total_grad = 0, 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        samples = generate_synthetic_dataset(SyntheticConfig(num_images=2, seed=100 + seed))
        images = [s.image for s in samples]
        # pseudo boxes of random classes, one image left without any
        pseudo = [random_dets(rng, int(rng.integers(1, 4)), classes=6), []]
        params = det.init_params(seed, dtype=torch.float64)
        leaf = params.values.clone().requires_grad_(True)
        p = ParamVector(leaf, params.layout)
        # public per-image operation
        props = det.forward_proposals(p, images)
        sel, ok = det.select_proposals_batch(torch.stack([q.objectness_logits for q in props]),
                                             torch.stack([q.deltas for q in props]))
        boxes = [torch.cat([sel[i][ok[i]], torch.tensor([b.box.as_tuple() for b in t],
                                                        dtype=torch.float64).reshape(-1, 4)])
                 for i, t in enumerate(pseudo)]
        rois = det.forward_roi(p, images, boxes)
        loss = sum(unsupervised_loss(pr, r, t, LossConfig()).total for pr, r, t in zip(props, rois, pseudo))
        # batched path used by the trainer
        feats = det.features(p, images)
        obj, dl = det.rpn_heads(p, feats)
        bxs, valid = det.select_proposals_batch(obj, dl)
        gt_boxes, _, gt_valid = pad_targets(pseudo, torch.float64)
        roi_boxes, roi_valid = torch.cat([bxs, gt_boxes], 1), torch.cat([valid, gt_valid], 1)
        logits, deltas = det.roi_heads(p, feats, roi_boxes)
        loss = loss + batch_detection_loss(obj, dl, det.anchors(torch.float64), roi_boxes, roi_valid,
                                           logits, deltas, pseudo, LossConfig(), regression=False).total
        loss.backward()
        for name in REGRESSION_PARAMS:
            nonzero += int(torch.count_nonzero(leaf.grad[params.layout.slice_of(name)]))
        total_grad += int(torch.count_nonzero(leaf.grad) > 0)
    ok = nonzero == 0 and total_grad == 20
    criterion(4, ok, f"nonzero regression-head gradient entries over 20 fixtures = {nonzero}")
    assert ok


def test_c05_nms_and_ap_oracles(criterion):
    rng = np.random.default_rng(5)
    nms_bad = 0
    for k in range(1000):
        dets = random_dets(rng, int(rng.integers(0, 7)), classes=2, ties=k % 4 == 0)
        thresh = float(rng.choice([0.3, 0.5, 0.7]))
        want = [dets[i] for i in nms_oracle(dets, thresh)]
        nms_bad += classwise_nms(dets, thresh) != want
    ap_err, checked = 0.0, 0
    for _ in range(100):
        preds, gts = _tiny_ap_instance(rng)
        report = map_50_95(preds, gts)
        classes = sorted({g.class_id for img in gts for g in img})
        per_t = [np.mean([pr_oracle_ap(preds, gts, c, t) for c in classes])
                 for t in np.linspace(0.5, 0.95, 10)]
        ap_err = max(ap_err, abs(report.mAP - float(np.mean(per_t))))
        checked += 1
    ok = nms_bad == 0 and ap_err <= 1e-9
    criterion(5, ok, f"NMS disagrees with the oracle on {nms_bad}/1000 instances; "
                     f"max |mAP - PR oracle| over {checked} instances = {ap_err:.1e}")
    assert ok


def _tiny_ap_instance(rng):
    """At most 4 ground-truth and 4 predicted boxes over 2 classes; >= 1 gt."""
    while True:
        n_img = int(rng.integers(1, 3))
        gts, preds = [], []
        for _ in range(n_img):
            g = []
            for _ in range(int(rng.integers(0, 3))):
                x, y = rng.uniform(0, 10, 2)
                g.append(lb(x, y, x + rng.uniform(2, 6), y + rng.uniform(2, 6), int(rng.integers(2))))
            p = []
            for _ in range(int(rng.integers(0, 3))):
                if g and rng.uniform() < 0.7:
                    base = g[int(rng.integers(len(g)))].box
                    j = rng.normal(0, 0.6, 4)
                    x0, y0 = base.x_min + j[0], base.y_min + j[1]
                    box = (x0, y0, max(x0 + 0.5, base.x_max + j[2]), max(y0 + 0.5, base.y_max + j[3]))
                else:
                    x, y = rng.uniform(0, 10, 2)
                    box = (x, y, x + rng.uniform(2, 6), y + rng.uniform(2, 6))
                p.append(lb(*box, int(rng.integers(2)), float(rng.uniform(0.01, 1))))
            gts.append(g)
            preds.append(p)
        if any(gts):
            return preds, gts


def test_c06_gradient_correctness(criterion):
    det = Detector(DetectorConfig(num_classes=3))
    cfg = SyntheticConfig(class_count=3, class_frequencies=(0.5, 0.3, 0.2), num_images=2, seed=4)
    samples = generate_synthetic_dataset(cfg)
    params = det.init_params(11, dtype=torch.float64)
    errs = gradient_check(det, params, [s.image for s in samples], [s.boxes for s in samples],
                          500, seed=1)
    frac = float(np.mean(errs <= 1e-3))
    ok = frac >= 0.99
    criterion(6, ok, f"{frac:.1%} of 500 coordinates within relative error 1e-3 "
                     f"(median {np.median(errs):.1e})")
    assert ok


# --- criteria 7 to 12: training experiments ----------------------------------

class DeskRuns:
    """Runs of the desk configuration, cached by (fraction, seed, overrides)."""

    def __init__(self):
        self.raw = yaml.safe_load((CONFIGS / "desk.yaml").read_text())
        self._data = {}
        self._runs = {}

    def data(self, fraction, seed):
        key = (fraction, seed)
        if key not in self._data:
            cfg = dict(self.raw["data"], labeled_fraction=fraction, split_seed=seed)
            self._data[key] = build_data(cfg, CONFIGS)
        return self._data[key]

    def config(self, fraction, seed, overrides) -> TrainConfig:
        train_cfg = dict(self.raw["train"], seed=seed)
        base_burn_in = train_cfg["burn_in_iters"]
        mutual = train_cfg["total_iters"] - base_burn_in
        if fraction != self.raw["data"]["labeled_fraction"]:
            train_cfg["burn_in_iters"] = burn_in_iters_for_fraction(fraction, base_burn_in)
            train_cfg["total_iters"] = train_cfg["burn_in_iters"] + mutual
        overrides = json.loads(json.dumps(overrides))
        train_cfg["loss"] = {**train_cfg.get("loss", {}), **overrides.pop("loss", {})}
        train_cfg.update(overrides)
        train_cfg["eval_every"] = train_cfg["total_iters"]
        return TrainConfig.from_dict(train_cfg)

    def run(self, overrides=None, seed=0, fraction=None) -> dict:
        fraction = fraction if fraction is not None else self.raw["data"]["labeled_fraction"]
        overrides = overrides or {}
        key = (fraction, seed, json.dumps(overrides, sort_keys=True))
        if key not in self._runs:
            data = self.data(fraction, seed)
            cfg = self.config(fraction, seed, overrides)
            start = time.perf_counter()
            state, records = train(cfg, data.split, data.test)
            final = [r for r in records if r.get("final")][0]
            self._runs[key] = {
                "teacher_mAP": final.get("teacher_mAP") if final.get("teacher_mAP") is not None
                else final["student_mAP"],
                "student_mAP": final["student_mAP"],
                "kl": (final.get("pseudo") or {}).get("kl"),
                "state": state, "cfg": cfg, "data": data,
                "seconds": time.perf_counter() - start,
            }
        return self._runs[key]


@pytest.fixture(scope="session")
def desk():
    torch.set_num_threads(1)
    return DeskRuns()


def test_c07_loss_ema_grid(desk, criterion):
    start = time.perf_counter()
    table = {name: [desk.run(cell, seed) for seed in SEEDS] for name, cell in GRID.items()}
    elapsed = time.perf_counter() - start
    kl_wins = sum(table["focal+EMA"][i]["kl"] < table["CE, no EMA"][i]["kl"] for i in range(len(SEEDS)))
    best = sum(all(table["focal+EMA"][i]["teacher_mAP"] >= table[n][i]["teacher_mAP"] for n in GRID)
               for i in range(len(SEEDS)))
    for name, runs in table.items():
        print(f"  {name:14s} mAP {[round(r['teacher_mAP'], 3) for r in runs]} "
              f"KL {[round(r['kl'], 3) for r in runs]}")
    ok = kl_wins >= 4 and best >= 3 and elapsed <= 30 * 60
    criterion(7, ok, f"KL(focal+EMA) < KL(CE, no EMA) in {kl_wins}/5 seeds (need 4); "
                     f"focal+EMA best teacher mAP in {best}/5 (need 3); {elapsed / 60:.1f} min")
    assert ok


def test_c08_semi_supervised_gain(desk, criterion):
    gaps = []
    for seed in SEEDS[:3]:
        full = desk.run({}, seed, fraction=0.05)
        sup = desk.run({"supervised_only": True}, seed, fraction=0.05)
        gaps.append(full["teacher_mAP"] - sup["student_mAP"])
    mean_gap = float(np.mean(gaps))
    ok = mean_gap > 0
    criterion(8, ok, f"mean mAP gain over supervised-only at 5% = {mean_gap:+.4f} "
                     f"(per seed {[round(g, 4) for g in gaps]})")
    assert ok


def test_c09_teacher_not_below_student(desk, criterion):
    runs = [desk.run(GRID["focal+EMA"], seed) for seed in SEEDS]
    wins = sum(r["teacher_mAP"] >= r["student_mAP"] for r in runs)
    ok = wins >= 4
    criterion(9, ok, f"teacher >= student in {wins}/5 seeds (need 4); gaps "
                     f"{[round(r['teacher_mAP'] - r['student_mAP'], 4) for r in runs]}")
    assert ok


def test_c10_threshold_sweep(desk, criterion):
    run = desk.run(GRID["focal+EMA"], 0)
    state, cfg = run["state"], run["cfg"]
    images = [s.image for s in run["data"].split.unlabeled[:cfg.diag_images]]
    start = time.perf_counter()
    sweep = threshold_sweep(Detector(cfg.detector), state.teacher, images,
                            (0.5, 0.6, 0.7, 0.8, 0.9), cfg.nms_iou)
    elapsed = time.perf_counter() - start
    values = [sweep[d] for d in sorted(sweep)]
    strictly = all(a > b for a, b in zip(values, values[1:]))
    ok = strictly and elapsed < 120
    criterion(10, ok, f"boxes per image {[round(v, 3) for v in values]} for delta 0.5..0.9, "
                      f"{elapsed:.1f}s")
    assert ok


def test_c11_determinism(tmp_path, criterion):
    cfg = tmp_path / "smoke.yaml"
    shutil.copy(CONFIGS / "smoke.yaml", cfg)
    codes = [cmd_train(cfg, out_dir=tmp_path / name) for name in ("a", "b")]
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    ok = codes == [EXIT_OK, EXIT_OK] and len(a) > 0 and a == b
    criterion(11, ok, f"two runs, metric logs of {len(a)} and {len(b)} bytes, identical={a == b}")
    assert ok


def test_c12_burn_in_ablation(desk, criterion):
    with_bi = [desk.run(GRID["focal+EMA"], seed) for seed in SEEDS]
    without = [desk.run({"burn_in_iters": 0}, seed) for seed in SEEDS]
    wins = sum(a["teacher_mAP"] >= b["teacher_mAP"] for a, b in zip(with_bi, without))
    ok = wins >= 4
    criterion(12, ok, f"default >= no burn-in in {wins}/5 seeds (need 4); mAP "
                      f"{[round(r['teacher_mAP'], 3) for r in with_bi]} vs "
                      f"{[round(r['teacher_mAP'], 3) for r in without]}")
    assert ok
