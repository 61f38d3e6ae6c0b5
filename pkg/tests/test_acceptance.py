"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Training-based criteria run on generator-controlled synthetic data at desk
scale; runtimes are measured on one CPU core.
"""
import time

import numpy as np
import pytest

from cascadeface.cascade import build_pyramid, detect, nms_indices, run_cascade, scan_12net
from cascadeface.dataio import load_scenes, write_dataset
from cascadeface.evaluate import (
    evaluate_model, iterations_to_reach, match_detections, smoothed,
)
from cascadeface.geometry import BoundingBox, apply_regression, iou, regression_target
from cascadeface.losses import LossWeights
from cascadeface.model import CascadeModel
from cascadeface.nn import Network
from cascadeface.synth import render_scene, synth_generate
from cascadeface.trainer import (
    TrainConfig, alternating_end_to_end, build_patch_dataset, build_stage_dataset,
    evaluate_patches, train_cascade, train_stage,
)

from gradcheck import CHECKS, EPS, INSTANCES, SKIPS, TOL, run_check
from oracles import iou_raster, match_reference, nms_reference

pytestmark = pytest.mark.slow

PIPELINE_ITERATIONS = {"net12": 3000, "net24": 1500, "net48": 800, "e2e": 300}
# mini-batch iterations; large-batch runs a quarter as many (same samples seen)
TABLE1_ITERATIONS = {"net12": 2000, "net24": 1000, "net48": 400}
OHEM_ITERATIONS = 600


def _fmt(d):
    return ", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                     for k, v in d.items())


def _same_detections(a, b):
    return [d.to_json() for d in a] == [d.to_json() for d in b]


# -- shared pipeline -----------------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> 12net -> mine -> 24net -> mine -> 48net -> e2e -> eval."""
    start = time.perf_counter()
    root = tmp_path_factory.mktemp("synth")
    write_dataset(root / "train", synth_generate(300, seed=11))
    write_dataset(root / "val", synth_generate(100, seed=12))
    train, val = load_scenes(root / "train"), load_scenes(root / "val")
    config = TrainConfig(seed=0)
    result = train_cascade(train, PIPELINE_ITERATIONS, config)
    stagewise = CascadeModel(
        nets={k: result.stages[k].net for k in ("net12", "net24", "net48")},
        trained={"net12", "net24", "net48"})
    e2e_report, _ = evaluate_model(result.model, val)
    stage_report, _ = evaluate_model(stagewise, val)
    seconds = time.perf_counter() - start
    return {"result": result, "model": result.model, "stagewise": stagewise, "train": train,
            "val": val, "config": config, "e2e_report": e2e_report,
            "stage_report": stage_report, "seconds": seconds}


# -- 1 -------------------------------------------------------------------------------

def test_criterion_1_gradient_suite(acceptance):
    start = time.perf_counter()
    draws0, skipped0 = SKIPS["draws"], SKIPS["skipped"]
    worst = {}
    for name in CHECKS:
        errs = run_check(name, INSTANCES)
        assert len(errs) >= 20
        worst[name] = max(errs)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= TOL and elapsed < 60.0
    acceptance.record(1, "gradient suite", ok,
                      f"{len(CHECKS)} checks x {INSTANCES} instances, eps={EPS}, "
                      f"max rel err {max(worst.values()):.2e} (tol {TOL}), "
                      f"kink redraws {SKIPS['skipped'] - skipped0}/{SKIPS['draws'] - draws0}, "
                      f"{elapsed:.1f} s")
    assert ok, worst


# -- 2 -------------------------------------------------------------------------------

def test_criterion_2_oracle_equivalences(acceptance):
    rng = np.random.default_rng(2024)
    nms_ok = True
    for k in range(1000):
        n = int(rng.integers(1, 201))
        boxes = np.c_[rng.uniform(0, 200, (n, 2)), rng.uniform(4, 60, (n, 2))]
        scores = np.round(rng.random(n), 3)
        thr = float(rng.uniform(0.1, 0.9))
        mode = "union" if k % 2 == 0 else "min"
        if nms_indices(boxes, scores, thr, mode).tolist() != nms_reference(boxes, scores, thr,
                                                                           mode):
            nms_ok = False
            break

    iou_err = 0.0
    for _ in range(1000):
        a = rng.integers(0, 40, 2).tolist() + rng.integers(1, 30, 2).tolist()
        b = rng.integers(0, 40, 2).tolist() + rng.integers(1, 30, 2).tolist()
        iou_err = max(iou_err, abs(iou(BoundingBox(*map(float, a)),
                                       BoundingBox(*map(float, b))) - iou_raster(a, b)))

    fc_err = 0.0
    net = Network.build("net12", rng=7)
    for k in range(20):
        img = rng.integers(0, 256, (int(rng.integers(30, 60)), int(rng.integers(30, 60)), 3))
        level = build_pyramid(img.astype(np.uint8), min_face=12)[0]
        win, sc, _ = scan_12net(net, level, 0.0)
        xy = win[:, :2].astype(int)
        patches = np.stack([level.image[:, y:y + 12, x:x + 12] for x, y in xy])
        fc_err = max(fc_err, float(np.abs(net.predict(patches)["cls"][:, 1] - sc).max()))

    match_ok = True
    for k in range(50):
        scene = render_scene(5000 + k, faces_per_image=(0, 4))
        gts = np.array([f.box.as_array() for f in scene.faces]).reshape(-1, 4)
        n = int(rng.integers(0, 10))
        near = np.zeros((0, 4))
        if len(gts):
            picks = gts[rng.integers(0, len(gts), n // 2)]
            near = picks + rng.normal(0, 4, picks.shape)
        far = np.c_[rng.uniform(0, 130, (n - n // 2, 2)), rng.uniform(12, 50, (n - n // 2, 2))]
        dets = np.concatenate([near, far]).reshape(-1, 4)
        dets[:, 2:] = np.maximum(dets[:, 2:], 1.0)
        scores = np.round(rng.random(len(dets)), 1)
        if match_detections(dets, scores, gts) != match_reference(dets, scores, gts):
            match_ok = False

    ok = nms_ok and iou_err <= 1e-3 and fc_err <= 1e-5 and match_ok
    acceptance.record(2, "oracle equivalences", ok,
                      f"nms exact on 1000 sets: {nms_ok}; iou raster max err {iou_err:.1e}; "
                      f"fully-conv vs patchwise max err {fc_err:.1e} on 20 images; "
                      f"matcher exact on 50 scenes: {match_ok}")
    assert ok


# -- 3 -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def table1_scenes():
    return synth_generate(500, seed=31), synth_generate(300, seed=32)


def test_criterion_3_mini_vs_large_batch(acceptance, table1_scenes):
    train_scenes, val_scenes = table1_scenes
    start = time.perf_counter()
    rows, ok = [], True
    for net_id, iters in TABLE1_ITERATIONS.items():
        size = int(net_id[3:])
        train = build_patch_dataset(train_scenes, size, 2000, seed=1, counts=(10, 8, 8, 6))
        val = build_patch_dataset(val_scenes, size, 500, seed=2, counts=(10, 8, 8, 6))
        cfg = TrainConfig(stage=net_id, seed=0)
        mini = train_stage(net_id, train, cfg.with_(iterations=iters))
        large = train_stage(net_id, train, cfg.with_(iterations=iters // 4, large_batch=True))
        w = cfg.weights(net_id)
        acc_m = evaluate_patches(mini.net, val, w)["accuracy"]
        acc_l = evaluate_patches(large.net, val, w)["accuracy"]
        t_m, t_l = mini.seconds_per_1000, large.seconds_per_1000
        row_ok = acc_m >= 0.94 and abs(acc_m - acc_l) <= 0.01 and t_m < t_l
        ok &= row_ok
        rows.append(f"{net_id} mini {acc_m:.2%} ({t_m:.1f} s/1k it) "
                    f"large {acc_l:.2%} ({t_l:.1f} s/1k it)")
        del train, val
    elapsed = time.perf_counter() - start
    ok &= elapsed < 15 * 60
    acceptance.record(3, "mini vs large batch", ok, "; ".join(rows) + f"; {elapsed:.0f} s")
    assert ok


# -- 4 -------------------------------------------------------------------------------

def test_criterion_4_ohem(acceptance, pipeline):
    """Paired 48net runs on the cascade-mined 48net training set.

    Loss is the held-out validation loss (mined candidates from unseen
    scenes), evaluated every 20 iterations and smoothed over 5 evaluations.
    """
    stagewise = pipeline["stagewise"]
    train = pipeline["result"].datasets["net48"]
    val = build_stage_dataset(pipeline["val"], "net48", stagewise, seed=1)
    curves = {}
    for ohem in (True, False):
        cfg = TrainConfig(stage="net48", seed=0, ohem=ohem, iterations=OHEM_ITERATIONS)
        res = train_stage("net48", train, cfg, val=val, eval_every=20)
        curves[ohem] = smoothed([h[1] for h in res.val_history], 5)
    on, off = curves[True], curves[False]
    reach = iterations_to_reach(on, off[-1])
    frac = reach / len(on) if reach else float("inf")
    ok = on[-1] <= off[-1] and frac <= 0.8
    acceptance.record(4, "OHEM vs no-OHEM", ok,
                      f"final smoothed val loss ohem {on[-1]:.4f} plain {off[-1]:.4f}; "
                      f"ohem reaches plain final at {frac:.0%} of its run (need <= 80%)")
    assert ok


# -- 5 -------------------------------------------------------------------------------

def test_criterion_5_joint_and_end_to_end(acceptance, pipeline):
    result, val = pipeline["result"], pipeline["val"]
    stagewise = pipeline["stagewise"]
    # gamma = 0 48net: same data, seed and schedule; its pts batches carry no gradient
    cfg = pipeline["config"].with_(stage="net48", iterations=PIPELINE_ITERATIONS["net48"],
                                   loss_weights={"net48": LossWeights(1.0, 0.5, 0.0)})
    no_pts = train_stage("net48", result.datasets["net48"], cfg)
    gamma0 = CascadeModel(nets=dict(stagewise.nets, net48=no_pts.net),
                          trained=set(stagewise.trained))
    f1_joint = pipeline["stage_report"].f1
    f1_gamma0 = evaluate_model(gamma0, val)[0].f1
    f1_e2e = pipeline["e2e_report"].f1

    zero = alternating_end_to_end(stagewise, result.datasets["net48"],
                                  pipeline["config"].with_(e2e_iterations=0)).model
    identical = all(_same_detections(detect(stagewise, s.image), detect(zero, s.image))
                    for s in val)

    ok = f1_joint >= f1_gamma0 and f1_e2e >= f1_joint - 0.02 and identical
    acceptance.record(5, "joint training and e2e", ok,
                      f"F1 gamma>0 {f1_joint:.4f} vs gamma=0 {f1_gamma0:.4f}; "
                      f"e2e {f1_e2e:.4f} vs stage-wise {f1_joint:.4f}; "
                      f"zero-iteration e2e identical: {identical}; landmark error "
                      f"stage-wise {pipeline['stage_report'].landmark_error:.4f} "
                      f"e2e {pipeline['e2e_report'].landmark_error:.4f}")
    assert ok


# -- 6 -------------------------------------------------------------------------------

def test_criterion_6_pipeline_properties(acceptance, pipeline, tmp_path):
    model = pipeline["model"]
    rng = np.random.default_rng(6)
    trials = 100
    fails = {"stage": 0, "threshold": 0, "nms": 0, "regression": 0, "save_load": 0}
    for k in range(trials):
        scene = render_scene(7000 + k, int(rng.integers(80, 200)), int(rng.integers(60, 160)),
                             faces_per_image=(0, 3))
        low = rng.uniform(0.2, 0.8, 3)
        run = run_cascade(model.nets, scene.image, tuple(low))
        c = run.counts
        fails["stage"] += not (c[0] >= c[1] >= c[2])

        high = np.minimum(low + rng.uniform(0, 0.3, 3) * (rng.random(3) < 0.7), 0.999)
        loose = {tuple(d.to_json()["box"]) for d in detect(model, scene.image, tuple(low))}
        strict = {tuple(d.to_json()["box"]) for d in detect(model, scene.image, tuple(high))}
        fails["threshold"] += not strict <= loose

        n = int(rng.integers(1, 150))
        boxes = np.c_[rng.uniform(0, 100, (n, 2)), rng.uniform(4, 40, (n, 2))]
        scores = rng.random(n)
        thr = float(rng.uniform(0.2, 0.8))
        once = nms_indices(boxes, scores, thr)
        twice = nms_indices(boxes[once], scores[once], thr)
        fails["nms"] += twice.tolist() != list(range(len(once)))

        p = BoundingBox(*rng.uniform(-50, 50, 2), *rng.uniform(1, 100, 2))
        g = BoundingBox(*rng.uniform(-50, 50, 2), *rng.uniform(1, 100, 2))
        back = apply_regression(p, regression_target(p, g)).as_array()
        fails["regression"] += not np.allclose(back, g.as_array(), rtol=0, atol=1e-9)

        rand = CascadeModel.initialize(int(rng.integers(1 << 30)))
        path = tmp_path / f"m{k}.cnn"
        rand.save(path)
        loaded = CascadeModel.load(path)
        same_bytes = loaded.to_bytes() == path.read_bytes()
        fails["save_load"] += not (same_bytes and _same_detections(
            detect(rand, scene.image), detect(loaded, scene.image)))
    ok = not any(fails.values())
    acceptance.record(6, "pipeline properties", ok,
                      f"{trials} trials each; failures: {_fmt(fails)}")
    assert ok, fails


# -- 7 -------------------------------------------------------------------------------

def test_criterion_7_model_size(acceptance, pipeline):
    stage_bytes = len(pipeline["stagewise"].astype(np.float32).to_bytes())
    e2e_bytes = len(pipeline["model"].astype(np.float32).to_bytes())
    limit = 4 * 1024 * 1024
    ok = max(stage_bytes, e2e_bytes) <= limit
    acceptance.record(7, "model size", ok,
                      f"float32 stage-wise {stage_bytes / 2**20:.2f} MiB, bridged e2e "
                      f"{e2e_bytes / 2**20:.2f} MiB (limit 4 MiB)")
    assert ok


# -- 8 -------------------------------------------------------------------------------

def test_criterion_8_end_to_end_smoke(acceptance, pipeline):
    report = pipeline["e2e_report"]
    recall = report.recall_at_fp(1.0)
    seconds = pipeline["seconds"]
    ok = recall >= 0.90 and seconds < 45 * 60
    stage_s = pipeline["result"].seconds
    acceptance.record(8, "end-to-end smoke", ok,
                      f"recall {recall:.4f} at <= 1 FP/image on {report.n_images} validation "
                      f"images ({report.n_gt} faces, {report.false_positives} FP total); "
                      f"stages {_fmt(stage_s)} s; total {seconds:.0f} s")
    assert ok


# -- trained-model examples ----------------------------------------------------------

def test_blank_image_no_detections(pipeline):
    for value in (0, 90, 200, 255):
        assert detect(pipeline["model"], np.full((120, 160, 3), value, np.uint8)) == []


def test_single_face_single_detection(pipeline):
    hits = 0
    for k in range(20):
        scene = render_scene(9000 + k, faces_per_image=(1, 1), distractors=(0, 0))
        dets = detect(pipeline["model"], scene.image)
        hits += len(dets) == 1 and iou(dets[0].box, scene.faces[0].box) >= 0.5
    assert hits == 20


def test_detect_batch_timing(pipeline):
    images = [render_scene(11000 + k, 320, 240).image for k in range(100)]
    start = time.perf_counter()
    for img in images:
        detect(pipeline["model"], img)
    elapsed = time.perf_counter() - start
    print(f"100 images at 320x240 in {elapsed:.2f} s")
    assert elapsed < 10.0
