"""End-to-end benchmark: generate -> train -> cluster -> click -> render -> score.

The report directory holds report.json, scores.csv, timings.csv, the
per-iteration training loss log, the mask containers, and rendered figures.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .editing import ClickPrompt, click_to_cluster
from .errors import NoObjectError
from .feature_learn import FeatureField, TrainConfig, train
from .mask_codec import ManifestEntry, MASK_FILE_EXT, save_maskset, write_manifest
from .rasterizer import rasterize, save_png
from .scene import DynamicScene, apply_deformation, save_scene
from .segmentation import (ClusterMap, SegConfig, cluster, label_weight_image,
                           render_segmentation, score_per_object)
from .synth import SynthResult, SynthSpec, generate


@dataclass
class BenchReport:
    spec: dict
    train_config: dict
    seg_config: dict
    miou: float
    macc: float
    per_object: list           # [{"object": k, "cluster": c, "iou": x, "acc": y}]
    n_clusters: int
    timings: dict              # stage -> seconds
    sequence: str = "synth"

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @staticmethod
    def from_json(path) -> "BenchReport":
        return BenchReport(**json.loads(Path(path).read_text()))


def auto_click(scene: DynamicScene, gt_labels: np.ndarray, obj: int,
               cam_id: str, t: float, cmap: ClusterMap) -> int:
    """Deterministic stand-in for a manual click: the projected centroid of the
    object's visible Gaussians, falling back to nearby member projections when
    the centroid pixel fails the depth gate."""
    cam = scene.camera(cam_id)
    gs_t = apply_deformation(scene, t)
    members = np.flatnonzero(gt_labels == obj)
    pts = gs_t.positions[members].astype(np.float64) @ cam.R.T + cam.T
    z = pts[:, 2]
    front = z > 1e-6
    u = cam.fx * pts[front, 0] / z[front] + cam.cx
    v = cam.fy * pts[front, 1] / z[front] + cam.cy
    inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    if not inside.any():
        raise NoObjectError(f"object {obj} is not visible from camera {cam_id!r}")
    u, v = u[inside], v[inside]
    centroid = np.array([u.mean(), v.mean()])
    order = np.argsort((u - centroid[0]) ** 2 + (v - centroid[1]) ** 2, kind="stable")
    candidates = [np.round(centroid).astype(int)]
    candidates += [np.array([int(round(u[i])), int(round(v[i]))]) for i in order[:30]]
    tried = set()
    for cand in candidates:
        cu = int(np.clip(cand[0], 0, cam.width - 1))
        cv = int(np.clip(cand[1], 0, cam.height - 1))
        if (cu, cv) in tried:
            continue
        tried.add((cu, cv))
        try:
            return click_to_cluster(scene, cmap, ClickPrompt(u=cu, v=cv, camera_id=cam_id, t=t))
        except NoObjectError:
            continue
    raise NoObjectError(f"no valid click found for object {obj} on camera {cam_id!r}")


def evaluate_segmentation(result: SynthResult, cmap: ClusterMap,
                          click_cam: str | None = None, click_t: float = 0.0):
    """Click every object once, render its selection on all test frames, score vs GT.

    Returns (miou, macc, per_object rows, clicked cluster ids).
    """
    scene = result.scene
    n_objects = int(result.gt_labels.max())
    click_cam = click_cam or result.test_ids[0]

    clicked = {}
    for obj in range(1, n_objects + 1):
        clicked[obj] = auto_click(scene, result.gt_labels, obj, click_cam, click_t, cmap)

    frames = [(vid, float(t)) for vid in result.test_ids for t in result.times]
    h, w = scene.cameras[0].height, scene.cameras[0].width
    pred = np.zeros((len(frames), n_objects, h, w), dtype=bool)
    gt = np.zeros_like(pred)
    for fi, (vid, t) in enumerate(frames):
        cam = scene.camera(vid)
        gt_tensor = result.masks[(vid, t)].to_tensor().astype(bool)
        # one weight render per frame serves every object's selection mask
        wmap, alpha = label_weight_image(apply_deformation(scene, t), cam,
                                         cmap.labels, cmap.n_clusters)
        for obj in range(1, n_objects + 1):
            gt[fi, obj - 1] = gt_tensor[obj]
            pred[fi, obj - 1] = wmap[:, :, clicked[obj]] > 0.5 * alpha
    iou, acc = score_per_object(pred, gt)
    rows = [{"object": obj, "cluster": clicked[obj],
             "iou": float(iou[obj - 1]), "acc": float(acc[obj - 1])}
            for obj in range(1, n_objects + 1)]
    return float(iou.mean()), float(acc.mean()), rows, clicked


def run_benchmark(spec: SynthSpec, train_cfg: TrainConfig, seg_cfg: SegConfig,
                  out_dir=None, progress=None) -> BenchReport:
    """Full pipeline over a synthetic scene; writes the report tree when out_dir is set."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    timings = {}
    t_total = time.perf_counter()

    t0 = time.perf_counter()
    result = generate(spec)
    timings["generate"] = time.perf_counter() - t0

    loss_csv = None
    if out is not None:
        mask_dir = out / "masks"
        mask_dir.mkdir(exist_ok=True)
        entries = []
        for (vid, t), ms in result.masks.items():
            p = mask_dir / f"{vid}_{t:.4f}{MASK_FILE_EXT}"
            save_maskset(ms, p)
            entries.append(ManifestEntry(view_id=vid, t=t, path=p))
        write_manifest(entries, mask_dir / "manifest.json")
        loss_csv = out / "train_loss.csv"

    t0 = time.perf_counter()
    field = train(result.scene, result.train_manifest(), train_cfg,
                  log_csv=loss_csv, progress=progress)
    timings["train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    cmap = cluster(field, seg_cfg, rng=np.random.default_rng(train_cfg.seed))
    timings["cluster"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    miou, macc, rows, clicked = evaluate_segmentation(result, cmap)
    timings["evaluate"] = time.perf_counter() - t0
    timings["total"] = time.perf_counter() - t_total

    report = BenchReport(
        spec=asdict(spec), train_config=asdict(train_cfg), seg_config=asdict(seg_cfg),
        miou=miou, macc=macc, per_object=rows, n_clusters=cmap.n_clusters,
        timings=timings, sequence=result.scene.name,
    )
    if out is not None:
        save_scene(_with_features(result.scene, field), out / "scene.sadgscn")
        cmap.save(out / f"scene{'.sadgmap'}")
        report.to_json(out / "report.json")
        _write_csvs(report, out)
        _write_figures(report, result, cmap, out, loss_csv)
    return report


def _with_features(scene: DynamicScene, field: FeatureField) -> DynamicScene:
    return DynamicScene(gaussians=scene.gaussians, track=scene.track,
                        cameras=scene.cameras, name=scene.name,
                        features=field.features.astype(np.float32))


def _write_csvs(report: BenchReport, out: Path) -> None:
    with open(out / "scores.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sequence", "object", "miou", "macc"])
        for row in report.per_object:
            w.writerow([report.sequence, row["object"], row["iou"], row["acc"]])
        w.writerow([report.sequence, "mean", report.miou, report.macc])
    with open(out / "timings.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "seconds"])
        for stage, sec in report.timings.items():
            w.writerow([stage, sec])


def _write_figures(report: BenchReport, result: SynthResult, cmap: ClusterMap,
                   out: Path, loss_csv) -> None:
    from . import plots

    if loss_csv is not None and Path(loss_csv).exists():
        plots.plot_loss_curve(loss_csv, out / "loss_curve.png")
    plots.plot_object_scores(report.per_object, out / "object_scores.png")

    cam = result.scene.camera(result.test_ids[0])
    t = float(result.times[0])
    color = rasterize(apply_deformation(result.scene, t), cam).color
    gt_img = np.argmax(result.masks[(cam.id, t)].to_tensor(), axis=0)
    pred_img = render_segmentation(result.scene, cmap, cam, t)
    plots.plot_segmentation_panel(color, gt_img, pred_img, cmap.n_clusters,
                                  out / "segmentation_panel.png")
    save_png(color, out / "preview_color.png")
