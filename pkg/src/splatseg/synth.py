"""Synthetic dynamic scenes with per-Gaussian ground-truth object identities.

Objects are ellipsoidal Gaussian blobs on a ring around the origin, each with
its own rigid keyframed motion (translation + rotation about the blob center,
zero at t=0). A sphere of large dim splats encloses everything so every camera
ray terminates on background. Ground-truth masks are rendered per (view, time)
by argmax of per-label blend-weight mass; mask row k corresponds to label k,
with row 0 the background.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .mask_codec import MaskSet
from .scene import (CameraView, DeformationTrack, DynamicScene, GaussianSet,
                    apply_deformation, axis_angle_quat, inverse_sigmoid,
                    quat_multiply, quat_normalize, quat_to_rotmat)
from .segmentation import label_weight_image
from .sh import rgb_to_dc


@dataclass
class SynthSpec:
    n_objects: int = 5
    gaussians_per_object: int = 450
    background_gaussians: int = 900
    translation_amplitude: float = 0.3
    rotation_rate: float = 0.8        # total rotation over t in [0, 1], radians
    n_train_cams: int = 16
    n_test_cams: int = 4
    n_timesteps: int = 8
    width: int = 256
    height: int = 256
    seed: int = 0
    object_radius: float = 0.35
    ring_radius: float = 1.3
    camera_distance: float = 5.0
    background_radius: float = 10.0
    focal: float = 280.0

    def validate(self) -> None:
        counts = (self.n_objects, self.gaussians_per_object, self.background_gaussians,
                  self.n_train_cams, self.n_test_cams, self.n_timesteps,
                  self.width, self.height)
        if any(c < 1 for c in counts):
            raise ConfigError("all synthetic spec counts must be >= 1")

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @staticmethod
    def from_json(path) -> "SynthSpec":
        return SynthSpec(**json.loads(Path(path).read_text()))


@dataclass
class SynthResult:
    scene: DynamicScene
    gt_labels: np.ndarray           # (N,) 0 = background, 1..n_objects
    times: np.ndarray               # keyframe times
    train_ids: list
    test_ids: list
    masks: dict                     # (view_id, t) -> MaskSet, rows = labels 0..n_objects

    def train_manifest(self) -> list:
        return [self.masks[(vid, float(t))] for vid in self.train_ids for t in self.times]


def _look_at(pos: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)):
    fwd = target - pos
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    return r, -r @ pos


def _ring_cameras(spec: SynthSpec):
    total = spec.n_train_cams + spec.n_test_cams
    test_slots = set(np.linspace(0, total, spec.n_test_cams, endpoint=False).astype(int) + 1)
    test_slots = {min(s, total - 1) for s in test_slots}
    while len(test_slots) < spec.n_test_cams:  # guard tiny totals
        test_slots.add(max(test_slots) - 1)
    cams, train_ids, test_ids = [], [], []
    i_train = i_test = 0
    for i in range(total):
        az = 2.0 * np.pi * i / total
        el = 0.18 + 0.22 * (i % 3) / 2.0
        pos = spec.camera_distance * np.array(
            [np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)])
        r, t = _look_at(pos, np.zeros(3))
        if i in test_slots:
            cam_id = f"test_{i_test:02d}"
            test_ids.append(cam_id)
            i_test += 1
        else:
            cam_id = f"train_{i_train:02d}"
            train_ids.append(cam_id)
            i_train += 1
        cams.append(CameraView(id=cam_id, width=spec.width, height=spec.height,
                               fx=spec.focal, fy=spec.focal,
                               cx=spec.width / 2.0, cy=spec.height / 2.0, R=r, T=t))
    return cams, train_ids, test_ids


def _object_blob(rng, center, radius, n, hue_rgb):
    axes = radius * rng.uniform(0.55, 1.0, size=3)
    positions = center + rng.normal(0.0, 1.0, size=(n, 3)) * axes * 0.5
    quats = quat_normalize(rng.normal(size=(n, 4)))
    sigma = rng.uniform(0.045, 0.085, size=(n, 3)) * (radius / 0.35)
    log_scales = np.log(sigma)
    logits = inverse_sigmoid(rng.uniform(0.88, 0.96, size=n))
    rgb = np.clip(hue_rgb + rng.normal(0.0, 0.04, size=(n, 3)), 0.05, 0.95)
    sh = np.zeros((n, 48))
    sh[:, 0::16] = rgb_to_dc(rgb)
    sh[:, 1::16] = rng.normal(0.0, 0.015, size=(n, 3))  # mild view dependence
    return positions, quats, log_scales, logits, sh


def _background_shell(rng, n, radius):
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    positions = dirs * radius * rng.uniform(0.98, 1.04, size=(n, 1))
    quats = quat_normalize(rng.normal(size=(n, 4)))
    log_scales = np.log(rng.uniform(0.28, 0.42, size=(n, 3)))
    logits = inverse_sigmoid(rng.uniform(0.80, 0.90, size=n))
    base = np.array([0.35, 0.38, 0.45])
    rgb = np.clip(base + rng.normal(0.0, 0.05, size=(n, 3)), 0.05, 0.95)
    sh = np.zeros((n, 48))
    sh[:, 0::16] = rgb_to_dc(rgb)
    return positions, quats, log_scales, logits, sh


def _rigid_track(rng, spec: SynthSpec, positions, quats, gt_labels, times):
    """Per-keyframe deltas realizing a rigid path per object; exact at keyframes."""
    n = len(positions)
    k = len(times)
    dpos = np.zeros((k, n, 3))
    drot = np.zeros((k, n, 4))
    dscale = np.zeros((k, n, 3))
    for obj in range(1, spec.n_objects + 1):
        members = np.flatnonzero(gt_labels == obj)
        center = positions[members].mean(axis=0)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        d1 = rng.normal(size=3)
        d1 /= np.linalg.norm(d1)
        d2 = rng.normal(size=3)
        d2 /= np.linalg.norm(d2)
        rate = spec.rotation_rate * rng.uniform(0.5, 1.0)
        amp = spec.translation_amplitude * rng.uniform(0.6, 1.0)
        for j, t in enumerate(times):
            q_obj = axis_angle_quat(axis, rate * t)
            rot = quat_to_rotmat(q_obj)
            tau = amp * (d1 * np.sin(2.0 * np.pi * t) + d2 * (1.0 - np.cos(2.0 * np.pi * t)))
            moved = (positions[members] - center) @ rot.T + center + tau
            dpos[j, members] = moved - positions[members]
            q_new = quat_multiply(q_obj, quats[members])
            drot[j, members] = q_new - quats[members]
    return DeformationTrack(times, dpos, drot, dscale)


def generate(spec: SynthSpec) -> SynthResult:
    """Build the scene, ground-truth labels, and rendered ground-truth masks."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    hue = np.array([
        [0.85, 0.25, 0.20], [0.20, 0.70, 0.30], [0.25, 0.35, 0.85],
        [0.90, 0.75, 0.20], [0.75, 0.25, 0.80], [0.20, 0.75, 0.75],
        [0.90, 0.50, 0.25], [0.55, 0.55, 0.55],
    ])
    parts = []
    labels = []
    for obj in range(spec.n_objects):
        az = 2.0 * np.pi * obj / spec.n_objects
        center = np.array([spec.ring_radius * np.cos(az),
                           rng.uniform(-0.3, 0.3),
                           spec.ring_radius * np.sin(az)])
        parts.append(_object_blob(rng, center, spec.object_radius,
                                  spec.gaussians_per_object, hue[obj % len(hue)]))
        labels.append(np.full(spec.gaussians_per_object, obj + 1, dtype=np.int32))
    parts.append(_background_shell(rng, spec.background_gaussians, spec.background_radius))
    labels.append(np.zeros(spec.background_gaussians, dtype=np.int32))

    positions = np.concatenate([p[0] for p in parts])
    quats = np.concatenate([p[1] for p in parts])
    log_scales = np.concatenate([p[2] for p in parts])
    logits = np.concatenate([p[3] for p in parts])
    sh = np.concatenate([p[4] for p in parts])
    gt_labels = np.concatenate(labels)

    times = np.linspace(0.0, 1.0, spec.n_timesteps) if spec.n_timesteps > 1 else np.zeros(1)
    track = _rigid_track(rng, spec, positions, quats, gt_labels, times)
    cams, train_ids, test_ids = _ring_cameras(spec)

    scene = DynamicScene(
        gaussians=GaussianSet(positions, quats, log_scales, logits, sh),
        track=track, cameras=cams, name=f"synth{spec.n_objects}",
    )
    scene.validate()

    masks = {}
    for cam in cams:
        for t in times:
            masks[(cam.id, float(t))] = render_gt_masks(scene, gt_labels, spec.n_objects, cam, float(t))
    return SynthResult(scene=scene, gt_labels=gt_labels, times=times,
                       train_ids=train_ids, test_ids=test_ids, masks=masks)


def render_gt_masks(scene: DynamicScene, gt_labels: np.ndarray, n_objects: int,
                    cam: CameraView, t: float, tile_size: int = 16) -> MaskSet:
    """Ground-truth mask set at (cam, t): argmax of per-label weight mass."""
    gs_t = apply_deformation(scene, t)
    wmap, alpha = label_weight_image(gs_t, cam, gt_labels, n_objects, tile_size)
    winner = np.argmax(wmap, axis=2)
    covered = alpha > 0.0
    tensor = np.stack([(winner == k) & covered for k in range(n_objects + 1)]).astype(np.uint8)
    return MaskSet.from_tensor(tensor, cam.id, t)
