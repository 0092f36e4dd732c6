"""Dynamic Gaussian scene model: canonical splats, keyframed deformation, cameras, on-disk container.

Conventions fixed here and relied on everywhere else:
  * extrinsics map world -> camera as x_cam = R @ x_world + T
  * quaternions are (w, x, y, z), scales are stored as per-axis log-stddev,
    opacity is stored as a logit
  * SH coefficients are channel-major: sh[:, c*16 + k] for channel c, basis k
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BehindCameraError, ConfigError, FormatError

SCENE_MAGIC = b"SADGSCN1"
SH_COEFFS = 48
FEATURE_DIM = 32


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("cannot normalize a near-zero quaternion")
    return q / norm


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, broadcasting over leading dims."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) -> rotation matrix/matrices, shape (..., 3, 3)."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def rotmat_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w, x, y, z). Single matrix only."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return quat_normalize(q)


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


# ---------------------------------------------------------------------------
# data model


@dataclass
class GaussianSet:
    """Struct-of-arrays container for N Gaussians (float32 storage)."""

    positions: np.ndarray      # (N, 3) world units
    rotations: np.ndarray      # (N, 4) quaternions (w, x, y, z)
    log_scales: np.ndarray     # (N, 3) log of per-axis stddev
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray             # (N, 48) channel-major SH coefficients

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float32)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float32)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float32)
        self.sh = np.ascontiguousarray(self.sh, dtype=np.float32)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def opacities(self) -> np.ndarray:
        """Activated opacity in (0, 1), float64."""
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        """Activated per-axis stddev (> 0), float64."""
        return np.exp(self.log_scales.astype(np.float64))

    def unit_rotations(self) -> np.ndarray:
        return quat_normalize(self.rotations.astype(np.float64))

    def validate(self) -> None:
        n = len(self)
        shapes = {
            "positions": (n, 3),
            "rotations": (n, 4),
            "log_scales": (n, 3),
            "opacity_logits": (n,),
            "sh": (n, SH_COEFFS),
        }
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ConfigError(f"gaussian array {name!r} has shape {arr.shape}, expected {shape}")
        if n and np.any(np.linalg.norm(self.rotations, axis=1) < 1e-12):
            raise ConfigError("gaussian rotations contain a zero quaternion")

    def take(self, index) -> "GaussianSet":
        return GaussianSet(
            self.positions[index],
            self.rotations[index],
            self.log_scales[index],
            self.opacity_logits[index],
            self.sh[index],
        )

    @staticmethod
    def concatenate(a: "GaussianSet", b: "GaussianSet") -> "GaussianSet":
        return GaussianSet(
            np.concatenate([a.positions, b.positions]),
            np.concatenate([a.rotations, b.rotations]),
            np.concatenate([a.log_scales, b.log_scales]),
            np.concatenate([a.opacity_logits, b.opacity_logits]),
            np.concatenate([a.sh, b.sh]),
        )


@dataclass
class DeformationTrack:
    """Keyframed per-Gaussian deltas; linear interpolation between keyframes.

    times is strictly increasing with times[0] == 0. Position deltas add in
    world space, rotation deltas add componentwise before renormalization,
    scale deltas add in log-scale space.
    """

    times: np.ndarray   # (K,)
    dpos: np.ndarray    # (K, N, 3)
    drot: np.ndarray    # (K, N, 4)
    dscale: np.ndarray  # (K, N, 3)

    def __post_init__(self):
        self.times = np.ascontiguousarray(self.times, dtype=np.float64)
        self.dpos = np.ascontiguousarray(self.dpos, dtype=np.float32)
        self.drot = np.ascontiguousarray(self.drot, dtype=np.float32)
        self.dscale = np.ascontiguousarray(self.dscale, dtype=np.float32)

    @property
    def n_keyframes(self) -> int:
        return len(self.times)

    @staticmethod
    def static(n: int) -> "DeformationTrack":
        """Single all-zero keyframe at t=0: a static scene."""
        return DeformationTrack(
            np.zeros(1), np.zeros((1, n, 3)), np.zeros((1, n, 4)), np.zeros((1, n, 3))
        )

    def validate(self, n: int) -> None:
        if self.n_keyframes == 0:
            raise ConfigError("deformation track has no keyframes")
        if self.times[0] != 0.0:
            raise ConfigError(f"first keyframe must be at t=0, got {self.times[0]}")
        if np.any(np.diff(self.times) <= 0):
            raise ConfigError("keyframe times must be strictly increasing")
        k = self.n_keyframes
        for name, shape in (("dpos", (k, n, 3)), ("drot", (k, n, 4)), ("dscale", (k, n, 3))):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ConfigError(f"delta array {name!r} has shape {arr.shape}, expected {shape}")

    def deltas_at(self, t: float):
        """Interpolated (dpos, drot, dscale) at normalized time t, float64."""
        if self.n_keyframes == 0:
            raise ConfigError("deformation track has no keyframes")
        times = self.times
        if t <= times[0]:
            k = 0
            return (self.dpos[k].astype(np.float64), self.drot[k].astype(np.float64),
                    self.dscale[k].astype(np.float64))
        if t >= times[-1]:
            k = self.n_keyframes - 1
            return (self.dpos[k].astype(np.float64), self.drot[k].astype(np.float64),
                    self.dscale[k].astype(np.float64))
        hi = int(np.searchsorted(times, t, side="right"))
        lo = hi - 1
        w = (t - times[lo]) / (times[hi] - times[lo])
        out = []
        for arr in (self.dpos, self.drot, self.dscale):
            a = arr[lo].astype(np.float64)
            b = arr[hi].astype(np.float64)
            out.append((1.0 - w) * a + w * b)
        return tuple(out)

    def take(self, index) -> "DeformationTrack":
        return DeformationTrack(self.times, self.dpos[:, index], self.drot[:, index], self.dscale[:, index])


@dataclass
class CameraView:
    """Pinhole camera; world->camera extrinsics x_cam = R @ x_world + T."""

    id: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # (3, 3)
    T: np.ndarray  # (3,)

    def __post_init__(self):
        self.R = np.ascontiguousarray(self.R, dtype=np.float64)
        self.T = np.ascontiguousarray(self.T, dtype=np.float64)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.T

    def validate(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"camera {self.id!r}: focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ConfigError(f"camera {self.id!r}: principal point outside the image")
        if self.R.shape != (3, 3):
            raise ConfigError(f"camera {self.id!r}: R must be 3x3")
        err = np.abs(self.R @ self.R.T - np.eye(3)).max()
        if err > 1e-6:
            raise ConfigError(f"camera {self.id!r}: R not orthonormal (|R R^T - I| = {err:.2e})")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "R": self.R.tolist(),
            "T": self.T.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "CameraView":
        return CameraView(
            id=str(d["id"]),
            width=int(d["width"]),
            height=int(d["height"]),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            R=np.array(d["R"], dtype=np.float64),
            T=np.array(d["T"], dtype=np.float64),
        )


@dataclass
class DynamicScene:
    """Canonical Gaussians + deformation track + camera registry.

    Instances are treated as immutable after construction; edits produce new
    scene values (copy-on-write), so concurrent readers are safe.
    """

    gaussians: GaussianSet
    track: DeformationTrack
    cameras: list
    name: str = "scene"
    features: np.ndarray | None = None  # (N, 32) float32, optional

    def __post_init__(self):
        if self.features is not None:
            self.features = np.ascontiguousarray(self.features, dtype=np.float32)

    @property
    def n_gaussians(self) -> int:
        return len(self.gaussians)

    def camera(self, cam_id: str) -> CameraView:
        for cam in self.cameras:
            if cam.id == cam_id:
                return cam
        raise KeyError(f"unknown camera id {cam_id!r}")

    def validate(self) -> None:
        if self.n_gaussians < 1:
            raise ConfigError("scene must contain at least one Gaussian")
        self.gaussians.validate()
        self.track.validate(self.n_gaussians)
        ids = [c.id for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise ConfigError("camera ids must be unique")
        for cam in self.cameras:
            cam.validate()
        if self.features is not None and self.features.shape != (self.n_gaussians, FEATURE_DIM):
            raise ConfigError(
                f"features array has shape {self.features.shape}, expected ({self.n_gaussians}, {FEATURE_DIM})"
            )


# ---------------------------------------------------------------------------
# operations


def apply_deformation(scene: DynamicScene, t: float) -> GaussianSet:
    """Gaussians at normalized time t: canonical values plus interpolated deltas.

    Opacity and SH are shared with the canonical set (never deformed).
    """
    dpos, drot, dscale = scene.track.deltas_at(float(t))
    g = scene.gaussians
    pos = g.positions.astype(np.float64) + dpos
    rot = g.rotations.astype(np.float64) + drot
    rot = quat_normalize(rot)
    log_s = g.log_scales.astype(np.float64) + dscale
    return GaussianSet(pos, rot, log_s, g.opacity_logits, g.sh)


def project_point(cam: CameraView, p_world) -> tuple:
    """World point -> (u, v, depth) pixel coordinates; depth is camera-space z."""
    p = np.asarray(p_world, dtype=np.float64)
    x, y, z = cam.R @ p + cam.T
    if z <= 0:
        raise BehindCameraError(f"point has camera depth {z:.4g} <= 0")
    return (cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy, z)


def unproject_point(cam: CameraView, u: float, v: float, depth: float) -> np.ndarray:
    """Pixel (u, v) at the given depth -> world point (inverse of project_point)."""
    p_cam = depth * np.linalg.solve(cam.K, np.array([u, v, 1.0]))
    return cam.R.T @ (p_cam - cam.T)


# ---------------------------------------------------------------------------
# container I/O
#
# Layout: magic "SADGSCN1" | u32le header length | UTF-8 JSON header | raw
# float32-little-endian arrays in the order declared by the header. Array
# offsets are relative to the start of the payload section.


def _array_order(n: int, n_keyframes: int, has_features: bool):
    order = [
        ("positions", (n, 3)),
        ("rotations", (n, 4)),
        ("log_scales", (n, 3)),
        ("opacity_logits", (n,)),
        ("sh", (n, SH_COEFFS)),
    ]
    if has_features:
        order.append(("features", (n, FEATURE_DIM)))
    for k in range(n_keyframes):
        order.append((f"kf{k}.dpos", (n, 3)))
        order.append((f"kf{k}.drot", (n, 4)))
        order.append((f"kf{k}.dscale", (n, 3)))
    return order


def save_scene(scene: DynamicScene, path) -> None:
    g = scene.gaussians
    n = len(g)
    has_features = scene.features is not None
    order = _array_order(n, scene.track.n_keyframes, has_features)

    arrays = {
        "positions": g.positions,
        "rotations": g.rotations,
        "log_scales": g.log_scales,
        "opacity_logits": g.opacity_logits,
        "sh": g.sh,
    }
    if has_features:
        arrays["features"] = scene.features
    for k in range(scene.track.n_keyframes):
        arrays[f"kf{k}.dpos"] = scene.track.dpos[k]
        arrays[f"kf{k}.drot"] = scene.track.drot[k]
        arrays[f"kf{k}.dscale"] = scene.track.dscale[k]

    entries = []
    offset = 0
    for name, shape in order:
        nbytes = int(np.prod(shape)) * 4
        entries.append({"name": name, "shape": list(shape), "offset": offset})
        offset += nbytes

    header = {
        "name": scene.name,
        "n_gaussians": n,
        "n_keyframes": scene.track.n_keyframes,
        "keyframe_times": scene.track.times.tolist(),
        "feature_dim": FEATURE_DIM if has_features else 0,
        "cameras": [c.to_dict() for c in scene.cameras],
        "arrays": entries,
    }
    header_bytes = json.dumps(header).encode("utf-8")

    with open(path, "wb") as f:
        f.write(SCENE_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for name, _ in order:
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            f.write(arr.tobytes())


def load_scene(path) -> DynamicScene:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(SCENE_MAGIC) + 4:
        raise FormatError("scene file truncated before header")
    if data[: len(SCENE_MAGIC)] != SCENE_MAGIC:
        raise FormatError(f"bad scene magic {data[:8]!r}, expected {SCENE_MAGIC!r}")
    (header_len,) = struct.unpack_from("<I", data, len(SCENE_MAGIC))
    header_start = len(SCENE_MAGIC) + 4
    if len(data) < header_start + header_len:
        raise FormatError("scene file truncated inside the JSON header")
    try:
        header = json.loads(data[header_start : header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"scene header is not valid JSON: {e}") from e

    for key in ("name", "n_gaussians", "n_keyframes", "keyframe_times", "feature_dim", "cameras", "arrays"):
        if key not in header:
            raise FormatError(f"scene header missing field {key!r}")
    n = int(header["n_gaussians"])
    n_kf = int(header["n_keyframes"])
    feature_dim = int(header["feature_dim"])
    if feature_dim not in (0, FEATURE_DIM):
        raise FormatError(f"unsupported feature_dim {feature_dim}")
    if len(header["keyframe_times"]) != n_kf:
        raise FormatError("keyframe_times length does not match n_keyframes")

    expected = _array_order(n, n_kf, feature_dim == FEATURE_DIM)
    declared = header["arrays"]
    if len(declared) != len(expected):
        raise FormatError(f"header declares {len(declared)} arrays, expected {len(expected)}")

    payload = data[header_start + header_len :]
    arrays = {}
    offset = 0
    for entry, (name, shape) in zip(declared, expected):
        if entry["name"] != name:
            raise FormatError(f"array {entry['name']!r} out of order, expected {name!r}")
        if tuple(entry["shape"]) != shape:
            raise FormatError(f"array {name!r} has shape {entry['shape']}, expected {list(shape)}")
        if int(entry["offset"]) != offset:
            raise FormatError(f"array {name!r} offset {entry['offset']} != expected {offset}")
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(payload):
            raise FormatError(f"scene file truncated inside array {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)), offset=offset).reshape(shape).copy()
        offset += nbytes

    gaussians = GaussianSet(
        arrays["positions"], arrays["rotations"], arrays["log_scales"],
        arrays["opacity_logits"], arrays["sh"],
    )
    track = DeformationTrack(
        np.array(header["keyframe_times"], dtype=np.float64),
        np.stack([arrays[f"kf{k}.dpos"] for k in range(n_kf)]),
        np.stack([arrays[f"kf{k}.drot"] for k in range(n_kf)]),
        np.stack([arrays[f"kf{k}.dscale"] for k in range(n_kf)]),
    )
    cameras = [CameraView.from_dict(d) for d in header["cameras"]]
    scene = DynamicScene(
        gaussians=gaussians,
        track=track,
        cameras=cameras,
        name=str(header["name"]),
        features=arrays.get("features"),
    )
    scene.validate()
    return scene
