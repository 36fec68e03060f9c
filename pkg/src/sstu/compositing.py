"""Virtual camera models and the video/CG merge mathematics.

Cameras follow the vision convention: x right, y down, z forward, pixel
(u, v) = (fx*X/Z + cx, fy*Y/Z + cy).  Pose rotations are camera-to-world.
The video stream is merged into the rendered scene per pixel with the
segmentation probability as its alpha, gated by a depth test, and can be
re-projected between head poses with a rotation-only time warp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import imaging


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.1
    far: float = 100.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got near={self.near} far={self.far}")
        if self.width < 1 or self.height < 1:
            raise ValueError("sensor size must be at least 1x1 px")

    def matrix(self):
        """3x3 pinhole matrix K."""
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def hfov(self):
        return 2.0 * math.atan(self.width / (2.0 * self.fx))


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray      # 3x3, camera-to-world
    translation: np.ndarray   # 3-vector, meters

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"pose needs a 3x3 rotation and 3-vector, got {r.shape}, {t.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal within 1e-6")
        if not math.isclose(np.linalg.det(r), 1.0, abs_tol=1e-6):
            raise ValueError("rotation determinant is not +1 within 1e-6")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)


def identity_pose():
    return Pose(np.eye(3), np.zeros(3))


def rotation_yaw(deg):
    """Rotation about the camera's y (down) axis."""
    th = math.radians(deg)
    c, s = math.cos(th), math.sin(th)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_pitch(deg):
    th = math.radians(deg)
    c, s = math.cos(th), math.sin(th)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def projection(intr: Intrinsics, depth_mode="standard"):
    """4x4 camera-space -> clip matrix. After the w divide, x/y land in
    pixel units and z in [0,1] (near->0, far->1; 'reversed' flips it)."""
    n, f = intr.near, intr.far
    if depth_mode == "standard":
        a, b = f / (f - n), -f * n / (f - n)
    elif depth_mode == "reversed":
        a, b = n / (n - f), -f * n / (n - f)
    else:
        raise ValueError(f"unknown depth_mode {depth_mode!r}")
    return np.array([
        [intr.fx, 0.0, intr.cx, 0.0],
        [0.0, intr.fy, intr.cy, 0.0],
        [0.0, 0.0, a, b],
        [0.0, 0.0, 1.0, 0.0],
    ])


def project_point(intr: Intrinsics, point, depth_mode="standard"):
    """Camera-space point -> (u, v, normalized depth)."""
    p = projection(intr, depth_mode) @ np.append(np.asarray(point, dtype=np.float64), 1.0)
    if p[3] <= 0:
        raise ValueError(f"point {point} is not in front of the camera")
    return p[:3] / p[3]


def unproject_pixel(intr: Intrinsics, u, v, depth):
    """Pixel plus metric depth -> camera-space point."""
    z = float(depth)
    return np.array([(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z])


# ----------------------------------------------------------- frustum overlap

@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self):
        return max(0.0, self.x1 - self.x0)

    @property
    def height(self):
        return max(0.0, self.y1 - self.y0)

    @property
    def is_empty(self):
        return self.width == 0.0 or self.height == 0.0


def frustum_overlap(zed_intr: Intrinsics, zed_pose: Pose,
                    eye_intr: Intrinsics, eye_pose: Pose) -> Rect:
    """Axis-aligned bbox, in eye pixels, of the zed image-plane corners
    re-projected into the eye camera, clipped to the eye viewport.

    The video plane covers the zed field of view, so corner ray directions
    are enough; the small zed/eye positional offset is ignored.
    """
    r_rel = eye_pose.rotation.T @ zed_pose.rotation
    aligned = np.array_equal(r_rel, np.eye(3))
    corners = [(0.0, 0.0), (zed_intr.width, 0.0),
               (0.0, zed_intr.height), (zed_intr.width, zed_intr.height)]
    us, vs = [], []
    for (u, v) in corners:
        if aligned:
            # pure focal rescale: exact arithmetic, no division round trip
            us.append((u - zed_intr.cx) * (eye_intr.fx / zed_intr.fx) + eye_intr.cx)
            vs.append((v - zed_intr.cy) * (eye_intr.fy / zed_intr.fy) + eye_intr.cy)
            continue
        d = np.array([(u - zed_intr.cx) / zed_intr.fx,
                      (v - zed_intr.cy) / zed_intr.fy, 1.0])
        d = r_rel @ d
        if d[2] <= 1e-12:
            # corner ray leaves the eye's forward hemisphere: extend the
            # bbox toward that side so the viewport clip decides
            us.append(math.inf if d[0] >= 0 else -math.inf)
            vs.append(math.inf if d[1] >= 0 else -math.inf)
            continue
        us.append(eye_intr.fx * d[0] / d[2] + eye_intr.cx)
        vs.append(eye_intr.fy * d[1] / d[2] + eye_intr.cy)
    x0 = min(max(min(us), 0.0), float(eye_intr.width))
    x1 = max(min(max(us), float(eye_intr.width)), 0.0)
    y0 = min(max(min(vs), 0.0), float(eye_intr.height))
    y1 = max(min(max(vs), float(eye_intr.height)), 0.0)
    return Rect(x0, y0, x1, y1)


# ------------------------------------------------------------- compositing

@dataclass
class CompositeInputs:
    video: np.ndarray          # (3, H, W) RGB in [0, 1]
    prob: np.ndarray           # (H, W) person probability = alpha
    video_depth: np.ndarray    # (H, W) meters; NaN/<=0 treated as far
    virtual_rgb: np.ndarray    # (3, H, W)
    virtual_depth: np.ndarray  # (H, W) meters

    def __post_init__(self):
        dims = self.video.shape[1:]
        for name in ("prob", "video_depth", "virtual_depth"):
            if getattr(self, name).shape != dims:
                raise ValueError(f"{name} shape {getattr(self, name).shape} != video dims {dims}")
        if self.virtual_rgb.shape != self.video.shape:
            raise ValueError(
                f"virtual_rgb {self.virtual_rgb.shape} != video {self.video.shape}")


def alpha_composite(inputs: CompositeInputs):
    """Probability-as-alpha blend gated by the z-test.

    Where the video passes the depth test (strictly closer; ties go to
    the virtual content) the output is a*video + (1-a)*virtual with
    a = prob; elsewhere the virtual content wins outright.  Invalid video
    depths count as infinitely far.
    """
    vd = inputs.video_depth.astype(np.float64).copy()
    vd[~np.isfinite(vd) | (vd <= 0)] = np.inf
    video_wins = vd < inputs.virtual_depth
    a = inputs.prob[None]
    blended = a * inputs.video + (1.0 - a) * inputs.virtual_rgb
    return np.where(video_wins[None], blended, inputs.virtual_rgb)


def time_warp(frame, intr: Intrinsics, r_capture, r_display):
    """Rotation-only reprojection from the capture pose to the display pose.

    The forward map (capture pixel -> display pixel) is the homography
    K * (r_display^T r_capture) * K^-1; sampling uses its inverse with
    bilinear interpolation and black outside the frame.  Identical poses
    short-circuit to an exact copy.
    """
    r_capture = np.asarray(r_capture, dtype=np.float64)
    r_display = np.asarray(r_display, dtype=np.float64)
    for name, r in (("r_capture", r_capture), ("r_display", r_display)):
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError(f"{name} is not orthonormal within 1e-6")
    if intr.fx == 0 or intr.fy == 0:
        raise ValueError("singular intrinsics matrix")
    if np.array_equal(r_capture, r_display):
        return frame.copy()

    k = intr.matrix()
    k_inv = np.array([[1.0 / intr.fx, 0.0, -intr.cx / intr.fx],
                      [0.0, 1.0 / intr.fy, -intr.cy / intr.fy],
                      [0.0, 0.0, 1.0]])
    # inverse of K (r_d^T r_c) K^-1: display pixel -> capture pixel
    h_inv = k @ (r_capture.T @ r_display) @ k_inv

    hh, ww = frame.shape[1:]
    xs, ys = np.meshgrid(np.arange(ww, dtype=np.float64),
                         np.arange(hh, dtype=np.float64))
    denom = h_inv[2, 0] * xs + h_inv[2, 1] * ys + h_inv[2, 2]
    sx = (h_inv[0, 0] * xs + h_inv[0, 1] * ys + h_inv[0, 2]) / denom
    sy = (h_inv[1, 0] * xs + h_inv[1, 1] * ys + h_inv[1, 2]) / denom
    # rays bending behind the camera never sample the frame
    sx = np.where(denom > 0, sx, -1e9)
    sy = np.where(denom > 0, sy, -1e9)
    return imaging.bilinear_sample(frame, sx, sy)


def latency_budget(capture_ms, prep_ms, inference_ms):
    """Capture-to-display delay: the stage times simply add up."""
    for name, v in (("capture_ms", capture_ms), ("prep_ms", prep_ms),
                    ("inference_ms", inference_ms)):
        if v < 0:
            raise ValueError(f"{name} must be non-negative, got {v}")
    return capture_ms + prep_ms + inference_ms


# ------------------------------------------------------------- camera files

CAMERA_NAMES = ("cam_zed_left", "cam_zed_right", "cam_eye_left", "cam_eye_right")


@dataclass
class CameraView:
    intrinsics: Intrinsics
    pose: Pose


@dataclass
class CameraRig:
    """The four virtual cameras: the stereo video pair and the two eyes."""

    zed_left: CameraView
    zed_right: CameraView
    eye_left: CameraView
    eye_right: CameraView

    def view(self, name):
        return {
            "cam_zed_left": self.zed_left, "cam_zed_right": self.zed_right,
            "cam_eye_left": self.eye_left, "cam_eye_right": self.eye_right,
        }[name]


def default_rig(width=640, height=360) -> CameraRig:
    """Placeholder rig: 90 deg video cameras, 100 deg eyes, 64 mm baseline.
    Real footage needs a measured camera config file."""
    def cam(fov_deg, tx):
        fx = width / (2.0 * math.tan(math.radians(fov_deg) / 2.0))
        intr = Intrinsics(fx, fx, width / 2.0, height / 2.0, width, height,
                          near=0.1, far=50.0)
        return CameraView(intr, Pose(np.eye(3), np.array([tx, 0.0, 0.0])))
    return CameraRig(zed_left=cam(90.0, -0.032), zed_right=cam(90.0, 0.032),
                     eye_left=cam(100.0, -0.032), eye_right=cam(100.0, 0.032))


def save_camera_config(rig: CameraRig, path):
    lines = []
    for name in CAMERA_NAMES:
        view = rig.view(name)
        i = view.intrinsics
        lines.append(f"camera {name}")
        lines.append(f"fx {i.fx}")
        lines.append(f"fy {i.fy}")
        lines.append(f"cx {i.cx}")
        lines.append(f"cy {i.cy}")
        lines.append(f"width {i.width}")
        lines.append(f"height {i.height}")
        lines.append(f"near {i.near}")
        lines.append(f"far {i.far}")
        r = " ".join(repr(float(v)) for v in view.pose.rotation.flat)
        t = " ".join(repr(float(v)) for v in view.pose.translation)
        lines.append(f"pose {r} {t}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_camera_config(path) -> CameraRig:
    views = {}
    current = None
    fields: dict = {}

    def finish():
        if current is None:
            return
        missing = [k for k in ("fx", "fy", "cx", "cy", "width", "height",
                               "near", "far", "pose") if k not in fields]
        if missing:
            raise ValueError(f"{path}: camera {current} missing {missing}")
        pose_vals = fields["pose"]
        if len(pose_vals) != 12:
            raise ValueError(f"{path}: camera {current}: pose needs 12 numbers")
        intr = Intrinsics(fields["fx"], fields["fy"], fields["cx"], fields["cy"],
                          int(fields["width"]), int(fields["height"]),
                          fields["near"], fields["far"])
        pose = Pose(np.array(pose_vals[:9]).reshape(3, 3), np.array(pose_vals[9:]))
        views[current] = CameraView(intr, pose)

    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "camera":
                finish()
                current = parts[1]
                fields = {}
            elif parts[0] == "pose":
                fields["pose"] = [float(v) for v in parts[1:]]
            elif parts[0] in ("fx", "fy", "cx", "cy", "width", "height", "near", "far"):
                fields[parts[0]] = float(parts[1])
            else:
                raise ValueError(f"{path}:{ln}: unknown camera-config key {parts[0]!r}")
    finish()
    missing = [n for n in CAMERA_NAMES if n not in views]
    if missing:
        raise ValueError(f"{path}: missing cameras {missing}")
    return CameraRig(zed_left=views["cam_zed_left"], zed_right=views["cam_zed_right"],
                     eye_left=views["cam_eye_left"], eye_right=views["cam_eye_right"])
