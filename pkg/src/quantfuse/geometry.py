"""Full-precision synthetic geometric back-end.

Not a bundle adjuster: a minimal frame-to-frame pipeline (descriptor
matching, Gauss-Newton/Levenberg PnP with a ground-truth depth prior, pose
chaining) that is just enough to observe whether front-end quantization
noise survives nonlinear optimization. All arithmetic is float64.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import ArenaAllocator, ExecutionPlan, ExecutionTrace, run_frontend
from .frontend import FrontendModel, inject_qat, strip_qat
from .quant import QuantConfig
from .tensor import Precision, Tensor

MOTIONS = ("orbit", "line", "random-walk")
CELL = 4  # descriptor stride in pixels


class GeometryError(ValueError):
    pass


class InsufficientCorrespondences(GeometryError):
    def __init__(self, n: int, needed: int = 6):
        super().__init__(f"insufficient correspondences: {n} < {needed}")
        self.n = n


def _require_full(*tensors):
    for t in tensors:
        if isinstance(t, Tensor) and t.precision is not Precision.FULL:
            raise GeometryError("back-end inputs must be full precision")


# -- rotations ------------------------------------------------------------------

def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    th = np.linalg.norm(w)
    K = skew(w)
    if th < 1e-12:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(th) / th * K + (1 - np.cos(th)) / th**2 * K @ K


def quat_to_rot(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(R) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0."""
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform; as a camera pose it maps camera to world coordinates."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        object.__setattr__(self, "q", q / np.linalg.norm(q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_rt(cls, R, t) -> "Pose":
        return cls(rot_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rot(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        R = self.R
        return Pose.from_rt(R @ other.R, R @ other.t + self.t)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose.from_rt(Rt, -Rt @ self.t)

    def apply(self, pts) -> np.ndarray:
        return np.asarray(pts) @ self.R.T + self.t


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @classmethod
    def default(cls, width: int = 128, height: int = 128) -> "Camera":
        f = 0.875 * width
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)

    def project(self, P) -> np.ndarray:
        P = np.atleast_2d(P)
        return np.stack([self.fx * P[:, 0] / P[:, 2] + self.cx, self.fy * P[:, 1] / P[:, 2] + self.cy], axis=1)

    def backproject(self, uv, depth) -> np.ndarray:
        uv = np.atleast_2d(uv)
        depth = np.asarray(depth, dtype=np.float64)
        x = (uv[:, 0] - self.cx) / self.fx
        y = (uv[:, 1] - self.cy) / self.fy
        return np.stack([x * depth, y * depth, depth], axis=1)


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list[Pose]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.timestamps) != len(self.poses):
            raise GeometryError("timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise GeometryError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        """N x 3 translations."""
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    def translation_matrix(self) -> np.ndarray:
        """3 x N translations."""
        return self.positions().T


# -- scenes ---------------------------------------------------------------------

@dataclass
class SyntheticScene:
    landmarks: np.ndarray
    colors: np.ndarray
    gt_trajectory: Trajectory
    camera: Camera
    sigma_px: float = 3.5
    seed: int = 0
    motion: str = "orbit"

    @property
    def n_frames(self) -> int:
        return len(self.gt_trajectory)

    def visible(self, pose: Pose, margin: float = 0.0) -> np.ndarray:
        P = pose.inverse().apply(self.landmarks)
        ok = P[:, 2] > 0.5
        uv = np.full((len(P), 2), -1e9)
        uv[ok] = self.camera.project(P[ok])
        cam = self.camera
        return ok & (uv[:, 0] >= -margin) & (uv[:, 0] <= cam.width - 1 + margin) \
            & (uv[:, 1] >= -margin) & (uv[:, 1] <= cam.height - 1 + margin)


def _euler_yp(yaw: float, pitch: float) -> np.ndarray:
    return so3_exp([0.0, yaw, 0.0]) @ so3_exp([pitch, 0.0, 0.0])


def _motion(rng, n: int, motion: str, speed: float) -> list[Pose]:
    # speed 1.0 ~ 0.05 m and 2 deg per frame; per-frame bounds are 0.1 m / 5 deg
    k = np.arange(n)
    if motion == "orbit":
        # the loop closes in n frames, so short orbits shrink to stay in bounds
        amp = speed * min(1.0, n / 40)
        r = 0.5 * amp
        phase = rng.uniform(0, 2 * np.pi)
        th = 2 * np.pi * k / n
        pos = np.stack([r * (np.cos(th) - 1), r * np.sin(th), 0.2 * r * np.sin(2 * th)], axis=1)
        yaw = np.deg2rad(12.0 * amp) * np.sin(th + phase)
        pitch = np.deg2rad(8.0 * amp) * np.sin(2 * th)
    elif motion == "line":
        ang = rng.uniform(-np.pi, np.pi)
        d = np.array([np.cos(ang), 0.5 * np.sin(ang), 0.4])
        d = d / np.linalg.norm(d) * 0.05 * speed
        pos = k[:, None] * d[None, :]
        amp = speed * min(1.0, n / 24)
        yaw = np.deg2rad(15.0 * amp) * np.sin(2 * np.pi * k / n + rng.uniform(0, 2 * np.pi))
        pitch = np.deg2rad(6.0 * amp) * np.sin(2 * np.pi * k / n)
    elif motion == "random-walk":
        vel = np.zeros(3)
        av = np.zeros(2)
        pos, yaw, pitch = [np.zeros(3)], [0.0], [0.0]
        vmax, amax = 0.06 * speed, np.deg2rad(2.5 * speed)
        for _ in range(1, n):
            vel = np.clip(0.85 * vel + rng.normal(0, 0.3 * vmax, 3), -vmax, vmax)
            av = np.clip(0.85 * av + rng.normal(0, 0.3 * amax, 2), -amax, amax)
            pos.append(pos[-1] + vel)
            yaw.append(yaw[-1] + av[0])
            pitch.append(pitch[-1] + av[1])
        pos, yaw, pitch = np.array(pos), np.array(yaw), np.array(pitch)
    else:
        raise GeometryError(f"motion must be one of {MOTIONS}, got {motion!r}")
    return [Pose.from_rt(_euler_yp(yaw[i], pitch[i]), pos[i]) for i in range(n)]


def generate_scene(seed: int, n_frames: int, motion: str = "orbit", width: int = 128,
                   height: int = 128, density: float = 1.0, depth_range=(0.5, 4.0),
                   speed: float = 1.0, min_visible: int = 12) -> SyntheticScene:
    """Deterministic landmark scene with a smooth ground-truth trajectory.

    Landmarks fill a slab ``depth_range`` metres in front of the trajectory
    with ``density`` landmarks per square metre of slab per metre of depth;
    frames that see fewer than ``min_visible`` landmarks get extra landmarks
    in their view.
    """
    if n_frames < 2:
        raise GeometryError(f"need at least 2 frames, got {n_frames}")
    if motion not in MOTIONS:
        raise GeometryError(f"motion must be one of {MOTIONS}, got {motion!r}")
    rng = np.random.default_rng([seed, MOTIONS.index(motion)])
    poses = _motion(rng, n_frames, motion, speed)
    cam = Camera.default(width, height)
    pos = np.array([p.t for p in poses])
    z0, z1 = depth_range
    reach = 0.8 * z1
    lo = pos.min(axis=0) - reach
    hi = pos.max(axis=0) + reach
    z_lo, z_hi = pos[:, 2].min() + z0, pos[:, 2].max() + z1
    n_land = int(density * (hi[0] - lo[0]) * (hi[1] - lo[1]) * (z_hi - z_lo))
    pts = np.column_stack([
        rng.uniform(lo[0], hi[0], n_land),
        rng.uniform(lo[1], hi[1], n_land),
        rng.uniform(z_lo, z_hi, n_land),
    ])
    colors = rng.uniform(0.25, 1.0, (n_land, 3))
    ts = np.arange(n_frames, dtype=np.float64) / 10.0
    scene = SyntheticScene(pts, colors, Trajectory(ts, poses), cam, seed=seed, motion=motion)
    for p in poses:
        have = int(np.count_nonzero(scene.visible(p)))
        if have < min_visible:
            m = min_visible - have + 4
            uv = rng.uniform([4, 4], [width - 5, height - 5], (m, 2))
            d = rng.uniform(z0, z1, m)
            new = p.apply(cam.backproject(uv, d))
            scene.landmarks = np.vstack([scene.landmarks, new])
            scene.colors = np.vstack([scene.colors, rng.uniform(0.25, 1.0, (m, 3))])
    return scene


def render(scene: SyntheticScene, pose: Pose) -> tuple[Tensor, np.ndarray]:
    """Gaussian-splat image [3,H,W] in [0,1] and per-pixel depth (0 = empty).

    Splats are accumulated additively; depth is that of the splat with the
    largest weight at each pixel, or 0 where every weight is below 1e-3.
    """
    cam = scene.camera
    sig = scene.sigma_px
    rad = int(np.ceil(4 * sig))
    P = pose.inverse().apply(scene.landmarks)
    m = scene.visible(pose, margin=rad)
    P, col = P[m], scene.colors[m]
    uv = cam.project(P) if len(P) else np.zeros((0, 2))
    img = np.zeros((3, cam.height, cam.width))
    wmax = np.zeros((cam.height, cam.width))
    depth = np.zeros((cam.height, cam.width))
    for (u, v), z, c in zip(uv, P[:, 2], col):
        x0, x1 = max(int(np.floor(u)) - rad, 0), min(int(np.floor(u)) + rad + 2, cam.width)
        y0, y1 = max(int(np.floor(v)) - rad, 0), min(int(np.floor(v)) + rad + 2, cam.height)
        if x0 >= x1 or y0 >= y1:
            continue
        gx = np.exp(-((np.arange(x0, x1) - u) ** 2) / (2 * sig**2))
        gy = np.exp(-((np.arange(y0, y1) - v) ** 2) / (2 * sig**2))
        w = gy[:, None] * gx[None, :]
        img[:, y0:y1, x0:x1] += c[:, None, None] * w
        win = wmax[y0:y1, x0:x1]
        upd = w > win
        win[upd] = w[upd]
        depth[y0:y1, x0:x1][upd] = z
    depth[wmax <= 1e-3] = 0.0
    return Tensor(np.clip(img, 0.0, 1.0)), depth


def render_frames(scene: SyntheticScene) -> tuple[list[Tensor], list[np.ndarray]]:
    out = [render(scene, p) for p in scene.gt_trajectory.poses]
    return [o[0] for o in out], [o[1] for o in out]


# -- matching ---------------------------------------------------------------------

@dataclass
class Correspondences:
    prev: np.ndarray  # M x 2 (x, y) in descriptor cells
    cur: np.ndarray
    score: np.ndarray

    def __len__(self) -> int:
        return len(self.prev)

    def displacement(self) -> np.ndarray:
        return self.cur - self.prev


def _normalize(d: np.ndarray) -> np.ndarray:
    n = np.sqrt(np.einsum("chw,chw->hw", d, d))
    return d / np.where(n > 0, n, 1.0)


def match_descriptors(d_prev, d_cur, grid_stride: int = 1, search_radius: int = 3,
                      ratio: float = 0.9, subpixel: bool = False, mutual: bool = False,
                      min_matches: int = 6) -> Correspondences:
    """Cosine nearest-neighbour matching of grid cells within a search window.

    A match survives when its cosine distance is below ``ratio`` times the
    best distance found outside the 3x3 neighbourhood of the winner. With
    ``mutual`` the current cell must also pick the previous cell back. With
    ``subpixel`` each winner is refined to a fractional offset within half a
    cell by maximizing the similarity against the bilinearly resampled map.
    """
    _require_full(d_prev, d_cur)
    a = np.asarray(d_prev.data if isinstance(d_prev, Tensor) else d_prev, dtype=np.float64)
    b = np.asarray(d_cur.data if isinstance(d_cur, Tensor) else d_cur, dtype=np.float64)
    if a.shape != b.shape:
        raise GeometryError(f"descriptor maps differ in shape: {a.shape} vs {b.shape}")
    _, H, W = a.shape
    a, b = _normalize(a), _normalize(b)
    r = search_radius
    offs = np.array([(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)])
    sims = np.full((len(offs), H, W), -np.inf)
    for k, (dy, dx) in enumerate(offs):
        y0, y1 = max(0, -dy), min(H, H - dy)
        x0, x1 = max(0, -dx), min(W, W - dx)
        if y0 >= y1 or x0 >= x1:
            continue
        sims[k, y0:y1, x0:x1] = np.einsum(
            "chw,chw->hw", a[:, y0:y1, x0:x1], b[:, y0 + dy : y1 + dy, x0 + dx : x1 + dx])

    sel = np.zeros((H, W), dtype=bool)
    sel[::grid_stride, ::grid_stride] = True
    best = np.argmax(sims, axis=0)
    s_best = np.take_along_axis(sims, best[None], 0)[0]
    cheb = np.max(np.abs(offs[:, None, :] - offs[None, :, :]), axis=2)  # K x K
    near = cheb[best]  # H x W x K
    s_other = np.where(np.moveaxis(near, 2, 0) <= 1, -np.inf, sims).max(axis=0)
    d_best, d_second = 1.0 - s_best, 1.0 - s_other
    has_desc = np.einsum("chw,chw->hw", a, a) > 0
    ok = sel & has_desc & np.isfinite(s_best) & (d_best < ratio * d_second)
    if mutual:
        # sims re-indexed by current cell: back[k, y + dy, x + dx] = sims[k, y, x]
        back = np.full_like(sims, -np.inf)
        for k, (dy, dx) in enumerate(offs):
            y0, y1 = max(0, -dy), min(H, H - dy)
            x0, x1 = max(0, -dx), min(W, W - dx)
            if y0 < y1 and x0 < x1:
                back[k, y0 + dy : y1 + dy, x0 + dx : x1 + dx] = sims[k, y0:y1, x0:x1]
        best_back = np.argmax(back, axis=0)
        yy, xx = np.nonzero(ok)
        o = offs[best[yy, xx]]
        ok[yy, xx] = best_back[yy + o[:, 0], xx + o[:, 1]] == best[yy, xx]

    ys, xs = np.nonzero(ok)
    off = offs[best[ys, xs]].astype(np.float64)
    cur = np.stack([xs + off[:, 1], ys + off[:, 0]], axis=1)
    prev = np.stack([xs, ys], axis=1).astype(np.float64)
    if subpixel and len(ys):
        cur = _refine_subpixel(a, b, prev, cur)
    if len(prev) < min_matches:
        raise InsufficientCorrespondences(len(prev), min_matches)
    return Correspondences(prev, cur, s_best[ys, xs])


def sample_bilinear(desc: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """C x N samples of a C x H x W map at fractional (x, y), clamped to the border."""
    _, H, W = desc.shape
    hwc = np.ascontiguousarray(np.moveaxis(desc, 0, -1))
    x = np.clip(x, 0, W - 1)
    y = np.clip(y, 0, H - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx, fy = (x - x0)[:, None], (y - y0)[:, None]
    out = (hwc[y0, x0] * (1 - fx) * (1 - fy) + hwc[y0, x1] * fx * (1 - fy)
           + hwc[y1, x0] * (1 - fx) * fy + hwc[y1, x1] * fx * fy)
    return out.T


def _refine_subpixel(a: np.ndarray, b: np.ndarray, prev: np.ndarray, cur: np.ndarray,
                     step: float = 0.125) -> np.ndarray:
    # grid search of the cosine similarity against the bilinearly resampled
    # current map over offsets in [-0.5, 0.5]^2 around each integer match
    g = np.arange(-0.5, 0.5 + 1e-9, step)
    ox, oy = (v.ravel() for v in np.meshgrid(g, g))
    pa = a[:, prev[:, 1].astype(np.int64), prev[:, 0].astype(np.int64)]
    xs = (cur[:, 0][:, None] + ox[None]).ravel()
    ys = (cur[:, 1][:, None] + oy[None]).ravel()
    v = sample_bilinear(b, xs, ys).reshape(a.shape[0], len(prev), len(ox))
    nv = np.sqrt(np.einsum("cmk,cmk->mk", v, v))
    s = np.einsum("cm,cmk->mk", pa, v) / np.where(nv > 0, nv, 1.0)
    # exact integer match wins ties so identical maps refine to zero offset
    k = np.argmax(s, axis=1)
    centre = len(ox) // 2
    k = np.where(s[np.arange(len(k)), k] <= s[:, centre], centre, k)
    return cur + np.stack([ox[k], oy[k]], axis=1)


# -- pose solver ------------------------------------------------------------------

@dataclass
class GNResult:
    pose: Pose
    iterations: int
    cost: float
    rms_px: float
    converged: bool
    cost_history: list[float] = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return not self.converged


def reprojection_residuals(pose: Pose, pts: np.ndarray, obs: np.ndarray, camera: Camera) -> np.ndarray:
    return (camera.project(pose.apply(pts)) - obs).ravel()


def reprojection_jacobian(pose: Pose, pts: np.ndarray, camera: Camera) -> np.ndarray:
    """d residual / d (omega, v) for the left update P -> exp(omega) P + v."""
    P = pose.apply(pts)
    x, y, z = P[:, 0], P[:, 1], P[:, 2]
    n = len(P)
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = camera.fx / z
    dproj[:, 0, 2] = -camera.fx * x / z**2
    dproj[:, 1, 1] = camera.fy / z
    dproj[:, 1, 2] = -camera.fy * y / z**2
    dP = np.zeros((n, 3, 6))
    dP[:, 0, 1], dP[:, 0, 2] = z, -y
    dP[:, 1, 0], dP[:, 1, 2] = -z, x
    dP[:, 2, 0], dP[:, 2, 1] = y, -x
    dP[:, :, 3:] = np.eye(3)
    return np.einsum("nij,njk->nik", dproj, dP).reshape(2 * n, 6)


def retract(pose: Pose, delta) -> Pose:
    Rd = so3_exp(delta[:3])
    return Pose.from_rt(Rd @ pose.R, Rd @ pose.t + np.asarray(delta[3:]))


def solve_pose_gn(pts: np.ndarray, obs: np.ndarray, camera: Camera, init: Pose,
                  max_iter: int = 20, lambda0: float = 1e-4, planar: bool = False,
                  rms_threshold: float = 1.0) -> GNResult:
    """Levenberg-damped Gauss-Newton on reprojection error.

    ``pts`` are 3-D points in the source frame (from the depth prior) and
    ``obs`` their observed pixels in the target frame; the result maps source
    to target coordinates. Damping starts at ``lambda0``, x10 on a rejected
    step and /10 on an accepted one. Stops when the step norm drops below
    1e-10 or the cost decrease below 1e-12. ``planar`` restricts the update
    to yaw and x/z translation.
    """
    pts = np.asarray(pts, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if len(pts) < 6:
        raise InsufficientCorrespondences(len(pts))
    if np.any(pts[:, 2] <= 0):
        raise GeometryError("depth prior must be positive")
    cols = [1, 3, 5] if planar else list(range(6))
    pose, lam = init, lambda0
    r = reprojection_residuals(pose, pts, obs, camera)
    cost = 0.5 * float(r @ r)
    history = [cost]
    it = 0
    done = False
    while it < max_iter and not done:
        it += 1
        J = reprojection_jacobian(pose, pts, camera)[:, cols]
        H = J.T @ J
        g = J.T @ r
        while True:
            step = -np.linalg.solve(H + lam * np.eye(len(cols)), g)
            delta = np.zeros(6)
            delta[cols] = step
            if np.linalg.norm(step) < 1e-10:
                done = True
                break
            cand = retract(pose, delta)
            r_new = reprojection_residuals(cand, pts, obs, camera)
            c_new = 0.5 * float(r_new @ r_new)
            if c_new <= cost:
                reduction = cost - c_new
                pose, r, cost = cand, r_new, c_new
                history.append(cost)
                lam = max(lam / 10, 1e-12)
                if reduction < 1e-12:
                    done = True
                break
            lam *= 10
            if lam > 1e12:
                done = True
                break
    rms = float(np.sqrt(2 * cost / len(pts)))
    converged = done or rms <= rms_threshold
    return GNResult(pose, it, cost, rms, converged, history)


# -- ATE ----------------------------------------------------------------------------

def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Least-squares (s, R, t) with dst ~ s R src + t; inputs are N x 3."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = np.mean(np.sum(xs * xs, axis=1))
    if var_s < 1e-18:
        raise GeometryError("degenerate trajectory: all points coincide")
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def ate_rmse(estimated: Trajectory, gt: Trajectory, with_scale: bool = True) -> float:
    """Translational RMSE after closed-form similarity (or rigid) alignment."""
    if len(estimated) != len(gt) or len(gt) < 2:
        raise GeometryError("trajectories must have equal length >= 2")
    if not np.allclose(estimated.timestamps, gt.timestamps, atol=1e-9):
        raise GeometryError("trajectory timestamps do not match")
    e, g = estimated.positions(), gt.positions()
    if np.mean(np.sum((g - g.mean(0)) ** 2, axis=1)) < 1e-18:
        raise GeometryError("degenerate trajectory: all points coincide")
    if with_scale and np.mean(np.sum((e - e.mean(0)) ** 2, axis=1)) < 1e-18:
        # collapsed estimate: the best similarity maps every point to the gt centroid
        res = g - g.mean(0)
        return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))
    s, R, t = umeyama(e, g, with_scale)
    res = g - (s * e @ R.T + t)
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))


# -- TUM files ------------------------------------------------------------------

def trajectory_to_tum(traj: Trajectory) -> str:
    lines = []
    for ts, p in zip(traj.timestamps, traj.poses):
        w, x, y, z = p.q
        vals = [ts, *p.t, x, y, z, w]
        lines.append(" ".join(f"{v:.9f}" if i == 0 else f"{v:.12f}" for i, v in enumerate(vals)))
    return "\n".join(lines) + "\n"


def write_tum(traj: Trajectory, path) -> None:
    Path(path).write_text(trajectory_to_tum(traj))


def read_tum(path) -> Trajectory:
    ts, poses = [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        v = [float(x) for x in line.split()]
        if len(v) != 8:
            raise GeometryError(f"TUM line needs 8 fields, got {len(v)}: {line!r}")
        ts.append(v[0])
        poses.append(Pose(np.array([v[7], v[4], v[5], v[6]]), v[1:4]))
    return Trajectory(np.array(ts), poses)


# -- pipeline ---------------------------------------------------------------------

@dataclass
class PipelineResult:
    trajectory: Trajectory
    trace: ExecutionTrace
    ate: float
    flagged: list[int]
    match_failures: list[int]
    frame_ns: list[int]
    ttfp_ns: int
    n_matches: list[int]

    def __iter__(self):
        yield from (self.trajectory, self.trace, self.ate)


@dataclass(frozen=True)
class TrackerConfig:
    """Frame-to-frame tracking knobs used by :func:`run_pipeline`."""

    search_radius: int = 3
    ratio: float = 0.9
    mutual: bool = True
    subpixel: bool = True
    reject_px: float = 3.0
    reject_rounds: int = 2
    planar: bool = False
    depth_noise: float = 0.0


def estimate_motion(prev_desc, desc, prev_depth: np.ndarray, camera: Camera, init: Pose,
                    cfg: TrackerConfig = TrackerConfig(), rng=None) -> tuple[GNResult, int]:
    """Relative pose mapping previous-camera points into the current camera.

    Matched previous cells are lifted to 3-D with ``prev_depth``; after each
    solve, correspondences reprojecting worse than ``reject_px`` are dropped
    and the pose is re-solved, up to ``reject_rounds`` times.
    """
    corr = match_descriptors(prev_desc, desc, search_radius=cfg.search_radius, ratio=cfg.ratio,
                             subpixel=cfg.subpixel, mutual=cfg.mutual)
    uv_prev = corr.prev * CELL
    uv_cur = corr.cur * CELL
    d = prev_depth[uv_prev[:, 1].astype(np.int64), uv_prev[:, 0].astype(np.int64)]
    keep = d > 0
    if cfg.depth_noise:
        rng = rng if rng is not None else np.random.default_rng(0)
        d = d * np.exp(cfg.depth_noise * rng.standard_normal(len(d)))
    pts = camera.backproject(uv_prev[keep], d[keep])
    obs = uv_cur[keep]
    res = solve_pose_gn(pts, obs, camera, init, planar=cfg.planar)
    for _ in range(cfg.reject_rounds if cfg.reject_px > 0 else 0):
        err = np.linalg.norm(camera.project(res.pose.apply(pts)) - obs, axis=1)
        inl = err <= cfg.reject_px
        if inl.all() or inl.sum() < 6:
            break
        pts, obs = pts[inl], obs[inl]
        res = solve_pose_gn(pts, obs, camera, res.pose, planar=cfg.planar)
    return res, len(pts)


def prepare_model(model: FrontendModel, scales, cfg: QuantConfig | None = None) -> FrontendModel:
    """Float baseline when ``scales`` is None, otherwise the model with those scales injected."""
    base = strip_qat(model)
    if scales is None:
        return base
    return inject_qat(base, cfg or QuantConfig(), scales)


def run_pipeline(model: FrontendModel, scales, plan: ExecutionPlan, scene: SyntheticScene,
                 cfg: QuantConfig | None = None, rendered=None, arena: ArenaAllocator | None = None,
                 tracker: TrackerConfig = TrackerConfig()) -> PipelineResult:
    """Render -> front-end -> match -> Gauss-Newton, chained into a trajectory.

    Frames are rendered before timing starts (submission = hand-off to the
    front-end). The first pose is anchored to ground truth; a frame that
    cannot be matched reuses the previous relative motion and is flagged.
    """
    t_start = time.perf_counter_ns()
    net = prepare_model(model, scales, cfg)
    arena = arena if arena is not None else ArenaAllocator()
    weight_cache: dict = {}
    frames, depths = rendered if rendered is not None else render_frames(scene)
    rng = np.random.default_rng(scene.seed + 7919)
    gt = scene.gt_trajectory

    poses = [gt.poses[0]]
    rel = Pose.identity()  # maps previous-camera points into the current camera
    trace = ExecutionTrace(mode=plan.mode.value if net.n_quantized else "baseline")
    flagged, failures, frame_ns, n_matches = [], [], [], []
    ttfp = 0
    prev_desc = None
    for k, img in enumerate(frames):
        t0 = time.perf_counter_ns()
        _, desc, tr = run_frontend(plan, net, img, arena, weight_cache)
        trace = trace + tr
        if k > 0:
            try:
                res, n = estimate_motion(prev_desc, desc, depths[k - 1], scene.camera, rel, tracker, rng)
                rel = res.pose
                n_matches.append(n)
                if res.flagged:
                    flagged.append(k)
            except InsufficientCorrespondences:
                failures.append(k)
                flagged.append(k)
                n_matches.append(0)
            poses.append(poses[-1] @ rel.inverse())
        prev_desc = desc
        t1 = time.perf_counter_ns()
        frame_ns.append(t1 - t0)
        if k == 1:
            ttfp = t1 - t_start
    est = Trajectory(gt.timestamps.copy(), poses)
    ate = ate_rmse(est, gt, with_scale=True)
    return PipelineResult(est, trace, ate, flagged, failures, frame_ns, ttfp, n_matches)
