"""Pinhole ray tracing of the eye-in-hand camera view.

One primary ray per pixel centre, no lens distortion.  The mask marks
pixels whose nearest hit is the target sphere.  RGB shading is Lambertian
with hard shadows from directional lights and a flat ambient term;
``flat=True`` drops shadows and the cosine term, which mimics the even
lighting of a basic robot simulator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .kinematics import Pose, forward_kinematics
from .simenv import Box, EnvState, SimConfig, gripper_plates

EPS = 1e-7
SPHERE_ID, TABLE_ID = 1, 2
YELLOW = (1.0, 0.85, 0.1)


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    focal: float
    cx: float
    cy: float

    @staticmethod
    def with_fov(width, height=None, fov_deg=80.0):
        """Square pixels; ``fov_deg`` is the horizontal field of view."""
        height = width if height is None else height
        focal = (width / 2) / math.tan(math.radians(fov_deg / 2))
        return CameraIntrinsics(width, height, focal, width / 2, height / 2)

    def scaled(self, s):
        return CameraIntrinsics(round(self.width * s), round(self.height * s), self.focal * s,
                                self.cx * s, self.cy * s)


RGB_INTRINSICS = CameraIntrinsics.with_fov(400)
MASK_INTRINSICS = CameraIntrinsics.with_fov(100)


def pixel_rays(pose: Pose, K: CameraIntrinsics):
    """Ray origin and unit world directions (H, W, 3) through pixel centres."""
    u = (np.arange(K.width) + 0.5 - K.cx) / K.focal
    v = (np.arange(K.height) + 0.5 - K.cy) / K.focal
    d = np.empty((K.height, K.width, 3))
    d[..., 0] = u[None, :]
    d[..., 1] = v[:, None]
    d[..., 2] = 1.0
    d = d @ pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return np.asarray(pose.translation, float), d


# -- primitives ---------------------------------------------------------------

def _texture(points, color, texture, scale):
    color = np.asarray(color, float)
    if texture is None:
        return np.broadcast_to(color, points.shape).copy()
    x, y, z = points[:, 0] / scale, points[:, 1] / scale, points[:, 2] / scale
    if texture == "checker":
        k = (np.floor(x) + np.floor(y) + np.floor(z)) % 2
    elif texture == "stripes":
        k = np.floor(x + y) % 2
    elif texture == "noise":
        k = 0.5 + 0.5 * np.sin(12.9898 * np.floor(x) + 78.233 * np.floor(y) + 37.719 * np.floor(z))
    else:
        raise ValueError(f"unknown texture {texture!r}")
    return color * (0.45 + 0.55 * k)[:, None]


@dataclass(frozen=True)
class SphereSolid:
    center: np.ndarray
    radius: float
    color: tuple = YELLOW
    texture: str | None = None
    tex_scale: float = 0.01

    def intersect(self, o, d):
        oc = o - self.center
        b = np.sum(oc * d, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius ** 2
        disc = b * b - c
        t = np.full(disc.shape, np.inf)
        ok = disc >= 0
        s = np.sqrt(np.where(ok, disc, 0.0))
        t0, t1 = -b - s, -b + s
        near = ok & (t0 > EPS)
        far = ok & ~near & (t1 > EPS)
        t[near] = t0[near]
        t[far] = t1[far]
        return t

    def normal(self, p):
        return (p - self.center) / self.radius


@dataclass(frozen=True)
class BoxSolid:
    box: Box
    color: tuple = (0.25, 0.25, 0.28)
    texture: str | None = None
    tex_scale: float = 0.01

    def intersect(self, o, d):
        R, c, h = self.box.rotation, self.box.center, self.box.half
        ol = (o - c) @ R
        dl = d @ R
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dl
            t1 = (-h - ol) * inv
            t2 = (h - ol) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        hit = tmax >= np.maximum(tmin, EPS)
        t = np.where(tmin > EPS, tmin, tmax)
        return np.where(hit, t, np.inf)

    def normal(self, p):
        R, c, h = self.box.rotation, self.box.center, self.box.half
        local = (p - c) @ R / h
        axis = np.argmax(np.abs(local), axis=-1)
        n = np.zeros_like(local)
        n[np.arange(len(p)), axis] = np.sign(local[np.arange(len(p)), axis])
        return n @ R.T


@dataclass(frozen=True)
class CylinderSolid:
    """Upright cylinder between heights z0 and z1."""

    center_xy: np.ndarray
    z0: float
    z1: float
    radius: float
    color: tuple = (0.5, 0.5, 0.5)
    texture: str | None = None
    tex_scale: float = 0.01

    def intersect(self, o, d):
        o = np.broadcast_to(o, d.shape)
        ox, oy = o[..., 0] - self.center_xy[0], o[..., 1] - self.center_xy[1]
        dx, dy = d[..., 0], d[..., 1]
        a = dx * dx + dy * dy
        b = ox * dx + oy * dy
        c = ox * ox + oy * oy - self.radius ** 2
        t = np.full(a.shape, np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            disc = b * b - a * c
            s = np.sqrt(np.where(disc >= 0, disc, 0.0))
            for root in ((-b - s) / a, (-b + s) / a):
                z = o[..., 2] + root * d[..., 2]
                ok = (disc >= 0) & (a > 0) & (root > EPS) & (z >= self.z0) & (z <= self.z1)
                t = np.where(ok & (root < t), root, t)
            for zc in (self.z0, self.z1):
                root = (zc - o[..., 2]) / d[..., 2]
                px, py = ox + root * dx, oy + root * dy
                ok = (root > EPS) & (px * px + py * py <= self.radius ** 2)
                t = np.where(ok & (root < t), root, t)
        return t

    def normal(self, p):
        n = np.zeros_like(p)
        top = np.abs(p[:, 2] - self.z1) < 1e-6
        bottom = np.abs(p[:, 2] - self.z0) < 1e-6
        side = ~(top | bottom)
        n[side, 0] = p[side, 0] - self.center_xy[0]
        n[side, 1] = p[side, 1] - self.center_xy[1]
        n[side] /= np.linalg.norm(n[side], axis=-1, keepdims=True)
        n[top, 2] = 1
        n[bottom, 2] = -1
        return n


@dataclass(frozen=True)
class TableSolid:
    z: float
    color: tuple = (0.55, 0.5, 0.45)
    texture: str | None = None
    tex_scale: float = 0.03

    def intersect(self, o, d):
        o = np.broadcast_to(o, d.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.z - o[..., 2]) / d[..., 2]
        return np.where(np.isfinite(t) & (t > EPS), t, np.inf)

    def normal(self, p):
        n = np.zeros_like(p)
        n[:, 2] = 1
        return n


@dataclass(frozen=True)
class Light:
    direction: np.ndarray  # unit vector pointing toward the light
    intensity: float = 0.8


@dataclass
class Scene:
    sphere: SphereSolid
    table: TableSolid
    occluders: list = field(default_factory=list)
    lights: list = field(default_factory=list)
    distractors: list = field(default_factory=list)
    ambient: float = 0.25
    sky: tuple = (0.7, 0.72, 0.75)

    def objects(self):
        """Index i+1 is the object id; the sphere is always id 1, the table id 2."""
        return [self.sphere, self.table, *self.occluders, *self.distractors]


def trace(o, d, scene: Scene):
    """Nearest hit distance and object id (0 = miss) per ray."""
    best_t = np.full(d.shape[:-1], np.inf)
    best_id = np.zeros(d.shape[:-1], np.int32)
    for i, obj in enumerate(scene.objects(), start=1):
        t = obj.intersect(o, d)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, i, best_id)
    return best_t, best_id


def hit_ids(camera: Pose, scene: Scene, K: CameraIntrinsics):
    o, d = pixel_rays(camera, K)
    return trace(o, d, scene)[1]


def render_mask(camera: Pose, scene: Scene, K: CameraIntrinsics = MASK_INTRINSICS) -> np.ndarray:
    """uint8 mask: 1 where the pixel-centre ray meets the target sphere first."""
    return (hit_ids(camera, scene, K) == SPHERE_ID).astype(np.uint8)


def render_rgb(camera: Pose, scene: Scene, K: CameraIntrinsics = RGB_INTRINSICS, flat=False,
               only=None):
    """Shaded image in [0, 1] and the per-pixel object ids.

    ``only`` restricts shading to a set of object ids (other pixels keep the
    sky colour), which saves work when the result is alpha-composited.
    """
    o, d = pixel_rays(camera, K)
    t, ids = trace(o, d, scene)
    img = np.empty(d.shape)
    img[...] = scene.sky
    objects = scene.objects()
    for i, obj in enumerate(objects, start=1):
        if only is not None and i not in only:
            continue
        sel = ids == i
        if not sel.any():
            continue
        p = o + t[sel][:, None] * d[sel]
        albedo = _texture(p, obj.color, obj.texture, obj.tex_scale)
        if flat:
            light = scene.ambient + sum(l.intensity for l in scene.lights)
            img[sel] = albedo * light
            continue
        n = obj.normal(p)
        # face the viewer (box/table seen from below or inside)
        flip = np.sum(n * d[sel], axis=-1) > 0
        n[flip] *= -1
        shade = np.full(len(p), scene.ambient)
        lift = p + n * 1e-6
        for light in scene.lights:
            ldir = np.asarray(light.direction, float)
            cos = np.clip(n @ ldir, 0, None)
            lit = cos > 0
            if lit.any():
                ls = np.broadcast_to(ldir, (int(lit.sum()), 3))
                blocked = np.zeros(int(lit.sum()), bool)
                for other in objects:
                    blocked |= np.isfinite(other.intersect(lift[lit], ls))
                cos[np.flatnonzero(lit)[blocked]] = 0
            shade += light.intensity * cos
        img[sel] = albedo * shade[:, None]
    return np.clip(img, 0, 1), ids


def compose(foreground, alpha, background):
    """Per-pixel convex blend alpha*fg + (1-alpha)*bg."""
    fg, bg = np.asarray(foreground, float), np.asarray(background, float)
    a = np.asarray(alpha, float)
    if fg.shape != bg.shape or a.shape[:2] != fg.shape[:2]:
        raise ValueError(f"compose: shapes differ: fg {fg.shape}, alpha {a.shape}, bg {bg.shape}")
    if a.ndim == 2:
        a = a[..., None]
    return a * fg + (1 - a) * bg


def hsv_shift(img, dh_deg=0.0, ds=0.0, dv=0.0):
    """Shift hue (degrees, wrapping), saturation and value (clamped to [0, 1])."""
    hsv = rgb_to_hsv(np.clip(np.asarray(img, float), 0, 1))
    hsv[..., 0] = np.mod(hsv[..., 0] + dh_deg / 360.0, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] + ds, 0, 1)
    hsv[..., 2] = np.clip(hsv[..., 2] + dv, 0, 1)
    return hsv_to_rgb(hsv)


# -- scenes from the simulator ------------------------------------------------

DEFAULT_LIGHT = Light(np.array([0.3, 0.2, 0.93]) / np.linalg.norm([0.3, 0.2, 0.93]), 0.8)


def tool_to_camera(chain) -> np.ndarray:
    return np.linalg.inv(chain.tool) @ chain.camera


def camera_from_tool(chain, tool: Pose) -> Pose:
    return Pose.from_matrix(tool.matrix() @ tool_to_camera(chain))


def scene_for_state(chain, state: EnvState, config: SimConfig, lights=None) -> tuple[Pose, Scene]:
    """Camera pose and scene (sphere, table, finger plates) for a simulator state."""
    tool, camera = forward_kinematics(chain, state.joints)
    plates = [BoxSolid(b) for b in gripper_plates(tool, state.gripper_open, config)]
    scene = Scene(
        SphereSolid(np.asarray(state.sphere_pos, float), config.sphere_radius),
        TableSolid(config.table_z),
        occluders=plates,
        lights=[DEFAULT_LIGHT] if lights is None else lights,
    )
    return camera, scene


def mask_observation(chain, state: EnvState, config: SimConfig) -> np.ndarray:
    camera, scene = scene_for_state(chain, state, config)
    return render_mask(camera, scene)
