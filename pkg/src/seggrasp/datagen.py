"""Synthetic training images for the vision net.

Kinds:
  composed   ray-traced sphere and finger plates alpha-blended over a background, HSV jitter
  flat       simulator-style frame: flat shading, plain table, no background
  flat-bg    flat-shaded foreground over backgrounds, HSV jitter
  dr         domain randomisation: random primitives, colours, textures, lights and camera
  held-out   fully ray-traced scene on a textured table with yellow/orange clutter, a stand-in
             for real camera frames
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb

from .kinematics import DOWN, Pose, axis_angle, reference_chain
from .pnm import read_pnm, write_pgm, write_ppm
from .render import (RGB_INTRINSICS, SPHERE_ID, YELLOW, BoxSolid, CylinderSolid, Light, Scene,
                     SphereSolid, TableSolid, camera_from_tool, compose, hsv_shift, render_mask,
                     render_rgb)
from .simenv import Box, SimConfig, gripper_plates

KINDS = ("composed", "flat", "flat-bg", "dr", "held-out")
BACKGROUND_KINDS = ("gradient", "noise", "shapes", "photo-dir")
_KIND_STREAM = {"composed": 0xC01, "flat": 0xF1A, "flat-bg": 0xF1B, "dr": 0xD0, "held-out": 0x4E1}
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm", ".gif", ".tif", ".tiff")
SIZE = RGB_INTRINSICS.width


# -- backgrounds ----------------------------------------------------------------

def _grid(size=SIZE):
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c)  # x (columns), y (rows)


def _gradient(rng, size=SIZE):
    c0, c1 = rng.random(3), rng.random(3)
    theta = rng.uniform(0, 2 * np.pi)
    x, y = _grid(size)
    t = x * np.cos(theta) + y * np.sin(theta)
    t = (t - t.min()) / (t.max() - t.min())
    return c0 + t[..., None] * (c1 - c0)


def _value_noise(rng, size=SIZE):
    k = int(rng.integers(3, 17))
    lattice = rng.random((k + 1, k + 1, 3))
    pos = np.linspace(0, k, size)
    i0 = np.minimum(pos.astype(int), k - 1)
    f = pos - i0
    # bilinear upsampling of the lattice
    rows = lattice[i0] * (1 - f)[:, None, None] + lattice[i0 + 1] * f[:, None, None]
    return rows[:, i0] * (1 - f)[None, :, None] + rows[:, i0 + 1] * f[None, :, None]


def _warm_color(rng):
    """Yellow to orange: hue 25-60 degrees, saturated and bright."""
    return hsv_to_rgb([rng.uniform(25, 60) / 360, rng.uniform(0.7, 1), rng.uniform(0.75, 1)])


def _shapes(rng, size=SIZE, warm=0):
    img = _gradient(rng, size) if rng.random() < 0.5 else np.broadcast_to(rng.random(3), (size, size, 3)).copy()
    x, y = _grid(size)
    n = int(rng.integers(5, 21))
    for i in range(n + warm):
        color = _warm_color(rng) if i >= n else rng.random(3)
        cx, cy = rng.random(2)
        if i >= n or rng.random() < 0.5:  # forced clutter is always a disc or blob
            rx, ry = rng.uniform(0.01, 0.12, 2) if i < n else np.repeat(rng.uniform(0.01, 0.05), 2)
            sel = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1
        else:
            hw, hh = rng.uniform(0.02, 0.25, 2)
            sel = (np.abs(x - cx) <= hw) & (np.abs(y - cy) <= hh)
        img[sel] = color
    return img


def _photo_files(directory):
    d = Path(directory)
    if not d.is_dir():
        raise ValueError(f"background directory {directory} does not exist")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise ValueError(f"background directory {directory} contains no images")
    return files


def load_photo(path, size=SIZE):
    """Centre-crop to a square and resize to ``size``; values in [0, 1]."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            w, h = im.size
            s = min(w, h)
            left, top = (w - s) // 2, (h - s) // 2
            im = im.crop((left, top, left + s, top + s))
            if s != size:
                im = im.resize((size, size), Image.BILINEAR)
            return np.asarray(im, np.float64) / 255.0
    except OSError as exc:
        raise ValueError(f"cannot read background image {path}: {exc}") from exc


def gen_background(kind, seed=0, photo_dir=None, size=SIZE, warm=0):
    """Deterministic per seed.  ``warm`` adds that many yellow/orange discs (shapes only)."""
    rng = np.random.default_rng([seed, 0xB6])
    if kind == "gradient":
        return _gradient(rng, size)
    if kind == "noise":
        return _value_noise(rng, size)
    if kind == "shapes":
        return _shapes(rng, size, warm)
    if kind == "photo-dir":
        files = _photo_files(photo_dir)
        return load_photo(files[int(rng.integers(len(files)))], size)
    raise ValueError(f"unknown background kind {kind!r}")


def background_pool(n, seed=0, kind="mixed", photo_dir=None):
    """uint8 pool of ``n`` backgrounds; ``mixed`` cycles gradient, noise and shapes."""
    if kind == "photo-dir":
        _photo_files(photo_dir)
    kinds = ("gradient", "noise", "shapes") if kind == "mixed" else (kind,)
    pool = np.empty((n, SIZE, SIZE, 3), np.uint8)
    for i in range(n):
        img = gen_background(kinds[i % len(kinds)], seed * 1_000_003 + i, photo_dir)
        pool[i] = np.clip(np.rint(img * 255), 0, 255)
    return pool


# -- view and light sampling --------------------------------------------------------

def sample_light(rng, scale=0.8):
    """Direction uniform over the upper hemisphere above 10 degrees, intensity x U(0.5, 1.5)."""
    az = rng.uniform(0, 2 * np.pi)
    z = rng.uniform(np.sin(np.radians(10)), 1)
    r = np.sqrt(1 - z * z)
    return Light(np.array([r * np.cos(az), r * np.sin(az), z]), scale * rng.uniform(0.5, 1.5))


def _small_rotation(rng, max_deg):
    axis = rng.normal(size=3)
    return axis_angle(axis / np.linalg.norm(axis), np.radians(rng.uniform(0, max_deg)))


def sample_view(rng, config: SimConfig, jitter=0.01, tilt_deg=6.0):
    """Sphere position and a gripper pose on a plausible approach: start -> hover, or hover -> sphere."""
    (x0, x1), (y0, y1) = config.workspace
    sphere = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1), config.table_z + config.sphere_radius])
    hover = sphere + [0, 0, 0.06]
    t = rng.random()
    if rng.random() < 0.5:
        point = np.asarray(config.start_point) + t * (hover - np.asarray(config.start_point))
    else:
        point = hover + t * (sphere + [0, 0, 0.005] - hover)
    point = point + rng.normal(0, jitter, 3)
    point[2] = max(point[2], config.table_z + config.finger_depth + 0.002)
    yaw = axis_angle([0, 0, 1], rng.uniform(-np.pi, np.pi) if tilt_deg > 10 else 0.0)
    tool = Pose(yaw @ _small_rotation(rng, tilt_deg) @ DOWN, point)
    return sphere, tool


def _plates(tool, config):
    return [BoxSolid(b) for b in gripper_plates(tool, True, config)]


def _random_color(rng):
    return hsv_to_rgb([rng.random(), rng.uniform(0.2, 1), rng.uniform(0.3, 1)])


def _random_primitive(rng, near, config, color=None, min_gap=0.03, spread=0.15):
    """A box, sphere or cylinder resting on the table near ``near`` but clear of it."""
    while True:
        off = rng.uniform(-spread, spread, 2)
        if np.hypot(*off) >= min_gap:
            break
    x, y = near[0] + off[0], near[1] + off[1]
    color = _random_color(rng) if color is None else color
    texture = rng.choice([None, "checker", "stripes", "noise"]) if rng.random() < 0.4 else None
    size = rng.uniform(0.005, 0.03)
    shape = rng.integers(3)
    z = config.table_z
    if shape == 0:
        half = np.array([size, rng.uniform(0.005, 0.03), rng.uniform(0.003, 0.03)])
        box = Box(np.array([x, y, z + half[2]]), axis_angle([0, 0, 1], rng.uniform(0, np.pi)), half)
        return BoxSolid(box, tuple(color), texture)
    if shape == 1:
        return SphereSolid(np.array([x, y, z + size]), size, tuple(color), texture)
    return CylinderSolid(np.array([x, y]), z, z + rng.uniform(0.002, 0.04), size, tuple(color), texture)


# -- samples --------------------------------------------------------------------

def sample_seed(seed, kind, index):
    return int(np.random.SeedSequence([seed, _KIND_STREAM[kind], index]).generate_state(1)[0])


def _jitter(rng, img):
    return hsv_shift(img, rng.uniform(-10, 10), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1))


def render_sample(kind, sample_seed_value, chain, config: SimConfig, pool=None, return_scene=False):
    """(rgb float [0,1] 400x400x3, mask uint8 100x100) for one seed.

    With ``return_scene`` the camera pose and scene are appended to the tuple.
    """
    rng = np.random.default_rng(sample_seed_value)
    if kind == "dr":
        sphere_pos, tool = sample_view(rng, config, jitter=0.03, tilt_deg=15.0)
    else:
        sphere_pos, tool = sample_view(rng, config)
    camera = camera_from_tool(chain, tool)
    lights = [sample_light(rng) for _ in range(1 + int(rng.integers(2)))]
    sphere = SphereSolid(sphere_pos, config.sphere_radius, YELLOW)
    plates = _plates(tool, config)
    table = TableSolid(config.table_z)
    if kind in ("composed", "flat-bg"):
        scene = Scene(sphere, table, plates, lights)
        fg, ids = render_rgb(camera, scene, flat=kind == "flat-bg", only={SPHERE_ID, 3, 4})
        alpha = np.isin(ids, (SPHERE_ID, 3, 4)).astype(float)
        bg = pool[int(rng.integers(len(pool)))].astype(float) / 255
        img = _jitter(rng, compose(fg, alpha, bg))
    elif kind == "flat":
        scene = Scene(sphere, table, plates, [Light(np.array([0.0, 0.0, 1.0]), 0.6)])
        img, _ = render_rgb(camera, scene, flat=True)
    elif kind == "dr":
        sphere = SphereSolid(sphere_pos, config.sphere_radius, tuple(_random_color(rng)),
                             rng.choice([None, "checker", "stripes"]) if rng.random() < 0.3 else None)
        table = TableSolid(config.table_z, tuple(_random_color(rng)),
                           rng.choice([None, "checker", "stripes", "noise"]), rng.uniform(0.01, 0.08))
        clutter = [_random_primitive(rng, sphere_pos, config) for _ in range(int(rng.integers(7)))]
        scene = Scene(sphere, table, plates, lights, clutter, ambient=rng.uniform(0.1, 0.4),
                      sky=tuple(rng.random(3)))
        img, _ = render_rgb(camera, scene)
    elif kind == "held-out":
        wood = hsv_to_rgb([rng.uniform(0.05, 0.12), rng.uniform(0.3, 0.6), rng.uniform(0.35, 0.7)])
        table = TableSolid(config.table_z, tuple(wood), rng.choice(["stripes", "noise", "checker"]),
                           rng.uniform(0.01, 0.05))
        n_warm, n_other = int(rng.integers(2, 5)), int(rng.integers(0, 4))
        clutter = [_random_primitive(rng, sphere_pos, config, _warm_color(rng), spread=0.1)
                   for _ in range(n_warm)]
        clutter += [_random_primitive(rng, sphere_pos, config, spread=0.1) for _ in range(n_other)]
        scene = Scene(sphere, table, plates, lights, clutter)
        img, _ = render_rgb(camera, scene)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    mask = render_mask(camera, scene)
    if return_scene:
        return np.clip(img, 0, 1), mask, camera, scene
    return np.clip(img, 0, 1), mask


@dataclass
class VisionDataset:
    images: np.ndarray  # (N, 400, 400, 3) uint8
    masks: np.ndarray  # (N, 100, 100) uint8 in {0, 1}
    seeds: list
    kind: str = "composed"

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        return VisionDataset(self.images[idx], self.masks[idx], [self.seeds[i] for i in idx], self.kind)


def generate_dataset(kind, n, seed=0, chain=None, config=None, n_backgrounds=100, background="mixed",
                     photo_dir=None) -> VisionDataset:
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    chain = chain or reference_chain()
    config = config or SimConfig()
    pool = None
    if kind in ("composed", "flat-bg"):
        pool = background_pool(n_backgrounds, seed, background, photo_dir)
    images = np.empty((n, SIZE, SIZE, 3), np.uint8)
    masks = np.empty((n, 100, 100), np.uint8)
    seeds = []
    for i in range(n):
        s = sample_seed(seed, kind, i)
        img, mask = render_sample(kind, s, chain, config, pool)
        images[i] = np.clip(np.rint(img * 255), 0, 255)
        masks[i] = mask
        seeds.append(s)
    return VisionDataset(images, masks, seeds, kind)


def gen_composed_dataset(n, seed=0, **kw):
    return generate_dataset("composed", n, seed, **kw)


def gen_domain_randomized_dataset(n, seed=0, **kw):
    return generate_dataset("dr", n, seed, **kw)


def gen_held_out(n, seed=0, **kw):
    """Distractor-laden evaluation frames; seed stream disjoint from every training kind."""
    return generate_dataset("held-out", n, seed, **kw)


MANIFEST = "manifest.txt"


def save_dataset_dir(directory, data: VisionDataset):
    """PPM images, PGM masks (0/255) and a manifest line "index ppm pgm seed" per sample."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, mask, s) in enumerate(zip(data.images, data.masks, data.seeds)):
        ppm, pgm = f"img_{i:05d}.ppm", f"mask_{i:05d}.pgm"
        write_ppm(d / ppm, img)
        write_pgm(d / pgm, (mask * 255).astype(np.uint8))
        lines.append(f"{i} {ppm} {pgm} {s}\n")
    with open(d / MANIFEST, "w") as f:
        f.write(f"# kind {data.kind}\n")
        f.writelines(lines)
    return d / MANIFEST


def load_dataset_dir(directory) -> VisionDataset:
    d = Path(directory)
    path = d / MANIFEST if d.is_dir() else d
    root = path.parent
    kind = "composed"
    images, masks, seeds = [], [], []
    with open(path) as f:
        for line in f:
            if line.startswith("# kind"):
                kind = line.split()[2]
                continue
            if not line.strip() or line.startswith("#"):
                continue
            _, ppm, pgm, s = line.split()
            images.append(read_pnm(os.path.join(root, ppm)))
            masks.append((read_pnm(os.path.join(root, pgm)) > 127).astype(np.uint8))
            seeds.append(int(s))
    if not images:
        raise ValueError(f"{path}: empty manifest")
    return VisionDataset(np.stack(images), np.stack(masks), seeds, kind)
