"""Synthetic road scenes: front-view renders paired with top-view class masks.

Coordinates are metric and ego-centred: x points ahead, y to the left, z up.
The top-view grid puts far cells in the first row and left cells in the first
column, so a mask reads like a map with the direction of travel pointing up.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

SCHEMA_VERSION = 1
LANE_WIDTH = 3.5

CLASS_NAMES_3 = ("background", "road", "vehicle")
CLASS_NAMES_8 = ("background", "road", "vehicle", "sidewalk", "crossing", "bus", "truck", "pedestrian")

# display colours for masks (0-255)
PALETTE = {
    "background": (30, 30, 30),
    "road": (128, 64, 128),
    "vehicle": (0, 0, 142),
    "sidewalk": (244, 35, 232),
    "crossing": (250, 250, 250),
    "bus": (0, 60, 100),
    "truck": (0, 0, 70),
    "pedestrian": (220, 20, 60),
}

# surface colours used by the renderer (0-1)
ALBEDO = {
    "background": (0.33, 0.46, 0.24),
    "road": (0.38, 0.38, 0.40),
    "vehicle": (0.72, 0.16, 0.14),
    "sidewalk": (0.66, 0.62, 0.56),
    "crossing": (0.88, 0.88, 0.86),
    "bus": (0.90, 0.68, 0.10),
    "truck": (0.20, 0.30, 0.66),
    "pedestrian": (0.85, 0.45, 0.70),
}
SKY = np.array([0.62, 0.76, 0.94])

# (length, width, height) in metres
OBJECT_SIZE = {
    "vehicle": (4.4, 1.8, 1.5),
    "bus": (10.0, 2.5, 3.0),
    "truck": (7.5, 2.4, 3.2),
    "pedestrian": (0.6, 0.6, 1.7),
}


class DatasetError(ValueError):
    """A dataset directory is malformed or fails verification."""

    def __init__(self, message: str, sample_id: Optional[str] = None):
        super().__init__(message)
        self.sample_id = sample_id


def class_names(num_classes: int) -> tuple[str, ...]:
    if num_classes == 3:
        return CLASS_NAMES_3
    if num_classes == 8:
        return CLASS_NAMES_8
    raise ValueError(f"synthetic scenes support 3 or 8 classes, got {num_classes}")


def palette_array(num_classes: int) -> np.ndarray:
    return np.array([PALETTE[n] for n in class_names(num_classes)], dtype=np.uint8)


# ---------------------------------------------------------------------------
# scene description

@dataclass(frozen=True)
class Box:
    """Ground-aligned oriented rectangle; heading is the angle of the long side from +x."""
    x: float
    y: float
    length: float
    width: float
    heading: float
    cls: int
    height: float = 1.5

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + [self.x, self.y]

    def contains(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        dx, dy = px - self.x, py - self.y
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (np.abs(u) <= self.length / 2) & (np.abs(v) <= self.width / 2)


def boxes_overlap(a: Box, b: Box) -> bool:
    """Separating-axis test for two oriented rectangles (touching counts as overlap)."""
    pa, pb = a.corners(), b.corners()
    for poly in (pa, pb):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            ra, rb = pa @ axis, pb @ axis
            if ra.max() < rb.min() or rb.max() < ra.min():
                return False
    return True


@dataclass(frozen=True)
class Road:
    centerline: np.ndarray          # [M, 2] polyline (x, y)
    width: float
    sidewalk: float = 0.0           # sidewalk strip width on each side, 0 = none
    crossings: tuple = ()           # x positions of pedestrian crossings
    crossing_depth: float = 3.0

    def lateral_distance(self, px: np.ndarray, py: np.ndarray, chunk: int = 8192) -> np.ndarray:
        """Distance from each point to the centerline polyline."""
        a = self.centerline[:-1]
        d = self.centerline[1:] - a
        dd = (d * d).sum(axis=1)
        flat_x, flat_y = px.ravel(), py.ravel()
        out = np.empty(flat_x.shape)
        for lo in range(0, flat_x.size, chunk):
            qx = flat_x[lo:lo + chunk, None] - a[:, 0]
            qy = flat_y[lo:lo + chunk, None] - a[:, 1]
            t = np.clip((qx * d[:, 0] + qy * d[:, 1]) / dd, 0.0, 1.0)
            ex, ey = qx - t * d[:, 0], qy - t * d[:, 1]
            out[lo:lo + chunk] = np.sqrt((ex * ex + ey * ey).min(axis=1))
        return out.reshape(px.shape)

    def y_at(self, x: float) -> float:
        return float(np.interp(x, self.centerline[:, 0], self.centerline[:, 1]))

    def heading_at(self, x: float) -> float:
        cx, cy = self.centerline[:, 0], self.centerline[:, 1]
        k = int(np.clip(np.searchsorted(cx, x) - 1, 0, len(cx) - 2))
        return math.atan2(cy[k + 1] - cy[k], cx[k + 1] - cx[k])


@dataclass(frozen=True)
class Scene:
    road: Road
    objects: tuple = ()             # Boxes in painter's order
    num_classes: int = 3
    background: int = 0
    texture_seed: int = 0

    def classes_at(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        """Class id of the topmost shape at each ground point.

        Painter's order: background, sidewalk, road, crossing, then objects in list order.
        """
        names = class_names(self.num_classes)
        out = np.full(px.shape, self.background, dtype=np.uint8)
        dist = self.road.lateral_distance(px, py)
        half = self.road.width / 2
        if self.road.sidewalk > 0:
            out[dist <= half + self.road.sidewalk] = names.index("sidewalk")
        on_road = dist <= half
        out[on_road] = names.index("road")
        for xc in self.road.crossings:
            out[on_road & (np.abs(px - xc) <= self.road.crossing_depth / 2)] = names.index("crossing")
        for box in self.objects:
            out[box.contains(px, py)] = box.cls
        return out


@dataclass(frozen=True)
class GridConfig:
    """Metric top-view grid; rows run from x_max down, columns from y_max down."""
    x_min: float = 0.0
    x_max: float = 40.0
    y_min: float = -20.0
    y_max: float = 20.0
    cells: int = 64

    @property
    def res(self) -> float:
        return (self.x_max - self.x_min) / self.cells

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells, int(round((self.y_max - self.y_min) / self.res))

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        rows, cols = self.shape
        xs = self.x_max - (np.arange(rows) + 0.5) * self.res
        ys = self.y_max - (np.arange(cols) + 0.5) * self.res
        return np.meshgrid(xs, ys, indexing="ij")

    @classmethod
    def for_image(cls, image_size: int) -> "GridConfig":
        return cls(cells=image_size // 4)


@dataclass(frozen=True)
class GenConfig:
    num_classes: int = 3
    lanes: tuple = (1, 3)
    vehicle_count: tuple = (2, 6)
    pedestrian_count: tuple = (0, 3)
    curvature: tuple = (-0.008, 0.008)
    slope: tuple = (-0.15, 0.15)
    offset: tuple = (-3.0, 3.0)
    sidewalk: float = 2.0
    attempts_per_object: int = 50

    def __post_init__(self):
        class_names(self.num_classes)
        for name in ("lanes", "vehicle_count", "pedestrian_count", "curvature", "slope", "offset"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"gen_cfg.{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.lanes[0] < 1:
            raise ValueError("gen_cfg.lanes: need at least one lane")


def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2 * math.pi) - math.pi


def _place_objects(rng, road: Road, lanes: int, want: Sequence[str], names, extent, attempts: int,
                   placed: list) -> list:
    x_lo, x_hi, y_lo, y_hi = extent
    for kind in want:
        length, width, height = OBJECT_SIZE[kind]
        for _ in range(attempts):
            x = rng.uniform(x_lo + 1.0, x_hi - 1.0)
            if kind == "pedestrian":
                side = rng.choice([-1.0, 1.0])
                lateral = side * (road.width / 2 + road.sidewalk / 2)
                heading = rng.uniform(-math.pi, math.pi)
            else:
                lane = int(rng.integers(0, lanes))
                lateral = (lane - (lanes - 1) / 2) * LANE_WIDTH + rng.normal(0, 0.2)
                heading = road.heading_at(x) + rng.normal(0, 0.05)
                if rng.random() < 0.5:
                    heading += math.pi
            th = road.heading_at(x)
            box = Box(x - lateral * math.sin(th), road.y_at(x) + lateral * math.cos(th),
                      length, width, _wrap(heading), names.index(kind), height)
            c = box.corners()
            if c[:, 0].min() < x_lo or c[:, 0].max() > x_hi or c[:, 1].min() < y_lo or c[:, 1].max() > y_hi:
                continue
            if any(boxes_overlap(box, other) for other in placed):
                continue
            placed.append(box)
            break
        else:
            warnings.warn(f"object placement budget exhausted; scene keeps {len(placed)} objects "
                          f"instead of the requested count", RuntimeWarning, stacklevel=3)
            return placed
    return placed


def sample_world(seed: int, gen_cfg: GenConfig = GenConfig(), grid: GridConfig = GridConfig(),
                 road_span: Optional[tuple] = None) -> Scene:
    """A random scene whose objects fit inside the grid extent; a pure function of the arguments."""
    rng = np.random.default_rng(seed)
    names = class_names(gen_cfg.num_classes)
    lanes = int(rng.integers(gen_cfg.lanes[0], gen_cfg.lanes[1] + 1))
    c0 = rng.uniform(*gen_cfg.offset)
    c1 = rng.uniform(*gen_cfg.slope)
    c2 = rng.uniform(*gen_cfg.curvature)
    lo, hi = road_span or (grid.x_min - 20.0, grid.x_max + 200.0)
    xs = np.arange(lo, hi + 1.0, 1.0)
    # curvature is applied inside the grid and frozen beyond it so the road stays bounded near the horizon
    xc = np.clip(xs, grid.x_min, grid.x_max)
    ys = c0 + c1 * xs + c2 * xc * (2 * xs - xc)
    extra = gen_cfg.num_classes == 8
    crossings = ()
    if extra and rng.random() < 0.5:
        crossings = (float(rng.uniform(grid.x_min + 5, grid.x_max - 5)),)
    road = Road(np.stack([xs, ys], axis=1), lanes * LANE_WIDTH, gen_cfg.sidewalk if extra else 0.0, crossings)

    n_veh = int(rng.integers(gen_cfg.vehicle_count[0], gen_cfg.vehicle_count[1] + 1))
    if extra:
        kinds = list(rng.choice(["vehicle", "bus", "truck"], size=n_veh, p=[0.7, 0.15, 0.15]))
        kinds += ["pedestrian"] * int(rng.integers(gen_cfg.pedestrian_count[0], gen_cfg.pedestrian_count[1] + 1))
    else:
        kinds = ["vehicle"] * n_veh
    extent = (grid.x_min, grid.x_max, grid.y_min, grid.y_max)
    objects = _place_objects(rng, road, lanes, kinds, names, extent, gen_cfg.attempts_per_object, [])
    return Scene(road, tuple(objects), gen_cfg.num_classes, 0, int(rng.integers(0, 2 ** 31)))


def rasterize_bev(scene: Scene, grid: GridConfig = GridConfig(),
                  pose: tuple = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Class of the topmost shape covering each cell centre; ``pose`` places the grid in the scene frame."""
    gx, gy = grid.centers()
    px, py, yaw = pose
    if yaw:
        c, s = math.cos(yaw), math.sin(yaw)
        gx, gy = c * gx - s * gy, s * gx + c * gy
    return scene.classes_at(gx + px, gy + py)


# ---------------------------------------------------------------------------
# camera

@dataclass(frozen=True)
class Camera:
    """Pinhole camera at ``height`` above the ground, pitched down by ``pitch`` radians.

    Pixel coordinates are continuous with (0, 0) at the top-left corner of the
    image, so pixel (r, c) has its centre at (c + 0.5, r + 0.5).
    """
    image_size: int = 256
    height: float = 1.6
    pitch: float = 0.3
    focal: Optional[float] = None
    cx: Optional[float] = None
    cy: Optional[float] = None

    def __post_init__(self):
        if self.height <= 0:
            raise ValueError("camera height must be positive")
        for name, default in (("focal", self.image_size / 2), ("cx", self.image_size / 2),
                              ("cy", self.image_size / 2)):
            if getattr(self, name) is None:
                object.__setattr__(self, name, float(default))
        if self.focal <= 0:
            raise ValueError("camera focal length must be positive")

    def _axes(self):
        ct, st = math.cos(self.pitch), math.sin(self.pitch)
        forward = np.array([ct, 0.0, -st])
        right = np.array([0.0, -1.0, 0.0])
        down = np.array([-st, 0.0, -ct])
        return forward, right, down

    def project(self, x, y, z=0.0) -> tuple[np.ndarray, np.ndarray]:
        """World points to pixel coordinates (u right, v down). Points behind the camera give NaN."""
        x, y, z = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float), np.asarray(z, float))
        d = np.stack([x, y, z - self.height], axis=-1)
        fwd, right, down = self._axes()
        zc = d @ fwd
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(zc > 0, self.cx + self.focal * (d @ right) / zc, np.nan)
            v = np.where(zc > 0, self.cy + self.focal * (d @ down) / zc, np.nan)
        return u, v

    def rays(self, u, v) -> np.ndarray:
        """Unnormalised ray directions [..., 3] through pixel coordinates."""
        fwd, right, down = self._axes()
        a = (np.asarray(u, float) - self.cx) / self.focal
        b = (np.asarray(v, float) - self.cy) / self.focal
        return fwd + a[..., None] * right + b[..., None] * down

    def back_project(self, u, v) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates to ground-plane points; rays at or above the horizon give inf."""
        r = self.rays(u, v)
        dz = r[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(dz < 0, self.height / -dz, np.inf)
            x = np.where(dz < 0, t * r[..., 0], np.inf)
            y = np.where(dz < 0, t * r[..., 1], np.inf)
        return x, y

    def horizon_v(self) -> float:
        return self.cy - self.focal * math.tan(self.pitch)

    def check_sees_ground(self) -> None:
        if self.horizon_v() >= self.image_size:
            raise ValueError(f"camera pitch {self.pitch} rad puts the horizon below the image: no ground visible")


def _ray_box(origin: np.ndarray, dirs: np.ndarray, box: Box) -> tuple[np.ndarray, np.ndarray]:
    """Slab test; returns entry distance (inf on miss) and the local axis of the entered face."""
    c, s = math.cos(box.heading), math.sin(box.heading)
    ox, oy = origin[0] - box.x, origin[1] - box.y
    o = np.array([ox * c + oy * s, -ox * s + oy * c, origin[2]])
    d = np.stack([dirs[..., 0] * c + dirs[..., 1] * s, -dirs[..., 0] * s + dirs[..., 1] * c, dirs[..., 2]], -1)
    lo = np.array([-box.length / 2, -box.width / 2, 0.0])
    hi = np.array([box.length / 2, box.width / 2, box.height])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    near = np.fmin(t1, t2)
    far = np.fmax(t1, t2)
    # a zero direction component leaves NaN when the origin sits on a slab plane; treat as unbounded
    near = np.where(np.isnan(near), -np.inf, near)
    far = np.where(np.isnan(far), np.inf, far)
    t_in = near.max(axis=-1)
    t_out = far.min(axis=-1)
    hit = (t_in <= t_out) & (t_in > 0)
    return np.where(hit, t_in, np.inf), near.argmax(axis=-1)


def _texture(seed: int, px: np.ndarray, py: np.ndarray, cell: float = 0.5, amp: float = 0.05) -> np.ndarray:
    table = np.random.default_rng(seed).uniform(-amp, amp, (64, 64))
    ix = np.floor(px / cell).astype(np.int64) % 64
    iy = np.floor(py / cell).astype(np.int64) % 64
    return table[ix, iy]


def render_front_view(scene: Scene, camera: Camera = Camera()) -> np.ndarray:
    """Flat-ground ray cast; returns an RGB image [3,S,S] quantised to multiples of 1/255."""
    camera.check_sees_ground()
    n = camera.image_size
    names = class_names(scene.num_classes)
    albedo = np.array([ALBEDO[k] for k in names])
    u, v = np.meshgrid(np.arange(n) + 0.5, np.arange(n) + 0.5)
    dirs = camera.rays(u, v)
    origin = np.array([0.0, 0.0, camera.height])

    gx, gy = camera.back_project(u, v)
    ground = np.isfinite(gx)
    t_ground = np.where(ground, camera.height / np.where(ground, -dirs[..., 2], 1.0), np.inf)

    img = np.broadcast_to(SKY, (n, n, 3)).copy()
    # sky brightens towards the horizon
    img *= (0.85 + 0.15 * np.clip(v / max(camera.horizon_v(), 1.0), 0, 1))[..., None]

    cls = np.zeros((n, n), dtype=np.int64)
    cls[ground] = scene.classes_at(gx[ground], gy[ground])
    shade = 1.0 + _texture(scene.texture_seed, np.where(ground, gx, 0), np.where(ground, gy, 0))
    img[ground] = albedo[cls[ground]] * shade[ground][:, None]

    best = t_ground
    for k, box in enumerate(scene.objects):
        t, face = _ray_box(origin, dirs, box)
        front = t < best
        if not front.any():
            continue
        best = np.where(front, t, best)
        # top faces brightest, ends darker than sides; a per-object tint separates neighbours
        light = np.choose(face, [0.70, 0.85, 1.0])
        tint = 0.9 + 0.2 * ((scene.texture_seed + 7919 * k) % 97) / 96
        img[front] = np.clip(albedo[box.cls] * tint * light[front][:, None], 0, 1)

    return (np.round(np.clip(img, 0, 1) * 255) / 255).transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# samples and datasets

@dataclass
class SceneSample:
    image: np.ndarray       # [3,S,S] float32 in [0,1], multiples of 1/255
    mask: np.ndarray        # [S/4,S/4] uint8 class ids
    pose: tuple             # (x m, y m, yaw rad)
    scene_id: str


def make_sample(scene: Scene, camera: Camera, grid: GridConfig, scene_id: str,
                pose: tuple = (0.0, 0.0, 0.0)) -> SceneSample:
    image = render_front_view(scene, camera).astype(np.float32)
    return SceneSample(image, rasterize_bev(scene, grid).astype(np.uint8), tuple(float(p) for p in pose), scene_id)


def generate_samples(seed: int, count: int, gen_cfg: GenConfig = GenConfig(), image_size: int = 256,
                     camera: Optional[Camera] = None) -> list[SceneSample]:
    """``count`` independent scenes; sample ``i`` draws from its own stream ``(seed, i)``."""
    camera = camera or Camera(image_size)
    grid = GridConfig.for_image(image_size)
    out = []
    for i in range(count):
        scene = sample_world(int(np.random.SeedSequence([seed, i]).generate_state(1)[0]), gen_cfg, grid)
        out.append(make_sample(scene, camera, grid, f"s{seed:04d}_{i:05d}"))
    return out


@dataclass
class Drive:
    world: Scene
    samples: list
    grid: GridConfig


def _shift_scene(scene: Scene, dx: float, dy: float) -> Scene:
    """The scene seen from an ego frame at (dx, dy) with zero yaw."""
    road = Road(scene.road.centerline - [dx, dy], scene.road.width, scene.road.sidewalk,
                tuple(x - dx for x in scene.road.crossings), scene.road.crossing_depth)
    objs = tuple(Box(b.x - dx, b.y - dy, b.length, b.width, b.heading, b.cls, b.height) for b in scene.objects)
    return Scene(road, objs, scene.num_classes, scene.background, scene.texture_seed)


def make_drive(seed: int, frames: int = 20, step_cells: int = 4, gen_cfg: GenConfig = GenConfig(),
               image_size: int = 64, camera: Optional[Camera] = None) -> Drive:
    """A static world driven through along +x; poses are whole-cell translations with zero yaw.

    The masks are the ground truth seen from each pose, so stitching them must
    reproduce the world raster wherever a frame looked.
    """
    camera = camera or Camera(image_size)
    grid = GridConfig.for_image(image_size)
    res = grid.res
    travel = frames * step_cells * res
    world_grid = GridConfig(grid.x_min, grid.x_max + travel, grid.y_min - 10 * res, grid.y_max + 10 * res,
                            grid.cells + frames * step_cells)
    cfg = GenConfig(**{**asdict(gen_cfg), "vehicle_count": tuple(
        int(round(v * (1 + travel / (grid.x_max - grid.x_min)))) for v in gen_cfg.vehicle_count)})
    world = sample_world(seed, cfg, world_grid, road_span=(grid.x_min - 20, world_grid.x_max + 200))
    samples = []
    for k in range(frames):
        px = k * step_cells * res
        # follow the road sideways in whole cells so poses stay on the grid
        py = round(world.road.y_at(px + 10.0) / res) * res
        pose = (px, py, 0.0)
        mask = rasterize_bev(world, grid, pose).astype(np.uint8)
        image = render_front_view(_shift_scene(world, px, py), camera).astype(np.float32)
        samples.append(SceneSample(image, mask, pose, f"d{seed:04d}_{k:03d}"))
    return Drive(world, samples, grid)


def class_counts(masks: Iterable[np.ndarray], num_classes: int) -> np.ndarray:
    total = np.zeros(num_classes, dtype=np.int64)
    for m in masks:
        total += np.bincount(np.asarray(m).ravel(), minlength=num_classes)[:num_classes]
    return total


def _png_bytes(arr: np.ndarray, mode: str) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def _image_to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def export_dataset(samples: Sequence[SceneSample], out_dir: str | Path, num_classes: int,
                   camera: Optional[Camera] = None, grid: Optional[GridConfig] = None,
                   extra: Optional[dict] = None) -> Path:
    """Write images, masks, poses and a checksummed manifest. Returns the manifest path."""
    if not samples:
        raise DatasetError("nothing to export: empty sample list")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    size = samples[0].image.shape[-1]
    camera = camera or Camera(size)
    grid = grid or GridConfig.for_image(size)
    names = class_names(num_classes)
    records = []
    for s in samples:
        if s.mask.max(initial=0) >= num_classes:
            raise DatasetError(f"sample {s.scene_id}: class id {int(s.mask.max())} outside the palette",
                               s.scene_id)
        img_bytes = _png_bytes(_image_to_uint8(s.image), "RGB")
        mask_bytes = _png_bytes(np.asarray(s.mask, dtype=np.uint8), "L")
        (out / "images" / f"{s.scene_id}.png").write_bytes(img_bytes)
        (out / "masks" / f"{s.scene_id}.png").write_bytes(mask_bytes)
        records.append({
            "id": s.scene_id,
            "image": f"images/{s.scene_id}.png",
            "mask": f"masks/{s.scene_id}.png",
            "image_sha256": hashlib.sha256(img_bytes).hexdigest(),
            "mask_sha256": hashlib.sha256(mask_bytes).hexdigest(),
            "pose": list(s.pose),
            "class_counts": class_counts([s.mask], num_classes).tolist(),
        })
    counts = class_counts((s.mask for s in samples), num_classes)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "classes": [{"id": i, "name": n, "color": list(PALETTE[n])} for i, n in enumerate(names)],
        "camera": asdict(camera),
        "grid": asdict(grid),
        "image_size": size,
        "num_samples": len(samples),
        "class_frequencies": (counts / counts.sum()).tolist(),
        "samples": records,
    }
    if extra:
        manifest["extra"] = extra
    with open(out / "poses.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "x", "y", "yaw"])
        for s in samples:
            w.writerow([s.scene_id, *(repr(float(p)) for p in s.pose)])
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


@dataclass
class Dataset:
    """Stacked samples ready for the training loop."""
    images: np.ndarray          # [N,3,S,S] float32
    masks: np.ndarray           # [N,s,s] int64
    ids: list
    poses: np.ndarray           # [N,3]
    num_classes: int
    class_frequencies: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        if index.size == 0:
            index = index.astype(np.intp)
        m = self.masks[index]
        counts = class_counts(m, self.num_classes)
        return Dataset(self.images[index], m, [self.ids[i] for i in index], self.poses[index],
                       self.num_classes, counts / max(counts.sum(), 1), self.meta)

    @classmethod
    def from_samples(cls, samples: Sequence[SceneSample], num_classes: int, meta: Optional[dict] = None) -> "Dataset":
        if not samples:
            raise DatasetError("empty dataset")
        masks = np.stack([s.mask for s in samples]).astype(np.int64)
        counts = class_counts(masks, num_classes)
        return cls(np.stack([s.image for s in samples]).astype(np.float32), masks,
                   [s.scene_id for s in samples], np.array([s.pose for s in samples], dtype=np.float64),
                   num_classes, counts / counts.sum(), meta or {})


def _load_manifest(root: Path) -> dict:
    path = root / "manifest.json"
    if not path.exists():
        raise DatasetError(f"{root}: no manifest.json (is this a dataset directory?)")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: malformed JSON ({e})") from e
    if not isinstance(manifest, dict):
        raise DatasetError(f"{path}: top level must be an object")
    missing = {"schema_version", "classes", "samples"} - set(manifest)
    if missing:
        raise DatasetError(f"{path}: missing field(s) {sorted(missing)}")
    if manifest["schema_version"] != SCHEMA_VERSION:
        raise DatasetError(f"{path}: schema version {manifest['schema_version']} unsupported "
                           f"(expected {SCHEMA_VERSION})")
    return manifest


def import_dataset(root: str | Path) -> list[SceneSample]:
    """Read and verify a dataset directory; checksum or palette failures name the sample."""
    root = Path(root)
    manifest = _load_manifest(root)
    k = len(manifest["classes"])
    samples = []
    for rec in manifest["samples"]:
        try:
            sid = rec["id"]
            files = {"image": (rec["image"], rec["image_sha256"]), "mask": (rec["mask"], rec["mask_sha256"])}
            pose = tuple(float(p) for p in rec["pose"])
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"manifest record {rec!r} is malformed ({e})") from e
        arrays = {}
        for kind, (rel, digest) in files.items():
            path = root / rel
            if not path.exists():
                raise DatasetError(f"sample {sid}: missing {kind} file {rel}", sid)
            data = path.read_bytes()
            if hashlib.sha256(data).hexdigest() != digest:
                raise DatasetError(f"sample {sid}: {kind} checksum mismatch ({rel})", sid)
            try:
                arrays[kind] = np.asarray(Image.open(io.BytesIO(data)))
            except OSError as e:
                raise DatasetError(f"sample {sid}: cannot decode {kind} ({e})", sid) from e
        mask = arrays["mask"]
        if mask.ndim != 2:
            raise DatasetError(f"sample {sid}: mask must be single-channel", sid)
        if mask.max(initial=0) >= k:
            raise DatasetError(f"sample {sid}: mask uses class {int(mask.max())} but the palette has {k}", sid)
        image = (arrays["image"].astype(np.float32) / 255.0).transpose(2, 0, 1)
        samples.append(SceneSample(image, mask.astype(np.uint8), pose, sid))
    if len(samples) != manifest.get("num_samples", len(samples)):
        raise DatasetError(f"{root}: manifest declares {manifest['num_samples']} samples, lists {len(samples)}")
    return samples


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    manifest = _load_manifest(root)
    samples = import_dataset(root)
    if not samples:
        raise DatasetError(f"{root}: dataset has no samples")
    meta = {k: manifest.get(k) for k in ("camera", "grid", "image_size", "extra")}
    meta["root"] = str(root)
    meta["class_names"] = [c["name"] for c in manifest["classes"]]
    return Dataset.from_samples(samples, len(manifest["classes"]), meta)


def read_poses(root: str | Path) -> dict[str, tuple]:
    with open(Path(root) / "poses.csv", newline="") as f:
        return {row["id"]: (float(row["x"]), float(row["y"]), float(row["yaw"])) for row in csv.DictReader(f)}
