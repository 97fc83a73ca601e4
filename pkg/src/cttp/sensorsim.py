"""Synthetic paired tactile data.

A tool cross-section (a tree of 2-d signed distance primitives) is pressed into
two simulated sensors at the same grasp pose:

* ``gel``: 3-channel photometric image of a lightly blurred indentation,
  lit from three directions 120 degrees apart;
* ``membrane``: 1-channel depth map of a heavily blurred indentation.

Lengths are millimetres; frames are 32x32 px at 1 mm/px with the origin at the
grid centre.  Columns run along +y, rows along +z.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff

FRAME_SIZE = 32
PIXEL_PITCH = 1.0
FALLOFF_WIDTH = 1.5

MEMBRANE_SIGMA = 2.5
GEL_SIGMA = 0.8
NOISE_STD = 0.01
GEL_BASE = 0.35
GEL_GAIN = 1.5
LIGHT_ELEVATION = 0.4
LIGHT_ANGLES = (0.0, 120.0, 240.0)

DEFAULT_RANGES = {"y": (-8.0, 8.0), "z": (-8.0, 8.0), "theta": (-30.0, 30.0), "depth": (0.5, 2.0)}

SENSORS = ("gel", "membrane")
CHANNELS = {"gel": 3, "membrane": 1}


# ----------------------------------------------------------------- SDF primitives
# Each takes point arrays px, py (same shape) and returns signed distances.

def sd_circle(px, py, r):
    return np.hypot(px, py) - r


def sd_box(px, py, hx, hy):
    dx = np.abs(px) - hx
    dy = np.abs(py) - hy
    outside = np.hypot(np.maximum(dx, 0.0), np.maximum(dy, 0.0))
    return outside + np.minimum(np.maximum(dx, dy), 0.0)


def sd_ellipse(px, py, a, b, iters=80):
    """Exact ellipse distance.

    The closest boundary point is ``(a^2 x / (t + a^2), b^2 y / (t + b^2))`` where
    ``t`` is the root of a monotone function, found by bisection.
    """
    x = np.abs(np.asarray(px, dtype=np.float64))
    y = np.abs(np.asarray(py, dtype=np.float64))
    if a < b:
        return sd_ellipse(py, px, b, a, iters)
    a2, b2 = a * a, b * b
    lo = np.full(np.broadcast(x, y).shape, -b2)
    hi = -b2 + np.sqrt(a2 * x * x + b2 * y * y) + 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        for _ in range(iters):
            t = 0.5 * (lo + hi)
            f = (a * x / (t + a2)) ** 2 + (b * y / (t + b2)) ** 2 - 1.0
            lo, hi = np.where(f > 0, t, lo), np.where(f > 0, hi, t)
    t = 0.5 * (lo + hi)
    cx, cy = a2 * x / (t + a2), b2 * y / np.maximum(t + b2, 1e-300)
    # on the major axis inside the evolute the generic root degenerates
    on_axis = y == 0
    if np.any(on_axis):
        knee = (a2 - b2) / a
        xa = np.minimum(a2 * x / max(a2 - b2, 1e-300), a)
        cx = np.where(on_axis, np.where(x < knee, xa, a), cx)
        cy = np.where(on_axis, np.where(x < knee, b * np.sqrt(np.clip(1 - (xa / a) ** 2, 0, 1)), 0.0), cy)
    dist = np.hypot(x - cx, y - cy)
    inside = (x / a) ** 2 + (y / b) ** 2 < 1.0
    return np.where(inside, -dist, dist)


def sd_triangle(px, py, r):
    """Equilateral triangle, half side ``r``, centroid at the origin, apex at +y."""
    k = math.sqrt(3.0)
    x = np.abs(px) - r
    y = py + r / k
    flip = x + k * y > 0.0
    x, y = np.where(flip, (x - k * y) / 2, x), np.where(flip, (-k * x - y) / 2, y)
    x = x - np.clip(x, -2.0 * r, 0.0)
    return -np.hypot(x, y) * np.sign(y)


def sd_hexagon(px, py, r):
    """Regular hexagon with apothem ``r``, flat edges facing +-x."""
    kx, ky, kz = -0.866025404, 0.5, 0.577350269
    x, y = np.abs(py), np.abs(px)
    d = 2.0 * np.minimum(kx * x + ky * y, 0.0)
    x, y = x - d * kx, y - d * ky
    x = x - np.clip(x, -kz * r, kz * r)
    y = y - r
    return np.hypot(x, y) * np.sign(y)


def sd_segment(px, py, ax, ay, bx, by, r):
    pax, pay = px - ax, py - ay
    bax, bay = bx - ax, by - ay
    h = np.clip((pax * bax + pay * bay) / (bax * bax + bay * bay), 0.0, 1.0)
    return np.hypot(pax - bax * h, pay - bay * h) - r


def sd_capsule(px, py, half_length, r, angle=0.0):
    c, s = math.cos(math.radians(angle)), math.sin(math.radians(angle))
    return sd_segment(px, py, -half_length * c, -half_length * s, half_length * c, half_length * s, r)


def sd_stadium(px, py, half_length, r):
    return sd_segment(px, py, -half_length, 0.0, half_length, 0.0, r)


def sd_annulus(px, py, r, width):
    return np.abs(np.hypot(px, py) - r) - width


def sd_cross(px, py, arm, half_width):
    """Plus sign with arms reaching ``arm`` from the centre."""
    x, y = np.abs(px), np.abs(py)
    x, y = np.maximum(x, y), np.minimum(x, y)
    qx, qy = x - arm, y - half_width
    k = np.maximum(qx, qy)
    wx = np.where(k > 0, qx, half_width - x)
    wy = np.where(k > 0, qy, -k)
    return np.sign(k) * np.hypot(np.maximum(wx, 0.0), np.maximum(wy, 0.0))


def sd_star5(px, py, r, rf):
    k1x, k1y = 0.809016994375, -0.587785252292
    k2x, k2y = -k1x, k1y
    x, y = np.abs(px), py
    d = 2.0 * np.maximum(k1x * x + k1y * y, 0.0)
    x, y = x - d * k1x, y - d * k1y
    d = 2.0 * np.maximum(k2x * x + k2y * y, 0.0)
    x, y = x - d * k2x, y - d * k2y
    x = np.abs(x)
    y = y - r
    bax, bay = rf * -k1y, rf * k1x - 1.0
    h = np.clip((x * bax + y * bay) / (bax * bax + bay * bay), 0.0, r)
    return np.hypot(x - bax * h, y - bay * h) * np.sign(y * bax - x * bay)


PRIMITIVES = {
    "circle": (sd_circle, ("r",)),
    "box": (sd_box, ("hx", "hy")),
    "ellipse": (sd_ellipse, ("a", "b")),
    "triangle": (sd_triangle, ("r",)),
    "hexagon": (sd_hexagon, ("r",)),
    "capsule": (sd_capsule, ("half_length", "r", "angle")),
    "annulus": (sd_annulus, ("r", "width")),
    "cross": (sd_cross, ("arm", "half_width")),
    "stadium": (sd_stadium, ("half_length", "r")),
    "star5": (sd_star5, ("r", "rf")),
}


def eval_sdf(spec: dict, px, py):
    """Evaluate a composition tree at points ``(px, py)``.

    Leaves look like ``{"prim": "box", "hx": 4, "hy": 2, "at": [x, y]}`` (``at``
    optional); inner nodes are ``{"op": "union"|"intersect"|"subtract",
    "a": ..., "b": ...}``.
    """
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    if "op" in spec:
        a = eval_sdf(spec["a"], px, py)
        b = eval_sdf(spec["b"], px, py)
        op = spec["op"]
        if op == "union":
            return np.minimum(a, b)
        if op == "intersect":
            return np.maximum(a, b)
        if op == "subtract":
            return np.maximum(a, -b)
        raise ValueError(f"unknown sdf combinator {op!r}")
    fn, names = PRIMITIVES[spec["prim"]]
    ox, oy = spec.get("at", (0.0, 0.0))
    args = [spec[n] for n in names if n in spec]
    return fn(px - ox, py - oy, *args)


def _prim(name, at=None, **params):
    d = {"prim": name, **params}
    if at is not None:
        d["at"] = list(at)
    return d


def _union(a, b):
    return {"op": "union", "a": a, "b": b}


def _subtract(a, b):
    return {"op": "subtract", "a": a, "b": b}


@dataclass(frozen=True)
class ToolShape:
    id: int
    name: str
    sdf_spec: dict = field(hash=False, compare=False)

    def sdf(self, px, py):
        return eval_sdf(self.sdf_spec, px, py)


# Rotationally symmetric tools carry a notch so that orientation is observable.
TOOLS = (
    ToolShape(0, "circle", _subtract(_prim("circle", r=6.0), _prim("box", at=(6.0, 0.0), hx=2.0, hy=1.2))),
    ToolShape(1, "box", _prim("box", hx=7.5, hy=2.5)),
    ToolShape(2, "ellipse", _prim("ellipse", a=5.0, b=3.2)),
    ToolShape(3, "triangle", _prim("triangle", r=6.5)),
    ToolShape(4, "hexagon", _subtract(_prim("hexagon", r=6.0), _prim("box", at=(0.0, 6.0), hx=1.2, hy=2.0))),
    ToolShape(5, "capsule", _prim("capsule", half_length=6.0, r=1.5, angle=90.0)),
    ToolShape(6, "annulus", _subtract(_prim("annulus", r=5.5, width=1.5), _prim("box", at=(5.5, 0.0), hx=2.0, hy=1.2))),
    ToolShape(7, "plus", _prim("cross", arm=7.0, half_width=2.0)),
    ToolShape(8, "stadium", _prim("stadium", half_length=2.0, r=4.5)),
    ToolShape(9, "l-shape", _union(_prim("box", at=(-3.0, 0.0), hx=1.5, hy=6.0),
                                  _prim("box", at=(1.0, 4.5), hx=5.5, hy=1.5))),
    ToolShape(10, "t-shape", _union(_prim("box", at=(0.0, -4.5), hx=6.0, hy=1.5),
                                   _prim("box", at=(0.0, 1.5), hx=1.5, hy=4.5))),
    ToolShape(11, "star", _prim("star5", r=7.0, rf=0.5)),
)
TRAIN_TOOL_IDS = tuple(range(9))
HELDOUT_TOOL_IDS = (9, 10, 11)


def tool_by_id(tool_id: int) -> ToolShape:
    return TOOLS[tool_id]


# ----------------------------------------------------------------- grasps

@dataclass(frozen=True)
class GraspSample:
    tool_id: int
    grasp_id: int
    y: float
    z: float
    theta: float
    depth: float

    @property
    def pose(self):
        return (self.y, self.z, self.theta)


@dataclass
class TactileFrame:
    sensor: str
    data: np.ndarray  # (channels, H, W) float32

    def __post_init__(self):
        if self.sensor not in CHANNELS:
            raise ValueError(f"unknown sensor {self.sensor!r}")
        if self.data.ndim != 3 or self.data.shape[0] != CHANNELS[self.sensor]:
            raise ValueError(f"{self.sensor} frame must have {CHANNELS[self.sensor]} channels, got {self.data.shape}")


@dataclass
class PairedRecord:
    grasp: GraspSample
    gel: TactileFrame
    membrane: TactileFrame


def sample_grasps(tool_ids, n_per_tool: int, ranges=None, seed: int = 0,
                  start_id: int = 0, stream: str = "data") -> list[GraspSample]:
    """I.i.d. uniform grasps, ``n_per_tool`` for each tool, ids from ``start_id``."""
    tool_ids = list(tool_ids)
    if not tool_ids:
        raise ValueError("sample_grasps: empty tool list")
    if n_per_tool < 1:
        raise ValueError("sample_grasps: n_per_tool must be >= 1")
    ranges = {**DEFAULT_RANGES, **(ranges or {})}
    rng = autodiff.rng_stream(seed, stream)
    out = []
    gid = start_id
    for tool in tool_ids:
        draws = {k: rng.uniform(lo, hi, size=n_per_tool) if hi > lo else np.full(n_per_tool, lo)
                 for k, (lo, hi) in ((k, ranges[k]) for k in ("y", "z", "theta", "depth"))}
        for i in range(n_per_tool):
            out.append(GraspSample(int(tool), gid, float(draws["y"][i]), float(draws["z"][i]),
                                   float(draws["theta"][i]), float(draws["depth"][i])))
            gid += 1
    return out


# ----------------------------------------------------------------- rendering

def pixel_centers(size: int = FRAME_SIZE, pitch: float = PIXEL_PITCH):
    coords = (np.arange(size) - (size - 1) / 2.0) * pitch
    py, px = np.meshgrid(coords, coords, indexing="ij")  # rows -> z, cols -> y
    return px, py


def render_heightfield(grasp: GraspSample, shape: ToolShape, size: int = FRAME_SIZE,
                       falloff: float = FALLOFF_WIDTH) -> np.ndarray:
    """Indentation depth per pixel: full depth inside, linear ramp to 0 over ``falloff`` outside."""
    if grasp.depth == 0:
        return np.zeros((size, size))
    px, py = pixel_centers(size)
    dx, dy = px - grasp.y, py - grasp.z
    c, s = math.cos(math.radians(grasp.theta)), math.sin(math.radians(grasp.theta))
    # rotate by -theta into the tool frame
    qx = c * dx + s * dy
    qy = -s * dx + c * dy
    d = shape.sdf(qx, qy)
    return grasp.depth * np.clip(1.0 - d / falloff, 0.0, 1.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur with replicate boundary."""
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    img = np.asarray(img, dtype=np.float64)
    p = np.pad(img, ((0, 0), (r, r)), mode="edge")
    tmp = sum(k[i] * p[:, i:i + img.shape[1]] for i in range(len(k)))
    p = np.pad(tmp, ((r, r), (0, 0)), mode="edge")
    return sum(k[i] * p[i:i + img.shape[0], :] for i in range(len(k)))


def _noise(shape, noise_seed, noise_std):
    if noise_seed is None or noise_std == 0:
        return np.zeros(shape)
    return autodiff.rng_stream(int(noise_seed), "noise").normal(0.0, noise_std, size=shape)


def render_membrane(h: np.ndarray, noise_seed=None, noise_std: float = NOISE_STD,
                    sigma: float = MEMBRANE_SIGMA) -> TactileFrame:
    m = gaussian_blur(h, sigma) + _noise(h.shape, noise_seed, noise_std)
    m = np.maximum(m, 0.0)  # a depth reading cannot go below the undeformed membrane
    return TactileFrame("membrane", m[None].astype(np.float32))


def surface_normals(g: np.ndarray, pitch: float = PIXEL_PITCH):
    gx = np.gradient(g, pitch, axis=1)
    gy = np.gradient(g, pitch, axis=0)
    norm = np.sqrt(gx * gx + gy * gy + 1.0)
    return -gx / norm, -gy / norm, 1.0 / norm


def light_directions(angles=LIGHT_ANGLES, elevation: float = LIGHT_ELEVATION) -> np.ndarray:
    a = np.radians(np.asarray(angles, dtype=np.float64))
    L = np.stack([np.cos(a), np.sin(a), np.full_like(a, elevation)], axis=1)
    return L / np.linalg.norm(L, axis=1, keepdims=True)


def render_gel(h: np.ndarray, noise_seed=None, noise_std: float = NOISE_STD,
               sigma: float = GEL_SIGMA, light_angles=LIGHT_ANGLES) -> TactileFrame:
    g = gaussian_blur(h, sigma)
    nx, ny, nz = surface_normals(g)
    L = light_directions(light_angles)
    chans = []
    for c, (lx, ly, lz) in enumerate(L):
        shade = nx * lx + ny * ly + nz * lz - lz  # n0 . L = lz
        v = np.clip(GEL_BASE + GEL_GAIN * shade, 0.0, 1.0)
        chans.append(v)
    img = np.stack(chans)
    img = np.clip(img + _noise(img.shape, noise_seed, noise_std), 0.0, 1.0)
    return TactileFrame("gel", img.astype(np.float32))


def record_seed(seed: int, grasp_id: int) -> int:
    """Per-record noise seed, independent of rendering order."""
    return int(autodiff.rng_stream(seed, "noise-seed", grasp_id).integers(0, 2**31 - 1))


def render_pair(grasp: GraspSample, seed: int, noise_std: float = NOISE_STD) -> PairedRecord:
    h = render_heightfield(grasp, tool_by_id(grasp.tool_id))
    base = record_seed(seed, grasp.grasp_id)
    return PairedRecord(grasp,
                        render_gel(h, base, noise_std),
                        render_membrane(h, base + 1, noise_std))


# ----------------------------------------------------------------- dataset

SPLIT_NAMES = ("pretrain", "probe-train", "probe-test", "unseen-tools-train", "unseen-tools-test")


@dataclass
class DatasetConfig:
    seed: int = 0
    pretrain_per_tool: int = 200
    probe_train_per_tool: int = 100
    probe_test_per_tool: int = 50
    unseen_train_per_tool: int = 100
    unseen_test_per_tool: int = 50
    noise_std: float = NOISE_STD
    train_tools: tuple = TRAIN_TOOL_IDS
    heldout_tools: tuple = HELDOUT_TOOL_IDS

    def split_plan(self):
        return [
            ("pretrain", self.train_tools, self.pretrain_per_tool),
            ("probe-train", self.train_tools, self.probe_train_per_tool),
            ("probe-test", self.train_tools, self.probe_test_per_tool),
            ("unseen-tools-train", self.heldout_tools, self.unseen_train_per_tool),
            ("unseen-tools-test", self.heldout_tools, self.unseen_test_per_tool),
        ]


def generate_splits(cfg: DatasetConfig) -> dict:
    """Render every split in memory; returns ``{name: SplitData}``."""
    from .dataio import SplitData

    if set(cfg.train_tools) & set(cfg.heldout_tools):
        raise ValueError("train and held-out tool sets overlap")
    splits = {}
    next_id = 0
    seen_ids: set[int] = set()
    for name, tools, n in cfg.split_plan():
        grasps = sample_grasps(tools, n, seed=cfg.seed, start_id=next_id, stream=f"data/{name}")
        ids = {g.grasp_id for g in grasps}
        if ids & seen_ids:
            raise ValueError(f"split {name!r} reuses grasp ids from an earlier split")
        seen_ids |= ids
        next_id += len(grasps)
        records = [render_pair(g, cfg.seed, cfg.noise_std) for g in grasps]
        splits[name] = SplitData.from_records(records)
    return splits


def generate_dataset(cfg: DatasetConfig, out_dir) -> dict:
    """Render all splits and write them plus a manifest into ``out_dir``."""
    from . import dataio

    splits = generate_splits(cfg)
    dataio.write_dataset(out_dir, splits, cfg)
    return splits


def sensor_parameters() -> dict:
    return {
        "frame_size": FRAME_SIZE,
        "pixel_pitch_mm": PIXEL_PITCH,
        "falloff_width_mm": FALLOFF_WIDTH,
        "membrane_sigma_px": MEMBRANE_SIGMA,
        "gel_sigma_px": GEL_SIGMA,
        "gel_base": GEL_BASE,
        "gel_gain": GEL_GAIN,
        "light_angles_deg": list(LIGHT_ANGLES),
        "light_directions": light_directions().round(12).tolist(),
        "noise_std": {"gel": NOISE_STD, "membrane": NOISE_STD},
    }
