"""Synthetic flowing-pipe microscopy sequences with MOT ground truth.

Objects drift with a dominant horizontal flow, enter at one edge and leave at
the other. Each class has its own sprite shape and texture; small class-less
impurity specks drift along too and never appear in the ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .motio import MotRow

NOISE_KINDS = ("none", "occlusion", "gray", "blur", "salt_pepper")
NOISE_LEVELS = ("medium", "hard")

# level -> kind -> params; gray exists only at hard
NOISE_DEFAULTS: dict[str, dict[str, dict[str, float]]] = {
    "medium": {
        "occlusion": {"count": 2, "area": 0.10},
        "blur": {"sigma": 1.0},
        "salt_pepper": {"p": 0.02},
    },
    "hard": {
        "occlusion": {"count": 5, "area": 0.20},
        "gray": {"strength": 1.0},
        "blur": {"sigma": 2.5},
        "salt_pepper": {"p": 0.10},
    },
}

TIER_KINDS = {
    "easy": (),
    "medium": ("occlusion", "blur", "salt_pepper"),
    "hard": ("occlusion", "gray", "blur", "salt_pepper"),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SequenceConfig:
    width: int = 160
    height: int = 96
    num_frames: int = 150
    num_classes: int = 6
    spawn_rate: float = 0.09
    flow_velocity: float = 3.0
    jitter_sigma: float = 0.4
    size_min: float = 11.0
    size_max: float = 18.0
    impurity_density: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.width < 32:
            raise ConfigError(f"width must be >= 32, got {self.width}")
        if self.height < 32:
            raise ConfigError(f"height must be >= 32, got {self.height}")
        if self.num_frames < 2:
            raise ConfigError(f"num_frames must be >= 2, got {self.num_frames}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if not math.isfinite(self.flow_velocity):
            raise ConfigError(f"flow_velocity must be finite, got {self.flow_velocity}")
        if not (math.isfinite(self.spawn_rate) and self.spawn_rate >= 0):
            raise ConfigError(f"spawn_rate must be >= 0, got {self.spawn_rate}")
        if not (math.isfinite(self.jitter_sigma) and self.jitter_sigma >= 0):
            raise ConfigError(f"jitter_sigma must be >= 0, got {self.jitter_sigma}")
        if not (0 < self.size_min <= self.size_max):
            raise ConfigError(f"size_min/size_max must satisfy 0 < min <= max, got {self.size_min}, {self.size_max}")
        if self.size_max >= min(self.width, self.height):
            raise ConfigError(f"size_max must be smaller than the frame, got {self.size_max}")
        if self.impurity_density < 0:
            raise ConfigError(f"impurity_density must be >= 0, got {self.impurity_density}")

    @property
    def size_range(self) -> tuple[float, float]:
        return (self.size_min, self.size_max)


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"
    level: str = "medium"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"unknown noise kind {self.kind!r}")
        if self.level not in NOISE_LEVELS:
            raise ConfigError(f"unknown noise level {self.level!r}")
        if self.kind == "gray" and self.level == "medium":
            raise ConfigError("gray noise has no medium level")

    @classmethod
    def default(cls, kind: str, level: str) -> "NoiseSpec":
        if kind == "none":
            return cls("none", level, {})
        if level not in NOISE_DEFAULTS or kind not in NOISE_DEFAULTS[level]:
            raise ConfigError(f"no default parameters for {kind!r} at level {level!r}")
        return cls(kind, level, dict(NOISE_DEFAULTS[level][kind]))

    @property
    def label(self) -> str:
        return "none" if self.kind == "none" else f"{self.level}-{self.kind}"


def tier_specs(tier: str) -> list[NoiseSpec]:
    """Noise specs applied for a difficulty tier (one corrupted variant per spec)."""
    if tier not in TIER_KINDS:
        raise ConfigError(f"unknown tier {tier!r}")
    return [NoiseSpec.default(kind, tier) for kind in TIER_KINDS[tier]]


@dataclass
class SpawnedObject:
    """Explicit object placement; left/top are the box corner at its first frame."""

    left: float
    top: float
    width: float
    height: float
    class_id: int = 0
    vx: float | None = None
    vy: float = 0.0
    first_frame: int = 1
    variant: float = 0.0


# ---------------------------------------------------------------------------
# sprites


_CLASS_TINTS = np.array(
    [
        [0.30, 0.45, 0.20],
        [0.45, 0.35, 0.15],
        [0.25, 0.40, 0.40],
        [0.40, 0.45, 0.15],
        [0.35, 0.25, 0.30],
        [0.20, 0.35, 0.25],
    ]
)


def _class_aspect(class_id: int) -> float:
    # width / height
    return (1.3, 2.6, 2.4, 1.0, 1.0, 0.8)[class_id % 6]


def _sprite_alpha(class_id: int, u: np.ndarray, v: np.ndarray, variant: float) -> np.ndarray:
    """Coverage in [0,1] on normalised box coordinates u, v in [-1, 1]."""
    shape = class_id % 6
    if shape == 0:  # ellipse with dots
        inside = u**2 + v**2 <= 1.0
        tex = 0.75 + 0.25 * (np.sin(9.0 * u + 3 * variant) * np.sin(9.0 * v) > 0.3)
    elif shape == 1:  # rod with longitudinal stripes
        inside = (np.abs(u) ** 4 + v**2) <= 1.0
        tex = 0.7 + 0.3 * (np.cos(6.0 * np.pi * v) > 0)
    elif shape == 2:  # chain of three cells
        r = 1.0 / 3.0
        inside = np.zeros(u.shape, dtype=bool)
        for c in (-2 * r, 0.0, 2 * r):
            inside |= ((u - c) / r) ** 2 + v**2 <= 1.0
        tex = np.full(u.shape, 0.9)
    elif shape == 3:  # ring
        rad = np.sqrt(u**2 + v**2)
        inside = (rad <= 1.0) & (rad >= 0.45)
        tex = np.full(u.shape, 1.0)
    elif shape == 4:  # diamond with hatch
        inside = np.abs(u) + np.abs(v) <= 1.0
        tex = 0.7 + 0.3 * (np.sin(8.0 * (u + v) + variant) > 0)
    else:  # rounded square, granular
        inside = u**4 + v**4 <= 1.0
        tex = 0.75 + 0.25 * (np.sin(13.0 * u + 2 * variant) * np.cos(11.0 * v) > 0)
    return inside * tex


def _render_sprite(canvas: np.ndarray, obj: "_Obj", left: float, top: float, ss: int = 3) -> None:
    h, w = canvas.shape[:2]
    x0 = max(int(math.floor(left)), 0)
    y0 = max(int(math.floor(top)), 0)
    x1 = min(int(math.ceil(left + obj.width)), w)
    y1 = min(int(math.ceil(top + obj.height)), h)
    if x1 <= x0 or y1 <= y0:
        return
    offs = (np.arange(ss) + 0.5) / ss
    xs = (np.arange(x0, x1)[:, None] + offs[None, :]).ravel()
    ys = (np.arange(y0, y1)[:, None] + offs[None, :]).ravel()
    u = (xs - left) / obj.width * 2.0 - 1.0
    v = (ys - top) / obj.height * 2.0 - 1.0
    uu, vv = np.meshgrid(u, v)
    alpha = _sprite_alpha(obj.class_id, uu, vv, obj.variant)
    alpha = alpha.reshape(y1 - y0, ss, x1 - x0, ss).mean(axis=(1, 3))
    a = (alpha * obj.opacity)[..., None]
    patch = canvas[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1] = patch * (1.0 - a) + obj.color[None, None, :] * a


@dataclass
class _Obj:
    track_id: int
    class_id: int
    left0: float
    top0: float
    width: float
    height: float
    vx: float
    vy: float
    first_frame: int
    color: np.ndarray
    opacity: float
    variant: float

    def box_at(self, frame: int) -> tuple[float, float]:
        dt = frame - self.first_frame
        return self.left0 + self.vx * dt, self.top0 + self.vy * dt


def _background(cfg: SequenceConfig, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(np.float64)
    base = np.array([0.80, 0.84, 0.78]) + rng.uniform(-0.03, 0.03, size=3)
    shade = np.zeros((cfg.height, cfg.width))
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.0, size=2) * 2 * np.pi / np.array([cfg.width, cfg.height])
        phase = rng.uniform(0, 2 * np.pi)
        shade += 0.02 * np.sin(fx * xs + fy * ys + phase)
    return base[None, None, :] + shade[..., None]


def _spawn_count(rng: np.random.Generator, rate: float) -> int:
    return int(rng.poisson(rate)) if rate > 0 else 0


def synth_sequence(
    config: SequenceConfig, objects: Sequence[SpawnedObject] | None = None
) -> tuple[np.ndarray, list[MotRow]]:
    """Render a sequence; returns (frames (T, H, W, 3) uint8, ground-truth rows).

    ``objects`` adds explicitly placed objects on top of the random spawns
    (pass ``spawn_rate=0`` for a fully scripted scene).
    """
    cfg = config
    ss = np.random.SeedSequence(cfg.seed)
    sim_rng, pix_rng, bg_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    bg = _background(cfg, bg_rng)
    flow = cfg.flow_velocity
    objs: list[_Obj] = []
    impurities: list[_Obj] = []
    next_id = 1

    def make_obj(class_id, left, top, width, height, vx, vy, first, variant, track_id):
        tint = _CLASS_TINTS[class_id % len(_CLASS_TINTS)]
        color = np.clip(tint + sim_rng.uniform(-0.04, 0.04, size=3), 0, 1)
        opacity = float(sim_rng.uniform(0.55, 0.75))
        return _Obj(track_id, class_id, left, top, width, height, vx, vy, first, color, opacity, variant)

    for spec in objects or ():
        vx = flow if spec.vx is None else spec.vx
        objs.append(make_obj(spec.class_id, spec.left, spec.top, spec.width, spec.height,
                             vx, spec.vy, spec.first_frame, spec.variant, next_id))
        next_id += 1

    # burn-in so the field is populated at frame 1
    burn = 0
    if flow != 0 and cfg.spawn_rate > 0:
        burn = int(math.ceil((cfg.width + cfg.size_max) / abs(flow)))
    for t in range(1 - burn, cfg.num_frames + 1):
        for _ in range(_spawn_count(sim_rng, cfg.spawn_rate)):
            class_id = int(sim_rng.integers(cfg.num_classes))
            size = sim_rng.uniform(cfg.size_min, cfg.size_max)
            aspect = _class_aspect(class_id) * sim_rng.uniform(0.9, 1.1)
            width = size * math.sqrt(aspect)
            height = size / math.sqrt(aspect)
            scale = min(1.0, (cfg.size_max * 1.25) / max(width, height))
            width, height = width * scale, height * scale
            top = sim_rng.uniform(0, cfg.height - height)
            vx = flow + cfg.jitter_sigma * sim_rng.standard_normal()
            vy = cfg.jitter_sigma * sim_rng.standard_normal()
            left = -width if flow >= 0 else float(cfg.width)
            variant = sim_rng.uniform(0, 2 * np.pi)
            objs.append(make_obj(class_id, left, top, width, height, vx, vy, t, variant, next_id))
            next_id += 1
        for _ in range(_spawn_count(sim_rng, cfg.spawn_rate * cfg.impurity_density * 2)):
            s = sim_rng.uniform(2.0, 4.0)
            left = -s if flow >= 0 else float(cfg.width)
            imp = make_obj(0, left, sim_rng.uniform(0, cfg.height - s), s, s,
                           flow + cfg.jitter_sigma * sim_rng.standard_normal(), 0.0, t, 0.0, 0)
            imp.color = np.array([0.35, 0.33, 0.30]) + sim_rng.uniform(-0.05, 0.05, size=3)
            imp.opacity = float(sim_rng.uniform(0.4, 0.7))
            impurities.append(imp)

    frames = np.empty((cfg.num_frames, cfg.height, cfg.width, 3), dtype=np.uint8)
    rows: list[MotRow] = []
    for t in range(1, cfg.num_frames + 1):
        canvas = bg.copy()
        for imp in impurities:
            if imp.first_frame > t:
                continue
            left, top = imp.box_at(t)
            _render_sprite(canvas, imp, left, top, ss=2)
        for obj in objs:
            if obj.first_frame > t:
                continue
            left, top = obj.box_at(t)
            box = _clip_box(left, top, obj.width, obj.height, cfg.width, cfg.height)
            if box is None:
                continue
            _render_sprite(canvas, obj, left, top)
            cl, ct, cw, ch = box
            vis = (cw * ch) / (obj.width * obj.height)
            rows.append(MotRow(t, obj.track_id, round(cl, 2), round(ct, 2), round(cw, 2), round(ch, 2),
                               1.0, obj.class_id, round(min(vis, 1.0), 2)))
        canvas += pix_rng.normal(0.0, 0.008, size=canvas.shape)
        frames[t - 1] = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)
    rows = _contiguous(rows)
    rows.sort(key=lambda r: (r.frame, r.track_id))
    return frames, rows


def _clip_box(left, top, width, height, img_w, img_h, min_size=1.0):
    x0, y0 = max(left, 0.0), max(top, 0.0)
    x1, y1 = min(left + width, float(img_w)), min(top + height, float(img_h))
    if x1 - x0 < min_size or y1 - y0 < min_size:
        return None
    return x0, y0, x1 - x0, y1 - y0


def _contiguous(rows: list[MotRow]) -> list[MotRow]:
    # an object that leaves the view never comes back; keep only its first visible run
    by_id: dict[int, list[MotRow]] = {}
    for r in rows:
        by_id.setdefault(r.track_id, []).append(r)
    out = []
    for track in by_id.values():
        track.sort(key=lambda r: r.frame)
        run = [track[0]]
        for r in track[1:]:
            if r.frame != run[-1].frame + 1:
                break
            run.append(r)
        out.extend(run)
    return out


# ---------------------------------------------------------------------------
# noise


def apply_noise(frame: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """Corrupt one uint8 (H, W, 3) frame."""
    if frame.size == 0:
        raise ValueError("empty frame")
    if spec.kind not in NOISE_KINDS:
        raise ConfigError(f"unknown noise kind {spec.kind!r}")
    out = frame.copy()
    if spec.kind == "none":
        return out
    if spec.kind == "gray":
        lum = frame[..., 0] * 0.299 + frame[..., 1] * 0.587 + frame[..., 2] * 0.114
        lum = np.clip(np.rint(lum), 0, 255).astype(frame.dtype)
        return np.repeat(lum[..., None], 3, axis=2)
    if spec.kind == "blur":
        sigma = float(spec.params["sigma"])
        if sigma <= 0:
            return out
        f = frame.astype(np.float64)
        f = gaussian_filter1d(f, sigma, axis=0, mode="nearest")
        f = gaussian_filter1d(f, sigma, axis=1, mode="nearest")
        return np.clip(np.rint(f), 0, 255).astype(frame.dtype)
    if spec.kind == "salt_pepper":
        p = float(spec.params["p"])
        hit = rng.random(frame.shape[:2]) < p
        salt = rng.random(frame.shape[:2]) < 0.5
        hi = np.iinfo(frame.dtype).max if np.issubdtype(frame.dtype, np.integer) else 1.0
        out[hit & salt] = hi
        out[hit & ~salt] = 0
        return out
    if spec.kind == "occlusion":
        h, w = frame.shape[:2]
        count = int(spec.params["count"])
        area = float(spec.params["area"]) * h * w / max(count, 1)
        for _ in range(count):
            aspect = rng.uniform(0.5, 2.0)
            rw = int(max(2, min(w, round(math.sqrt(area * aspect)))))
            rh = int(max(2, min(h, round(area / rw))))
            x = int(rng.integers(0, w - rw + 1))
            y = int(rng.integers(0, h - rh + 1))
            out[y : y + rh, x : x + rw] = int(rng.integers(40, 90))
        return out
    raise ConfigError(f"unknown noise kind {spec.kind!r}")


def corrupt_sequence(frames: np.ndarray, spec: NoiseSpec, seed: int) -> np.ndarray:
    """Apply one noise spec to every frame. Occluders stay put for the whole sequence."""
    out = np.empty_like(frames)
    stream = np.random.default_rng([seed, NOISE_KINDS.index(spec.kind)])
    for t, frame in enumerate(frames):
        rng = np.random.default_rng([seed, 99]) if spec.kind == "occlusion" else stream
        out[t] = apply_noise(frame, spec, rng)
    return out


def config_from_mapping(values: dict) -> SequenceConfig:
    names = {f.name for f in fields(SequenceConfig)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown sequence config field(s): {', '.join(sorted(unknown))}")
    return SequenceConfig(**values)
