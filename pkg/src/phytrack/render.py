from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .motio import MotRow, frame_name


def _color(track_id: int) -> tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb((track_id * 0.618034) % 1.0, 0.9, 0.95)
    return int(r * 255), int(g * 255), int(b * 255)


def overlay(frame: np.ndarray, rows: list[MotRow]) -> Image.Image:
    """Burn boxes and track ids into a copy of the frame (same size)."""
    im = Image.fromarray(frame).convert("RGB")
    draw = ImageDraw.Draw(im)
    for r in rows:
        c = _color(r.track_id)
        draw.rectangle([r.left, r.top, r.left + r.width, r.top + r.height], outline=c)
        draw.text((r.left + 1, max(r.top - 10, 0)), str(r.track_id), fill=c)
    return im


def write_overlay(render_dir: str | Path, index: int, frame: np.ndarray, rows: list[MotRow]) -> Path:
    render_dir = Path(render_dir)
    render_dir.mkdir(parents=True, exist_ok=True)
    path = render_dir / frame_name(index)
    overlay(frame, rows).save(path)
    return path
