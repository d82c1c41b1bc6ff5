"""MOTChallenge text rows and the per-sequence directory layout."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)


class MotFormatError(ValueError):
    pass


@dataclass(frozen=True)
class MotRow:
    frame: int
    track_id: int
    left: float
    top: float
    width: float
    height: float
    conf: float = 1.0
    class_id: int = 0
    visibility: float = 1.0

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.left, self.top, self.width, self.height)

    def to_line(self) -> str:
        return (
            f"{self.frame:d},{self.track_id:d},{self.left:.2f},{self.top:.2f},"
            f"{self.width:.2f},{self.height:.2f},{self.conf:.2f},{self.class_id:d},"
            f"{self.visibility:.2f}"
        )


def format_rows(rows: Iterable[MotRow]) -> str:
    return "".join(r.to_line() + "\n" for r in rows)


def parse_rows(text: str, source: str = "<string>") -> list[MotRow]:
    rows = []
    last_frame = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.strip().split(",")
        if len(parts) != 9:
            raise MotFormatError(f"{source}:{lineno}: expected 9 fields, got {len(parts)}")
        try:
            row = MotRow(
                frame=int(parts[0]),
                track_id=int(parts[1]),
                left=float(parts[2]),
                top=float(parts[3]),
                width=float(parts[4]),
                height=float(parts[5]),
                conf=float(parts[6]),
                class_id=int(parts[7]),
                visibility=float(parts[8]),
            )
        except ValueError as exc:
            raise MotFormatError(f"{source}:{lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in (row.left, row.top, row.width, row.height, row.conf)):
            raise MotFormatError(f"{source}:{lineno}: non-finite value")
        if last_frame is not None and row.frame < last_frame:
            log.warning("%s:%d: frame index %d follows %d (non-monotone)", source, lineno, row.frame, last_frame)
        last_frame = row.frame
        rows.append(row)
    return rows


def write_mot(rows: Iterable[MotRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_rows(rows))
    return path


def read_mot(path: str | Path) -> list[MotRow]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"MOT file not found: {path}")
    return parse_rows(path.read_text(encoding="utf-8"), source=str(path))


def frame_name(index: int) -> str:
    return f"{index:06d}.png"


def write_seqinfo(path: str | Path, width: int, height: int, length: int, framerate: int = 25) -> None:
    Path(path).write_text(
        f"width={width}\nheight={height}\nlength={length}\nframerate={framerate}\n",
        encoding="utf-8",
    )


def read_seqinfo(path: str | Path) -> dict[str, int]:
    info = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("["):
            continue
        key, _, value = line.partition("=")
        info[key.strip()] = int(value.strip())
    return info


def write_sequence(seq_dir: str | Path, frames: np.ndarray, rows: list[MotRow], framerate: int = 25) -> Path:
    """Write frames (T, H, W, 3) uint8 plus ground truth in the MOTChallenge layout."""
    seq_dir = Path(seq_dir)
    img_dir = seq_dir / "img1"
    img_dir.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(frames, start=1):
        Image.fromarray(frame).save(img_dir / frame_name(t), optimize=False)
    write_mot(rows, seq_dir / "gt" / "gt.txt")
    n, h, w = frames.shape[:3]
    write_seqinfo(seq_dir / "seqinfo.txt", width=w, height=h, length=n, framerate=framerate)
    return seq_dir


def list_frames(seq_dir: str | Path) -> list[Path]:
    img_dir = Path(seq_dir) / "img1"
    if not img_dir.is_dir():
        return []
    return sorted(img_dir.glob("*.png"))


def load_frame(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def load_sequence(seq_dir: str | Path) -> tuple[np.ndarray, list[MotRow]]:
    paths = list_frames(seq_dir)
    if not paths:
        raise FileNotFoundError(f"no frames found in {seq_dir}")
    frames = np.stack([load_frame(p) for p in paths])
    gt_path = Path(seq_dir) / "gt" / "gt.txt"
    rows = read_mot(gt_path) if gt_path.exists() else []
    return frames, rows
