"""Frames, annotations, resizing and synthetic crowd videos.

On-disk formats:

* FDA1 annotation text: ``FDA1 <width> <height> <frame_count>``, then per
  frame ``frame <index> <n>`` followed by ``n`` lines ``<x> <y>``.
* Binary 8-bit PGM (``P5``, maxval 255) frames.
* A dataset directory holds one sub-directory per video containing
  ``annotations.fda`` and ``frame_0000.pgm`` ...
"""
from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ParseError, ValidationError
from .tensor import Tensor

ANNOTATION_FILE = "annotations.fda"


@dataclass
class VideoAnnotation:
    video_id: str
    width: int
    height: int
    frames: list[list[tuple[float, float]]] = field(default_factory=list)

    def validate(self) -> None:
        if not self.frames:
            raise ValidationError(f"video {self.video_id}: no frames")
        for t, heads in enumerate(self.frames):
            for k, (x, y) in enumerate(heads):
                if not (0 <= x < self.width and 0 <= y < self.height):
                    raise ValidationError(
                        f"video {self.video_id}: frame {t} head {k} at ({x}, {y}) outside "
                        f"{self.width}x{self.height}")

    def counts(self) -> list[int]:
        return [len(h) for h in self.frames]


@dataclass
class VideoSequence:
    """Frames (``[1, H, W]`` float arrays in ``[0, 255]``) plus annotations."""

    video_id: str
    frames: list[np.ndarray]
    annotation: VideoAnnotation

    def __len__(self) -> int:
        return len(self.frames)


# -- FDA1 -------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def serialize_annotations(ann: VideoAnnotation) -> str:
    lines = [f"FDA1 {ann.width} {ann.height} {len(ann.frames)}"]
    for t, heads in enumerate(ann.frames):
        lines.append(f"frame {t} {len(heads)}")
        lines.extend(f"{_fmt(x)} {_fmt(y)}" for x, y in heads)
    return "\n".join(lines) + "\n"


def parse_annotations(text: str, video_id: str = "") -> VideoAnnotation:
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty annotation file", 1)
    head = lines[0].split()
    if len(head) != 4 or head[0] != "FDA1":
        raise ParseError("expected 'FDA1 <width> <height> <frame_count>'", 1)
    try:
        width, height, n_frames = (int(v) for v in head[1:])
    except ValueError:
        raise ParseError("non-integer header field", 1) from None
    if width <= 0 or height <= 0:
        raise ValidationError(f"frame dimensions must be positive, got {width}x{height}")
    ann = VideoAnnotation(video_id, width, height, [])
    pos = 1
    for t in range(n_frames):
        if pos >= len(lines):
            raise ParseError(f"missing header for frame {t}", pos + 1)
        parts = lines[pos].split()
        if len(parts) != 3 or parts[0] != "frame" or parts[1] != str(t):
            raise ParseError(f"expected 'frame {t} <n>'", pos + 1)
        try:
            n = int(parts[2])
        except ValueError:
            raise ParseError("non-integer head count", pos + 1) from None
        pos += 1
        heads = []
        for _ in range(n):
            if pos >= len(lines):
                raise ParseError(f"frame {t}: expected {n} heads", pos + 1)
            xy = lines[pos].split()
            try:
                if len(xy) != 2:
                    raise ValueError
                heads.append((float(xy[0]), float(xy[1])))
            except ValueError:
                raise ParseError("expected '<x> <y>'", pos + 1) from None
            pos += 1
        ann.frames.append(heads)
    if any(line.strip() for line in lines[pos:]):
        raise ParseError("trailing content after last frame", pos + 1)
    ann.validate()
    return ann


def load_annotations(path: str | os.PathLike, video_id: str | None = None) -> VideoAnnotation:
    path = Path(path)
    vid = video_id if video_id is not None else path.parent.name or path.stem
    return parse_annotations(path.read_text(), vid)


def save_annotations(ann: VideoAnnotation, path: str | os.PathLike) -> None:
    Path(path).write_text(serialize_annotations(ann))


def scale_annotations(ann: VideoAnnotation, sx: float, sy: float,
                      width: int | None = None, height: int | None = None) -> VideoAnnotation:
    """Multiply coordinates by ``(sx, sy)``; new frame dims default to the scaled ones."""
    if not (sx > 0 and sy > 0):
        raise ValidationError(f"scales must be positive, got ({sx}, {sy})")
    w = width if width is not None else int(round(ann.width * sx))
    h = height if height is not None else int(round(ann.height * sy))
    out = VideoAnnotation(ann.video_id, w, h, [[(x * sx, y * sy) for x, y in heads] for heads in ann.frames])
    out.validate()
    return out


# -- P5 graymaps --------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def encode_pgm(pixels: np.ndarray, comment: str | None = None) -> bytes:
    a = np.asarray(pixels)
    if a.ndim == 3:
        a = a.reshape(a.shape[-2:])
    if a.ndim != 2:
        raise FormatError(f"PGM needs a 2-D image, got shape {a.shape}")
    if np.any(a < 0) or np.any(a > 255) or np.any(a != np.round(a)):
        raise FormatError("PGM pixels must be integers in [0, 255]")
    h, w = a.shape
    header = b"P5\n"
    if comment:
        header += b"".join(b"# " + line.encode() + b"\n" for line in comment.splitlines())
    header += f"{w} {h}\n255\n".encode()
    return header + a.astype(np.uint8).tobytes()


def decode_pgm(blob: bytes) -> np.ndarray:
    if blob[:2] != b"P5":
        raise FormatError(f"not a binary PGM (magic {blob[:2]!r})")
    pos = 2
    vals = []
    for _ in range(3):
        m = _TOKEN.match(blob, pos)
        if m is None:
            raise FormatError("truncated PGM header")
        try:
            vals.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"bad PGM header token {m.group(1)!r}") from None
        pos = m.end()
    w, h, maxval = vals
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval} (need 255)")
    if w <= 0 or h <= 0:
        raise FormatError(f"bad PGM dimensions {w}x{h}")
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after PGM header")
    pos += 1
    payload = blob[pos:]
    if len(payload) != w * h:
        raise FormatError(f"PGM payload has {len(payload)} bytes, expected {w * h}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


def load_frame(path: str | os.PathLike) -> Tensor:
    """Read a P5 frame as a ``[1, H, W]`` float tensor of intensities."""
    pixels = decode_pgm(Path(path).read_bytes())
    return Tensor(pixels.astype(np.float32)[None])


def save_frame(frame, path: str | os.PathLike, comment: str | None = None) -> None:
    data = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    Path(path).write_bytes(encode_pgm(data, comment))


# -- resizing ---------------------------------------------------------------

def _resize_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # cell-center alignment, clamped at the borders
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_frame(frame, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of a ``[1, H, W]`` or ``[H, W]`` frame."""
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"target dims must be positive, got {out_h}x{out_w}")
    data = frame.data if isinstance(frame, Tensor) else np.asarray(frame, dtype=np.float32)
    squeeze = data.ndim == 2
    img = data if squeeze else data.reshape(data.shape[-2:])
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        out = img.copy()
    else:
        a = img.astype(np.float64)
        lo, hi, f = _resize_axis(h, out_h)
        a = a[lo] * (1 - f)[:, None] + a[hi] * f[:, None]
        lo, hi, f = _resize_axis(w, out_w)
        a = a[:, lo] * (1 - f)[None] + a[:, hi] * f[None]
        out = a.astype(data.dtype)
    return Tensor(out if squeeze else out[None])


# -- synthetic videos ---------------------------------------------------------

@dataclass
class SynthConfig:
    frames: int = 40
    height: int = 64
    width: int = 96
    heads: int = 15
    max_velocity: float = 1.0
    scale_drift: float = 0.003
    rotation_jitter: float = 0.003
    entry_prob: float = 0.1
    exit_prob: float = 0.05
    occlusion_prob: float = 0.01
    occlusion_frames: int = 3
    dot_sigma: float = 1.5
    dot_intensity: float = 100.0
    background: float = 128.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("entry_prob", "exit_prob", "occlusion_prob"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValidationError(f"{name} must be in [0, 1], got {p}")
        if self.frames < 2:
            raise ValidationError(f"need at least 2 frames, got {self.frames}")
        if self.height < 1 or self.width < 1 or self.heads < 0:
            raise ValidationError("frame dims must be positive and head count non-negative")
        if self.max_velocity < 0 or self.scale_drift < 0 or self.rotation_jitter < 0:
            raise ValidationError("motion ranges must be non-negative")
        if self.occlusion_frames < 0 or self.dot_sigma <= 0:
            raise ValidationError("occlusion_frames must be >= 0 and dot_sigma > 0")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def max_displacement(self) -> float:
        """Upper bound on how far an annotated head moves between frames."""
        r = 0.5 * math.hypot(self.width, self.height)
        s = self.scale_drift
        a = self.rotation_jitter
        # |p' - p| <= |v| + ||(1+s)R(a) - I|| * |p + v - c|
        m = math.sqrt((1 + s) ** 2 - 2 * (1 + s) * math.cos(a) + 1)
        m = max(m, math.sqrt((1 - s) ** 2 - 2 * (1 - s) * math.cos(a) + 1))
        v = self.max_velocity * math.sqrt(2)
        return v + m * (r + v)


def _render(cfg: SynthConfig, pos: np.ndarray) -> np.ndarray:
    img = np.full((cfg.height, cfg.width), cfg.background, dtype=np.float64)
    if len(pos):
        ys = np.arange(cfg.height) + 0.5
        xs = np.arange(cfg.width) + 0.5
        gy = np.exp(-((ys[None, :] - pos[:, 1:2]) ** 2) / (2 * cfg.dot_sigma**2))
        gx = np.exp(-((xs[None, :] - pos[:, 0:1]) ** 2) / (2 * cfg.dot_sigma**2))
        img += cfg.dot_intensity * np.einsum("ny,nx->yx", gy, gx)
    return np.clip(np.round(img), 0, 255).astype(np.float32)[None]


def synth_video(cfg: SynthConfig, video_id: str = "synth") -> tuple[list[np.ndarray], VideoAnnotation]:
    """Render a video of drifting Gaussian heads on a gray background.

    Each frame every head moves by its own velocity, then the whole scene is
    scaled by ``1 + s`` and rotated by ``a`` about the frame center (``s``
    and ``a`` drawn per frame).  Heads leaving the frame are dropped; with
    ``exit_prob`` one random head leaves, with ``entry_prob`` a new head
    enters at a border.  Occluded heads keep moving but are neither
    rendered nor annotated.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    W, H = cfg.width, cfg.height
    c = np.array([W / 2, H / 2])

    def velocity(k):
        return rng.uniform(-cfg.max_velocity, cfg.max_velocity, (k, 2))

    pos = rng.uniform([0, 0], [W, H], (cfg.heads, 2))
    vel = velocity(cfg.heads)
    hidden = np.zeros(cfg.heads, dtype=np.int64)

    frames, annots = [], []
    for t in range(cfg.frames):
        if t > 0:
            s = rng.uniform(-cfg.scale_drift, cfg.scale_drift)
            a = rng.uniform(-cfg.rotation_jitter, cfg.rotation_jitter)
            rot = (1 + s) * np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
            pos = (pos + vel - c) @ rot.T + c
            hidden = np.maximum(hidden - 1, 0)
            inside = (pos[:, 0] >= 0) & (pos[:, 0] < W) & (pos[:, 1] >= 0) & (pos[:, 1] < H)
            if len(pos) and rng.random() < cfg.exit_prob:
                inside[rng.integers(len(pos))] = False
            pos, vel, hidden = pos[inside], vel[inside], hidden[inside]
            if rng.random() < cfg.entry_prob:
                side = rng.integers(4)
                u = rng.random()
                p = [[u * W, 0.0], [u * W, H - 1e-3], [0.0, u * H], [W - 1e-3, u * H]][side]
                vx, vy = velocity(1)[0]
                # inward along the entry side's normal
                v = [[vx, abs(vy)], [vx, -abs(vy)], [abs(vx), vy], [-abs(vx), vy]][side]
                pos = np.vstack([pos, p])
                vel = np.vstack([vel, v])
                hidden = np.append(hidden, 0)
            occlude = (rng.random(len(pos)) < cfg.occlusion_prob) & (hidden == 0)
            hidden[occlude] = cfg.occlusion_frames
        visible = pos[hidden == 0]
        frames.append(_render(cfg, visible))
        annots.append([(float(x), float(y)) for x, y in visible])
    return frames, VideoAnnotation(video_id, W, H, annots)


def synth_dataset(n_videos: int, base: SynthConfig, seed: int, prefix: str = "vid",
                  head_range: tuple[int, int] = (5, 25)) -> list[VideoSequence]:
    """Several synthetic videos with per-video seeds and head counts drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_videos):
        heads = int(rng.integers(head_range[0], head_range[1] + 1))
        vseed = int(rng.integers(2**31))
        cfg = SynthConfig(**{**base.__dict__, "heads": heads, "seed": vseed})
        frames, ann = synth_video(cfg, f"{prefix}{i:03d}")
        out.append(VideoSequence(ann.video_id, frames, ann))
    return out


# -- dataset directories ------------------------------------------------------

def save_video(seq: VideoSequence, root: str | os.PathLike) -> Path:
    d = Path(root) / seq.video_id
    d.mkdir(parents=True, exist_ok=True)
    save_annotations(seq.annotation, d / ANNOTATION_FILE)
    for t, f in enumerate(seq.frames):
        save_frame(f, d / f"frame_{t:04d}.pgm")
    return d


def load_video(path: str | os.PathLike) -> VideoSequence:
    d = Path(path)
    ann = load_annotations(d / ANNOTATION_FILE, d.name)
    frames = []
    for t in range(len(ann.frames)):
        f = load_frame(d / f"frame_{t:04d}.pgm").data
        if f.shape[-2:] != (ann.height, ann.width):
            raise ValidationError(f"video {d.name}: frame {t} is {f.shape[-1]}x{f.shape[-2]}, "
                                  f"annotation says {ann.width}x{ann.height}")
        frames.append(f)
    return VideoSequence(ann.video_id, frames, ann)


def load_dataset(root: str | os.PathLike) -> list[VideoSequence]:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if (p / ANNOTATION_FILE).is_file())
    if not dirs:
        raise ValidationError(f"no videos under {root}")
    return [load_video(d) for d in dirs]


def save_dataset(videos: Sequence[VideoSequence], root: str | os.PathLike) -> None:
    for v in videos:
        save_video(v, root)
