"""Dataset manifests, PNG image I/O and the procedural shapes dataset."""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .backbone import DTYPE
from .config import derive_seed
from .errors import InputError

COLORS = {
    "red": (220, 30, 30),
    "green": (30, 170, 60),
    "blue": (40, 60, 220),
    "yellow": (240, 220, 40),
    "purple": (140, 50, 170),
    "orange": (245, 140, 20),
    "white": (245, 245, 245),
    "black": (15, 15, 15),
}
SHAPES = ("circle", "square", "triangle")
CAPTION_RE = re.compile(r"^a (\w+) (\w+) on a (\w+) background$")


@dataclass(frozen=True)
class Record:
    image_path: Path
    caption: str


@dataclass
class DatasetManifest:
    records: list[Record]
    path: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    def load_samples(self, pixel_shape=None) -> list[tuple[torch.Tensor, str]]:
        return [(load_image(r.image_path, pixel_shape), r.caption) for r in self.records]


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def load_image(path: str | Path, pixel_shape=None) -> torch.Tensor:
    """PNG -> float64 tensor (3, H, W) in [-1, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from None
    t = torch.from_numpy(arr).permute(2, 0, 1).to(DTYPE) / 127.5 - 1.0
    if pixel_shape is not None and tuple(t.shape) != tuple(pixel_shape):
        raise InputError(f"image {path} has shape {tuple(t.shape)}, expected {tuple(pixel_shape)}")
    return t


def save_image(pixels: torch.Tensor, path: str | Path) -> Path:
    if pixels.dim() == 4:
        pixels = pixels[0]
    arr = ((pixels.clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8).permute(1, 2, 0).numpy()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, "RGB").save(path, format="PNG", optimize=False)
    return path


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a JSON-lines manifest; relative image paths resolve against the manifest's directory."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from None
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            image_path, caption = obj["image_path"], obj["caption"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputError(f"{path}:{lineno}: malformed manifest line ({exc})") from None
        if caption is None:
            raise InputError(f"{path}:{lineno}: caption must not be null")
        img = Path(image_path)
        if not img.is_absolute():
            img = path.parent / img
        records.append(Record(img, str(caption)))
    if not records:
        raise InputError(f"{path}: manifest has no records")
    for index, rec in enumerate(records):
        if not rec.image_path.is_file():
            raise InputError(f"{path}: record {index}: image not found: {rec.image_path}")
    return DatasetManifest(records, path)


def write_manifest(records: list[Record], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            rel = os.path.relpath(rec.image_path, path.parent)
            fh.write(json.dumps({"image_path": rel, "caption": rec.caption}) + "\n")
    return path


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------


def render_shape(shape: str, color: str, background: str, size: int, rng: np.random.Generator) -> Image.Image:
    im = Image.new("RGB", (size, size), COLORS[background])
    draw = ImageDraw.Draw(im)
    radius = size * rng.uniform(0.25, 0.35)
    cx, cy = size / 2 + rng.uniform(-0.1, 0.1, size=2) * size
    box = [cx - radius, cy - radius, cx + radius, cy + radius]
    fill = COLORS[color]
    if shape == "circle":
        draw.ellipse(box, fill=fill)
    elif shape == "square":
        draw.rectangle(box, fill=fill)
    else:
        draw.polygon([(cx, cy - radius), (cx - radius, cy + radius), (cx + radius, cy + radius)], fill=fill)
    return im


def make_caption(color: str, shape: str, background: str) -> str:
    return f"a {color} {shape} on a {background} background"


def parse_caption(caption: str) -> tuple[str, str, str] | None:
    m = CAPTION_RE.match(caption)
    if not m or m.group(1) not in COLORS or m.group(2) not in SHAPES or m.group(3) not in COLORS:
        return None
    return m.group(1), m.group(2), m.group(3)


def synth_dataset(n: int, seed: int, out_dir: str | Path, image_size: int = 32) -> DatasetManifest:
    """Write ``n`` shape images plus ``manifest.jsonl`` into ``out_dir``.

    Labels cycle through (shape, color, background) combinations in a
    seed-shuffled order; the seed also drives position and size jitter.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    rng = np.random.default_rng(derive_seed(seed, "synth"))
    names = list(COLORS)
    combos = [(c, s, b) for s in SHAPES for c in names for b in names if b != c]
    order = rng.permutation(len(combos))
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        color, shape, background = combos[order[i % len(combos)]]
        path = out_dir / "images" / f"{i:05d}.png"
        render_shape(shape, color, background, image_size, rng).save(path, format="PNG", optimize=False)
        records.append(Record(path, make_caption(color, shape, background)))
    write_manifest(records, out_dir / "manifest.jsonl")
    return DatasetManifest(records, out_dir / "manifest.jsonl")
