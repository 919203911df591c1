"""Directory-format segmentation datasets and a procedural shape-vs-texture benchmark.

On-disk layout::

    root/classes.json            {"classes": [{"id": str, "images": int}], "image_size": [H, W]}
    root/images/<class>/<id>.png RGB, 8-bit
    root/masks/<class>/<id>.png  grayscale, foreground >= 128

The synthetic generator also writes ``root/textures.json`` recording the
texture family drawn for each image's foreground and background.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

SHAPES = ("circle", "square", "triangle", "cross", "ring", "star", "crescent", "hexagon")
TEXTURES = ("grating", "checker", "noise", "solid")


class DatasetError(ValueError):
    """Raised when a dataset directory is malformed; names the offending path."""

    def __init__(self, message: str, path: os.PathLike | str | None = None):
        super().__init__(f"{message}: {path}" if path is not None else message)
        self.path = None if path is None else str(path)


@dataclass
class SegDataset:
    root: Path
    classes: dict[str, list[tuple[Path, Path]]]
    image_size: tuple[int, int]
    metadata: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)
    _usable: dict = field(default_factory=dict, repr=False)

    @property
    def class_ids(self) -> list[str]:
        return sorted(self.classes)

    def __len__(self) -> int:
        return sum(len(v) for v in self.classes.values())

    def load(self, class_id: str, index: int) -> tuple[np.ndarray, np.ndarray]:
        """(3, H, W) float32 image scaled to [0, 1] and (H, W) uint8 mask."""
        key = (class_id, index)
        if key not in self._cache:
            img_path, mask_path = self.classes[class_id][index]
            image = _read_image(img_path, self.image_size)
            mask = _read_mask(mask_path, self.image_size)
            self._cache[key] = (image.transpose(2, 0, 1).astype(np.float32) / 255.0, mask)
        return self._cache[key]

    def usable_indices(self, class_id: str) -> list[int]:
        """Indices whose mask has foreground."""
        if class_id not in self._usable:
            self._usable[class_id] = [i for i in range(len(self.classes[class_id]))
                                      if self.load(class_id, i)[1].any()]
        return self._usable[class_id]


def _read_image(path: Path, size: tuple[int, int]) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"unreadable image ({exc})", path) from exc
    if arr.shape[:2] != tuple(size):
        raise DatasetError(f"image size {arr.shape[:2]} != dataset size {tuple(size)}", path)
    return arr


def _read_mask(path: Path, size: tuple[int, int]) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"unreadable mask ({exc})", path) from exc
    if arr.shape != tuple(size):
        raise DatasetError(f"mask size {arr.shape} != dataset size {tuple(size)}", path)
    return (arr >= 128).astype(np.uint8)


def load_dataset(root_path, validate: bool = True) -> SegDataset:
    """Read and validate a dataset directory.

    With ``validate`` every image/mask pair is decoded once up front so
    errors surface here, naming the offending file.
    """
    root = Path(root_path)
    index_path = root / "classes.json"
    try:
        index = json.loads(index_path.read_text())
    except FileNotFoundError as exc:
        raise DatasetError("missing classes.json", index_path) from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"invalid JSON ({exc})", index_path) from exc
    try:
        size = tuple(int(v) for v in index["image_size"])
        entries = index["classes"]
    except (KeyError, TypeError) as exc:
        raise DatasetError("classes.json lacks 'classes' or 'image_size'", index_path) from exc
    if len(size) != 2:
        raise DatasetError("image_size must be [H, W]", index_path)

    classes = {}
    for entry in entries:
        cid = str(entry["id"])
        img_dir, mask_dir = root / "images" / cid, root / "masks" / cid
        if not img_dir.is_dir():
            raise DatasetError("missing image directory", img_dir)
        pairs = []
        for img in sorted(img_dir.glob("*.png")):
            mask = mask_dir / img.name
            if not mask.is_file():
                raise DatasetError("missing mask", mask)
            pairs.append((img, mask))
        if "images" in entry and int(entry["images"]) != len(pairs):
            raise DatasetError(f"classes.json lists {entry['images']} images, found {len(pairs)}", img_dir)
        classes[cid] = pairs

    meta = {k: v for k, v in index.items() if k not in ("classes", "image_size")}
    ds = SegDataset(root, classes, size, meta)
    if validate:
        for cid, pairs in classes.items():
            for i in range(len(pairs)):
                ds.load(cid, i)
    return ds


@dataclass
class SynthConfig:
    shape_classes: tuple[str, ...] = SHAPES
    textures: tuple[str, ...] = TEXTURES
    images_per_class: int = 50
    image_size: tuple[int, int] = (64, 64)
    noise_std: float = 0.03
    seed: int = 0
    min_area: float = 0.05
    max_area: float = 0.60
    min_contrast: float = 0.2

    def __post_init__(self):
        self.shape_classes = tuple(self.shape_classes)
        self.textures = tuple(self.textures)
        self.image_size = tuple(int(v) for v in self.image_size)
        unknown = set(self.shape_classes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shape classes {sorted(unknown)}")
        unknown = set(self.textures) - set(TEXTURES)
        if unknown:
            raise ValueError(f"unknown textures {sorted(unknown)}")
        if len(self.shape_classes) < 2 or not self.textures or self.images_per_class < 1:
            raise ValueError("need >= 2 shape classes, >= 1 texture and >= 1 image per class")
        if not 0 < self.min_area < self.max_area <= 1:
            raise ValueError("area bounds must satisfy 0 < min_area < max_area <= 1")


# shapes are rasterized on a unit-radius canvas: polygon vertices in [-1, 1]

def _regular(n: int, phase: float = 0.0) -> np.ndarray:
    t = phase + 2 * np.pi * np.arange(n) / n
    return np.stack([np.cos(t), np.sin(t)], 1)


def _star(points: int = 5, inner: float = 0.45) -> np.ndarray:
    t = np.pi / 2 + np.pi * np.arange(2 * points) / points
    r = np.where(np.arange(2 * points) % 2 == 0, 1.0, inner)
    return np.stack([r * np.cos(t), r * np.sin(t)], 1)


def _cross(arm: float = 0.34) -> np.ndarray:
    a = arm
    return np.array([(-a, -1), (a, -1), (a, -a), (1, -a), (1, a), (a, a), (a, 1), (-a, 1), (-a, a),
                     (-1, a), (-1, -a), (-a, -a)], dtype=float)


def _shape_mask(shape: str, size: tuple[int, int], center, radius: float, angle: float) -> np.ndarray:
    h, w = size
    ss = 4  # supersampling factor
    canvas = Image.new("L", (w * ss, h * ss), 0)
    draw = ImageDraw.Draw(canvas)
    cx, cy, r = center[0] * ss, center[1] * ss, radius * ss
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])

    def poly(pts, fill=255):
        p = pts @ rot.T * r + np.array([cx, cy])
        draw.polygon([tuple(v) for v in p], fill=fill)

    if shape == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
    elif shape == "ring":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
        ri = 0.55 * r
        draw.ellipse([cx - ri, cy - ri, cx + ri, cy + ri], fill=0)
    elif shape == "crescent":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
        off = 0.5 * r * np.array([np.cos(angle), np.sin(angle)])
        ri = 0.85 * r
        draw.ellipse([cx + off[0] - ri, cy + off[1] - ri, cx + off[0] + ri, cy + off[1] + ri], fill=0)
    elif shape == "square":
        poly(_regular(4, np.pi / 4))
    elif shape == "triangle":
        poly(_regular(3, -np.pi / 2))
    elif shape == "hexagon":
        poly(_regular(6))
    elif shape == "star":
        poly(_star())
    elif shape == "cross":
        poly(_cross())
    else:
        raise ValueError(f"unknown shape {shape!r}")
    small = canvas.resize((w, h), Image.BOX)
    return (np.asarray(small) >= 128).astype(np.uint8)


def _texture(family: str, rng: np.random.Generator, size: tuple[int, int]) -> np.ndarray:
    """(H, W, 3) texture in [0, 1]: a pattern in [0, 1] blending two random colours."""
    h, w = size
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    c1, c2 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    if family == "grating":
        freq = rng.uniform(0.06, 0.25)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        p = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (x * np.cos(theta) + y * np.sin(theta)) + phase)
    elif family == "checker":
        cell = int(rng.integers(3, 9))
        ox, oy = rng.integers(0, cell, 2)
        p = (((x + ox) // cell + (y + oy) // cell) % 2).astype(np.float64)
    elif family == "noise":
        raw = rng.standard_normal((h, w))
        p = ndimage.gaussian_filter(raw, rng.uniform(0.8, 2.5), mode="wrap")
        p = (p - p.min()) / max(p.max() - p.min(), 1e-12)
    elif family == "solid":
        p = np.zeros((h, w))
    else:
        raise ValueError(f"unknown texture {family!r}")
    return c1 * (1 - p[..., None]) + c2 * p[..., None]


def render_sample(config: SynthConfig, class_index: int, image_index: int):
    """One (image uint8 (H,W,3), mask uint8 (H,W), fg texture, bg texture) sample.

    Seeded by (seed, class_index, image_index) only, so samples can be
    generated in any order or in parallel.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, class_index, image_index])))
    shape = config.shape_classes[class_index]
    h, w = config.image_size
    area = h * w
    for _ in range(1000):
        radius = rng.uniform(0.18, 0.45) * min(h, w)
        center = rng.uniform(0.25, 0.75, 2) * np.array([w, h])
        angle = rng.uniform(0, 2 * np.pi)
        mask = _shape_mask(shape, (h, w), center, radius, angle)
        frac = mask.sum() / area
        if config.min_area <= frac <= config.max_area:
            break
    else:
        raise RuntimeError(f"could not place {shape} within the area bounds")
    fg_family = config.textures[int(rng.integers(len(config.textures)))]
    bg_family = config.textures[int(rng.integers(len(config.textures)))]
    fg = _texture(fg_family, rng, (h, w))
    for _ in range(100):
        bg = _texture(bg_family, rng, (h, w))
        if np.abs(fg.mean((0, 1)) - bg.mean((0, 1))).max() >= config.min_contrast:
            break
    img = np.where(mask[..., None] > 0, fg, bg)
    img = img + rng.normal(0.0, config.noise_std, img.shape)
    img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return img, mask, fg_family, bg_family


def _atomic_write_bytes(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _png_bytes(arr: np.ndarray, mode: str) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def generate_synthetic_dataset(config: SynthConfig, out_path) -> SegDataset:
    """Write the shape-vs-texture benchmark to ``out_path`` and load it back.

    Each image holds one class-defining shape filled with a random texture
    over an independently textured background; texture families are drawn
    independently of the class, so only shape identifies it.
    """
    root = Path(out_path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    textures = {}
    for ci, cid in enumerate(config.shape_classes):
        rows = []
        for i in range(config.images_per_class):
            img, mask, fg, bg = render_sample(config, ci, i)
            name = f"{i:04d}.png"
            _atomic_write_bytes(root / "images" / cid / name, _png_bytes(img, "RGB"))
            _atomic_write_bytes(root / "masks" / cid / name, _png_bytes(mask * 255, "L"))
            rows.append({"image": name, "foreground": fg, "background": bg})
        textures[cid] = rows
    index = {
        "classes": [{"id": c, "images": config.images_per_class} for c in config.shape_classes],
        "image_size": list(config.image_size),
    }
    _atomic_write_bytes(root / "classes.json", json.dumps(index, indent=2).encode())
    meta = {"generator": "dogseg.synthetic", "license": "CC0 (procedurally generated)", "config": _config_dict(config),
            "textures": textures}
    _atomic_write_bytes(root / "textures.json", json.dumps(meta, indent=2, sort_keys=True).encode())
    return load_dataset(root)


def _config_dict(config: SynthConfig) -> dict:
    d = asdict(config)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def texture_table(root) -> list[tuple[str, str]]:
    """(class, foreground texture family) rows from a generated dataset."""
    meta = json.loads((Path(root) / "textures.json").read_text())
    return [(cid, row["foreground"]) for cid, rows in sorted(meta["textures"].items()) for row in rows]
