"""Cave scene samples: palette-coded masks, dataset splits and a synthetic generator."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import DataError, FormatError, ParameterError
from .tensor import bilinear_matrix

IGNORE_INDEX = 255

CLASS_NAMES = (
    "caveline",
    "first_layer",
    "second_layer",
    "open_area",
    "ground_plane",
    "diver",
    "arrow",
    "cookie",
    "reel",
    "attachment_rock",
    "stalactite",
    "stalagmite",
    "column",
)


@dataclass(frozen=True)
class ClassPalette:
    names: tuple
    colors: tuple  # one (r, g, b) per class id
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if len(self.names) != len(self.colors):
            raise FormatError("palette needs one colour per class name")
        if len(set(map(tuple, self.colors))) != len(self.colors):
            raise FormatError("palette colours must be pairwise distinct")
        if len(self.names) > self.ignore_index:
            raise FormatError(f"too many classes for ignore index {self.ignore_index}")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def color_array(self) -> np.ndarray:
        return np.array(self.colors, dtype=np.uint8)

    def class_id(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ParameterError(f"unknown class {name!r}") from None


def load_palette(path: Optional[os.PathLike] = None) -> ClassPalette:
    """Read ``id name r g b`` lines; ``None`` loads the bundled default palette."""
    if path is None:
        text = resources.files("caveseg").joinpath("palette.txt").read_text()
        where = "bundled palette"
    else:
        text = Path(path).read_text()
        where = str(path)
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise FormatError(f"{where}:{lineno}: expected 'id name r g b', got {line!r}")
        cid, name, *rgb = parts
        try:
            cid_i, color = int(cid), tuple(int(v) for v in rgb)
        except ValueError:
            raise FormatError(f"{where}:{lineno}: non-integer id or colour") from None
        if any(not 0 <= v <= 255 for v in color):
            raise FormatError(f"{where}:{lineno}: colour {color} out of 0..255")
        rows.append((cid_i, name, color))
    rows.sort()
    if [r[0] for r in rows] != list(range(len(rows))):
        raise FormatError(f"{where}: class ids must be contiguous from 0")
    return ClassPalette(tuple(r[1] for r in rows), tuple(r[2] for r in rows))


def save_palette(palette: ClassPalette, path: os.PathLike) -> None:
    lines = ["# id name r g b"]
    lines += [f"{i} {n} {c[0]} {c[1]} {c[2]}" for i, (n, c) in enumerate(zip(palette.names, palette.colors))]
    Path(path).write_text("\n".join(lines) + "\n")


DEFAULT_PALETTE = load_palette()


# ----------------------------------------------------------------------------
# samples and masks
# ----------------------------------------------------------------------------


@dataclass
class SegmentationSample:
    image: np.ndarray  # H x W x 3 uint8
    labels: np.ndarray  # H x W class ids, IGNORE_INDEX allowed
    source_id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"{self.source_id}: image must be H x W x 3, got {self.image.shape}")
        if self.labels.shape != self.image.shape[:2]:
            raise DataError(f"{self.source_id}: labels {self.labels.shape} do not match image {self.image.shape[:2]}")

    @property
    def shape(self) -> tuple:
        return self.labels.shape


def _pack(rgb: np.ndarray) -> np.ndarray:
    rgb = rgb.astype(np.int64)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]


def decode_mask(mask: np.ndarray, palette: ClassPalette = DEFAULT_PALETTE,
                ignore_color: Optional[tuple] = None) -> np.ndarray:
    """Map an ``H x W x 3`` colour mask to class ids (exact colour match)."""
    mask = np.asarray(mask)
    if mask.ndim != 3 or mask.shape[2] != 3:
        raise DataError(f"colour mask must be H x W x 3, got {mask.shape}")
    keys = _pack(mask)
    table = _pack(palette.color_array())
    ids = np.arange(palette.num_classes)
    if ignore_color is not None:
        table = np.append(table, _pack(np.array(ignore_color)))
        ids = np.append(ids, palette.ignore_index)
    order = np.argsort(table)
    table, ids = table[order], ids[order]
    pos = np.clip(np.searchsorted(table, keys), 0, len(table) - 1)
    hit = table[pos] == keys
    if not hit.all():
        bad, counts = np.unique(keys[~hit], return_counts=True)
        listing = ", ".join(f"({k >> 16}, {(k >> 8) & 255}, {k & 255}) x {n}px" for k, n in zip(bad[:8], counts[:8]))
        raise DataError(f"mask contains colours outside the palette: {listing}")
    return ids[pos].astype(np.uint8)


def encode_mask(labels: np.ndarray, palette: ClassPalette = DEFAULT_PALETTE,
                ignore_color: Optional[tuple] = None) -> np.ndarray:
    """Inverse of :func:`decode_mask`."""
    labels = np.asarray(labels)
    colors = palette.color_array()
    ignored = labels == palette.ignore_index
    valid = ~ignored
    if ((labels[valid] < 0) | (labels[valid] >= palette.num_classes)).any():
        raise DataError(f"labels outside 0..{palette.num_classes - 1}")
    if ignored.any() and ignore_color is None:
        raise DataError("labels contain ignore_index but no ignore_color was given")
    out = np.zeros(labels.shape + (3,), dtype=np.uint8)
    out[valid] = colors[labels[valid].astype(np.int64)]
    if ignored.any():
        out[ignored] = np.array(ignore_color, dtype=np.uint8)
    return out


def read_image(path: os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def write_png(path: os.PathLike, array: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(array)).save(path, format="PNG")


def read_mask(path: os.PathLike, palette: ClassPalette = DEFAULT_PALETTE) -> np.ndarray:
    """Indexed (``P``) or greyscale PNGs are read as class ids; RGB via the palette."""
    with Image.open(path) as im:
        if im.mode in ("P", "L"):
            ids = np.array(im)
            bad = (ids >= palette.num_classes) & (ids != palette.ignore_index)
            if bad.any():
                raise DataError(f"{path}: index values {sorted(set(ids[bad].tolist()))[:8]} outside the palette")
            return ids.astype(np.uint8)
        return decode_mask(np.array(im.convert("RGB")), palette)


def load_sample(root: os.PathLike, sample_id: str, palette: ClassPalette = DEFAULT_PALETTE) -> SegmentationSample:
    root = Path(root)
    image = read_image(root / "images" / f"{sample_id}.png")
    labels = read_mask(root / "masks" / f"{sample_id}.png", palette)
    return SegmentationSample(image, labels, sample_id)


def list_sample_ids(root: os.PathLike) -> list:
    """Ids present in both ``images/`` and ``masks/`` (sorted)."""
    root = Path(root)
    if not (root / "images").is_dir() or not (root / "masks").is_dir():
        raise FileNotFoundError(f"{root}: expected images/ and masks/ subdirectories")
    images = {p.stem for p in (root / "images").glob("*.png")}
    masks = {p.stem for p in (root / "masks").glob("*.png")}
    return sorted(images & masks)


def save_sample(root: os.PathLike, sample: SegmentationSample, palette: ClassPalette = DEFAULT_PALETTE) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    write_png(root / "images" / f"{sample.source_id}.png", sample.image)
    write_png(root / "masks" / f"{sample.source_id}.png", encode_mask(sample.labels, palette))


# ----------------------------------------------------------------------------
# splits
# ----------------------------------------------------------------------------


SPLIT_NAMES = ("train", "val", "test")


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int = 0

    def __getitem__(self, name: str) -> list:
        if name not in SPLIT_NAMES:
            raise KeyError(name)
        return getattr(self, name)


def split_sizes(n: int) -> tuple:
    """85:5:10 with floors for train/val and the remainder going to test."""
    train = (85 * n) // 100
    val = (5 * n) // 100
    return train, val, n - train - val


def split_dataset(samples: Sequence, seed: int = 0) -> DatasetSplit:
    n = len(samples)
    if n < 3:
        raise ParameterError(f"need at least 3 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train, n_val, _ = split_sizes(n)
    pick = [samples[i] for i in order]
    return DatasetSplit(pick[:n_train], pick[n_train:n_train + n_val], pick[n_train + n_val:], seed)


def write_manifest(split: DatasetSplit, path: os.PathLike) -> None:
    """One ``split<TAB>id`` line per sample; list entries may be ids or samples."""
    lines = [f"# seed {split.seed}"]
    for name in SPLIT_NAMES:
        for item in split[name]:
            sid = item.source_id if isinstance(item, SegmentationSample) else str(item)
            lines.append(f"{name}\t{sid}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: os.PathLike) -> DatasetSplit:
    parts = {name: [] for name in SPLIT_NAMES}
    seed = 0
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.startswith("# seed"):
            seed = int(line.split()[-1])
            continue
        if not line.strip() or line.startswith("#"):
            continue
        try:
            name, sid = line.split("\t")
        except ValueError:
            raise FormatError(f"{path}:{lineno}: expected 'split<TAB>id'") from None
        if name not in parts:
            raise FormatError(f"{path}:{lineno}: unknown split {name!r}")
        parts[name].append(sid)
    return DatasetSplit(parts["train"], parts["val"], parts["test"], seed)


# ----------------------------------------------------------------------------
# resizing
# ----------------------------------------------------------------------------


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def resize_pair(sample: SegmentationSample, out_h: int, out_w: int) -> SegmentationSample:
    """Bilinear image, nearest-neighbour labels (class ids never blend)."""
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"resize target {out_h}x{out_w} must be positive")
    h, w = sample.shape
    if (h, w) == (out_h, out_w):
        return SegmentationSample(sample.image.copy(), sample.labels.copy(), sample.source_id)
    rows, cols = bilinear_matrix(h, out_h), bilinear_matrix(w, out_w)
    img = np.einsum("ih,hwc,jw->ijc", rows, sample.image.astype(np.float64), cols)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    labels = sample.labels[np.ix_(nearest_indices(h, out_h), nearest_indices(w, out_w))]
    return SegmentationSample(img, labels, sample.source_id)


# ----------------------------------------------------------------------------
# synthetic scenes
# ----------------------------------------------------------------------------

# dim, blue-green shifted versions of the palette colours
_TINT = np.array([10.0, 50.0, 70.0])


def signature_colors(palette: ClassPalette = DEFAULT_PALETTE) -> np.ndarray:
    return 0.65 * palette.color_array().astype(np.float64) + _TINT


DEFAULT_SYNTHETIC_CLASSES = ("first_layer", "ground_plane", "diver")
MAX_CAVELINE_FRACTION = 0.05


def _polyline(rng, h, w):
    xs = [0, int(rng.integers(w // 3, 2 * w // 3 + 1)), w - 1]
    ys = [int(rng.integers(int(0.2 * h), int(0.8 * h) + 1)) for _ in xs]
    return list(zip(xs, ys))


def generate_synthetic(seed: int, h: int = 64, w: int = 64,
                       classes: Iterable[str] = DEFAULT_SYNTHETIC_CLASSES,
                       palette: ClassPalette = DEFAULT_PALETTE, noise: float = 6.0,
                       source_id: Optional[str] = None) -> SegmentationSample:
    """Deterministic cave-like scene.

    Open-area background, one rectangle or ellipse per requested obstacle class
    (each in its own vertical strip so none is fully hidden) and a 1-3 px
    caveline polyline drawn on top. Pixels are coloured by a per-class
    signature plus Gaussian noise.
    """
    classes = list(dict.fromkeys(classes))
    if not classes:
        raise ParameterError("class subset must not be empty")
    if h < 16 or w < 16:
        raise ParameterError(f"synthetic scenes need h, w >= 16, got {h}x{w}")
    ids = [palette.class_id(c) for c in classes]
    caveline, background = palette.class_id("caveline"), palette.class_id("open_area")
    shapes = [i for i in ids if i not in (caveline, background)]
    rng = np.random.default_rng(seed)

    canvas = Image.new("L", (w, h), background)
    draw = ImageDraw.Draw(canvas)
    centers = []
    strip = w / max(len(shapes), 1)
    for k, cid in enumerate(shapes):
        sw = max(2.0, strip * rng.uniform(0.55, 0.95))
        sh = max(2.0, h * rng.uniform(0.3, 0.6))
        cx = strip * (k + 0.5) + rng.uniform(-0.5, 0.5) * (strip - sw) / 2
        cy = rng.uniform(sh / 2, h - sh / 2)
        box = [cx - sw / 2, cy - sh / 2, cx + sw / 2 - 1, cy + sh / 2 - 1]
        (draw.ellipse if rng.random() < 0.5 else draw.rectangle)(box, fill=cid)
        centers.append((cid, int(round(cx)), int(round(cy))))

    points = _polyline(rng, h, w)
    width = int(rng.integers(1, 4))
    while True:
        layer = Image.new("L", (w, h), 0)
        ImageDraw.Draw(layer).line(points, fill=1, width=width)
        line = np.array(layer, dtype=bool)
        if line.mean() < MAX_CAVELINE_FRACTION:
            break
        if width > 1:
            width -= 1
        else:
            # small canvases: shorten the line towards its middle vertex
            mx, my = points[1]
            points = [(round(mx + 0.8 * (x - mx)), round(my + 0.8 * (y - my))) for x, y in points]
    labels = np.array(canvas, dtype=np.uint8)
    labels[line] = caveline
    for cid, cx, cy in centers:
        if not (labels == cid).any():
            labels[min(max(cy, 0), h - 1), min(max(cx, 0), w - 1)] = cid

    image = signature_colors(palette)[labels] + rng.normal(0.0, noise, size=(h, w, 3))
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return SegmentationSample(image, labels, source_id or f"synthetic_{seed:05d}")


def synthetic_dataset(n: int, seed: int = 0, h: int = 64, w: int = 64,
                      classes: Iterable[str] = DEFAULT_SYNTHETIC_CLASSES) -> list:
    classes = tuple(classes)
    return [generate_synthetic(seed * 100003 + i, h, w, classes) for i in range(n)]
