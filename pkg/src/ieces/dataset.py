"""Datasets: procedural signs, GTSRB on-disk format, and a plain directory layout."""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import bilinear_sample, rotate, scale_resize
from .image import CLEAN, IMAGE_SHAPE, PPMError, SignImage, read_pnm, write_ppm

SHAPES = ("circle", "triangle", "octagon", "square", "diamond")
COLOURS = ("red", "blue", "yellow")
GLYPHS = ("digit", "arrow", "bar")
MAX_CLASSES = len(SHAPES) * len(COLOURS) * len(GLYPHS)

BACKGROUND = np.array([0.55, 0.58, 0.55])
# scene tint per glyph, a second cue beside the small glyph itself
BACKGROUNDS = {
    "digit": BACKGROUND,
    "arrow": np.array([0.22, 0.38, 0.24]),
    "bar": np.array([0.62, 0.76, 0.92]),
}
WHITE = np.array([0.97, 0.97, 0.97])
BLACK = np.array([0.05, 0.05, 0.05])
# rim, fill, glyph
PALETTES = {
    "red": (np.array([0.80, 0.08, 0.10]), WHITE, BLACK),
    "blue": (WHITE, np.array([0.04, 0.18, 0.62]), WHITE),
    "yellow": (BLACK, np.array([0.98, 0.80, 0.10]), BLACK),
}
GTSRB_HEADER = ["Filename", "Width", "Height", "Roi.X1", "Roi.Y1", "Roi.X2", "Roi.Y2", "ClassId"]


class DatasetError(ValueError):
    """Malformed or inconsistent data on disk."""


@dataclass
class DatasetSplit:
    train: list[SignImage]
    val: list[SignImage]
    test: list[SignImage]
    num_classes: int
    class_names: list[str] = field(default_factory=list)
    seed: int | None = None

    def __post_init__(self):
        ids = [im.source_id for part in (self.train, self.val, self.test) for im in part]
        dupes = [k for k, v in Counter(ids).items() if v > 1]
        if dupes:
            raise DatasetError(f"splits overlap on source ids, e.g. {dupes[:3]}")
        missing = set(range(self.num_classes)) - {im.class_id for im in self.train}
        if self.train and missing:
            raise DatasetError(f"classes {sorted(missing)} have no training images")
        if not self.class_names:
            self.class_names = [f"class_{c:05d}" for c in range(self.num_classes)]

    def histogram(self, part: str) -> list[int]:
        counts = Counter(im.class_id for im in getattr(self, part))
        return [counts.get(c, 0) for c in range(self.num_classes)]

    def manifest_lines(self) -> list[str]:
        """``source_id<TAB>split<TAB>class_id`` for every image."""
        lines = []
        for part in ("train", "val", "test"):
            lines.extend(f"{im.source_id}\t{part}\t{im.class_id}" for im in getattr(self, part))
        return lines

    def write_manifest(self, path) -> None:
        header = [f"# seed={self.seed}"]
        for part in ("train", "val", "test"):
            header.append(f"# {part}_histogram=" + ",".join(map(str, self.histogram(part))))
        Path(path).write_text("\n".join(header + self.manifest_lines()) + "\n", encoding="utf-8")


@dataclass
class TemplateSet:
    images: list[SignImage]

    def __post_init__(self):
        for c, im in enumerate(self.images):
            if im.class_id != c:
                raise DatasetError(f"template slot {c} holds class {im.class_id}")
            if im.tag != CLEAN:
                raise DatasetError(f"template for class {c} is not clean")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, c: int) -> SignImage:
        return self.images[c]

    def __iter__(self):
        return iter(self.images)

    def pixels(self) -> np.ndarray:
        return np.stack([im.pixels for im in self.images])


def normalize(raw: np.ndarray) -> np.ndarray:
    """8-bit C x H x W pixels -> float64 3x48x48 in [0, 1]."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[0] != 3:
        raise ValueError(f"expected 3-channel C x H x W pixels, got shape {raw.shape}")
    return scale_resize(raw.astype(np.float64) / 255.0, IMAGE_SHAPE[1])


# ---------------------------------------------------------------------------
# procedural signs
# ---------------------------------------------------------------------------

def archetype(index: int) -> tuple[str, str, str]:
    """(shape, colour, glyph) for class ``index``; neighbouring classes differ in shape and colour."""
    if not 0 <= index < MAX_CLASSES:
        raise ValueError(f"archetype index must be in [0, {MAX_CLASSES}), got {index}")
    shape = SHAPES[index % 5]
    colour = COLOURS[index % 3]
    glyph = GLYPHS[(index // 15 + (index % 15) // 5) % 3]
    return shape, colour, glyph


def _polygon(n: int, radius: float, start_deg: float) -> np.ndarray:
    ang = np.radians(start_deg + 360.0 * np.arange(n) / n)
    return np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)


def _inside_convex(u: np.ndarray, v: np.ndarray, poly: np.ndarray) -> np.ndarray:
    inside = np.ones(u.shape, dtype=bool)
    for (x0, y0), (x1, y1) in zip(poly, np.roll(poly, -1, axis=0)):
        inside &= (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= 0
    return inside


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray, radius: float) -> np.ndarray:
    if shape == "circle":
        return u * u + v * v <= radius * radius
    if shape == "triangle":
        return _inside_convex(u, v + 0.2 * radius, _polygon(3, 1.25 * radius, 90))
    if shape == "octagon":
        return _inside_convex(u, v, _polygon(8, radius, 22.5))
    if shape == "square":
        return _inside_convex(u, v, _polygon(4, radius * 1.2, 45))
    return _inside_convex(u, v, _polygon(4, radius * 1.1, 0))


def _box(u, v, x0, x1, y0, y1):
    return (u >= x0) & (u <= x1) & (v >= y0) & (v <= y1)


def _glyph_mask(glyph: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Glyph in a unit box; the three glyphs overlap as little as possible."""
    if glyph == "bar":
        return _box(u, v, -0.6, 0.6, -0.17, 0.17)
    if glyph == "arrow":
        shaft = _box(u, v, -0.13, 0.13, -0.6, 0.05)
        head = _inside_convex(u, v, np.array([[-0.4, 0.05], [0.4, 0.05], [0.0, 0.6]]))
        return shaft | head
    # a blocky zero: hollow upright rectangle
    return _box(u, v, -0.42, 0.42, -0.6, 0.6) & ~_box(u, v, -0.22, 0.22, -0.42, 0.42)


# glyph (scale, vertical offset) so it sits inside each shape's face
GLYPH_FIT = {"circle": (1.0, 0.0), "triangle": (0.62, -0.17), "octagon": (1.0, 0.0),
             "square": (1.0, 0.0), "diamond": (0.85, 0.0)}


def render_template(index: int, size: int = 48, supersample: int = 4) -> np.ndarray:
    """Clean 3 x size x size rendering of archetype ``index``."""
    shape, colour, glyph = archetype(index)
    rim, fill, ink = PALETTES[colour]
    if shape == "octagon":
        # solid plate with the glyph cut out, stop-sign style
        fill, ink = rim, fill
    n = size * supersample
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    v, u = np.meshgrid(-coords, coords, indexing="ij")  # v grows upwards
    outer = _shape_mask(shape, u, v, 0.92)
    inner = _shape_mask(shape, u, v, 0.76)
    scale, offset = GLYPH_FIT[shape]
    glyph_px = _glyph_mask(glyph, u / (0.76 * scale), (v - offset) / (0.76 * scale)) & inner
    img = np.empty((3, n, n))
    img[:] = BACKGROUNDS[glyph][:, None, None]
    for mask, col in ((outer, rim), (inner, fill), (glyph_px, ink)):
        img[:, mask] = col[:, None]
    return img.reshape(3, size, supersample, size, supersample).mean(axis=(2, 4))


def _shift(pixels: np.ndarray, dy: float, dx: float) -> np.ndarray:
    _, h, w = pixels.shape
    rr, cc = np.meshgrid(np.arange(h) - dy, np.arange(w) - dx, indexing="ij")
    return bilinear_sample(pixels, rr, cc)


def _stratified(per_class: int) -> tuple[int, int, int]:
    n_train = int(round(0.7 * per_class))
    n_val = int(round(0.1 * per_class))
    if per_class >= 3:
        n_val = max(n_val, 1)
        n_train = min(n_train, per_class - n_val - 1)
    return n_train, n_val, per_class - n_train - n_val


def gen_synthetic(classes: int, per_class: int, seed: int = 0, noise: float = 0.02,
                  max_rotation: float = 5.0, max_shift: float = 0.5) -> tuple[DatasetSplit, TemplateSet]:
    """Render ``classes`` archetypes and ``per_class`` jittered noisy samples of each (70/10/20 split)."""
    if classes < 2 or per_class < 2:
        raise ValueError("need at least 2 classes and 2 samples per class")
    if classes > MAX_CLASSES:
        raise ValueError(f"only {MAX_CLASSES} archetypes exist, asked for {classes}")
    rng = np.random.default_rng(seed)
    templates, names = [], []
    parts: dict[str, list[SignImage]] = {"train": [], "val": [], "test": []}
    n_train, n_val, _ = _stratified(per_class)
    for c in range(classes):
        clean = render_template(c)
        names.append("-".join(archetype(c)))
        templates.append(SignImage(clean, c, CLEAN, f"synthetic/template/{c}"))
        for i in range(per_class):
            angle = rng.uniform(-max_rotation, max_rotation)
            dy, dx = rng.uniform(-max_shift, max_shift, size=2)
            px = rotate(SignImage(clean, c), angle).pixels
            px = _shift(px, dy, dx) + rng.normal(0.0, noise, size=px.shape)
            part = "train" if i < n_train else "val" if i < n_train + n_val else "test"
            parts[part].append(SignImage(np.clip(px, 0.0, 1.0), c, CLEAN, f"synthetic/c{c}/{i}"))
    split = DatasetSplit(parts["train"], parts["val"], parts["test"], classes, names, seed)
    return split, TemplateSet(templates)


# ---------------------------------------------------------------------------
# GTSRB
# ---------------------------------------------------------------------------

def _read_annotations(csv_path: Path) -> list[tuple[int, dict[str, str]]]:
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=";")
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{csv_path}: empty annotation file") from None
        header = [h.strip() for h in header]
        missing = [h for h in GTSRB_HEADER if h not in header]
        if missing:
            raise DatasetError(f"{csv_path}: header lacks columns {missing}")
        rows = []
        for row in reader:
            if not row or all(not cell.strip() for cell in row):
                continue
            line = reader.line_num
            if len(row) != len(header):
                raise DatasetError(f"{csv_path}:{line}: expected {len(header)} fields, got {len(row)}")
            rows.append((line, dict(zip(header, (cell.strip() for cell in row)))))
    return rows


def _gtsrb_image(folder: Path, csv_path: Path, line: int, rec: dict[str, str], source_prefix: str):
    try:
        width, height = int(rec["Width"]), int(rec["Height"])
        x1, y1, x2, y2 = (int(rec[k]) for k in ("Roi.X1", "Roi.Y1", "Roi.X2", "Roi.Y2"))
        class_id = int(rec["ClassId"])
    except ValueError as exc:
        raise DatasetError(f"{csv_path}:{line}: malformed numeric field ({exc})") from None
    path = folder / rec["Filename"]
    if not path.is_file():
        raise DatasetError(f"{csv_path}:{line}: missing image file {path}")
    try:
        raw = read_pnm(path)
    except PPMError as exc:
        raise DatasetError(str(exc)) from None
    h, w = raw.shape[1:]
    if (w, h) != (width, height):
        raise DatasetError(f"{csv_path}:{line}: {path.name} is {w}x{h} on disk but annotated as {width}x{height}")
    if not (0 <= x1 <= x2 < w and 0 <= y1 <= y2 < h):
        raise DatasetError(f"{csv_path}:{line}: ROI ({x1},{y1})-({x2},{y2}) outside {w}x{h} image")
    crop = raw[:, y1:y2 + 1, x1:x2 + 1]
    return SignImage(normalize(crop), class_id, CLEAN, f"{source_prefix}/{path.name}"), w * h


def _find_dir(root: Path, names: tuple[str, ...]) -> Path | None:
    for name in names:
        if (root / name).is_dir():
            return root / name
    return None


def _carve_validation(train: list[SignImage], fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train))
    n_val = int(round(fraction * len(train)))
    val_idx = set(order[:n_val].tolist())
    return ([im for i, im in enumerate(train) if i not in val_idx],
            [im for i, im in enumerate(train) if i in val_idx])


def load_gtsrb(root, seed: int = 0, val_fraction: float = 0.2, templates_dir=None) -> tuple[DatasetSplit, TemplateSet]:
    """Read a GTSRB-style tree.

    Training images live in per-class folders (each with a ``*.csv``) under
    ``Final_Training/Images``, ``Train`` or ``train``; an optional test folder
    (``Final_Test/Images``, ``Test`` or ``test``) holds images plus one CSV with
    a ClassId column.  Validation is carved from training only.
    """
    root = Path(root)
    train_dir = _find_dir(root, ("Final_Training/Images", "Train", "train"))
    if train_dir is None:
        raise DatasetError(f"{root}: no GTSRB training directory found")
    train, best = [], {}
    class_dirs = sorted(p for p in train_dir.iterdir() if p.is_dir())
    for folder in class_dirs:
        try:
            dir_class = int(folder.name)
        except ValueError:
            raise DatasetError(f"{folder}: class directory name is not an integer") from None
        for csv_path in sorted(folder.glob("*.csv")):
            for line, rec in _read_annotations(csv_path):
                im, area = _gtsrb_image(folder, csv_path, line, rec, f"gtsrb/train/{folder.name}")
                if im.class_id != dir_class:
                    raise DatasetError(f"{csv_path}:{line}: ClassId {im.class_id} inside class directory {folder.name}")
                train.append(im)
                if im.class_id not in best or area > best[im.class_id][0]:
                    best[im.class_id] = (area, im)
    if not train:
        raise DatasetError(f"{train_dir}: no annotated training images")
    num_classes = max(best) + 1
    absent = sorted(set(range(num_classes)) - set(best))
    if absent:
        raise DatasetError(f"{train_dir}: no training images for classes {absent}")

    test = []
    test_dir = _find_dir(root, ("Final_Test/Images", "Test", "test"))
    if test_dir is not None:
        for csv_path in sorted(test_dir.glob("*.csv")):
            for line, rec in _read_annotations(csv_path):
                im, _ = _gtsrb_image(test_dir, csv_path, line, rec, "gtsrb/test")
                if not 0 <= im.class_id < num_classes:
                    raise DatasetError(f"{csv_path}:{line}: unknown class id {im.class_id}")
                test.append(im)

    train, val = _carve_validation(train, val_fraction, seed)
    split = DatasetSplit(train, val, test, num_classes, seed=seed)
    if templates_dir is not None:
        return split, _load_templates(Path(templates_dir), num_classes)
    templates = [SignImage(best[c][1].pixels, c, CLEAN, best[c][1].source_id) for c in range(num_classes)]
    return split, TemplateSet(templates)


# ---------------------------------------------------------------------------
# generic directory layout
# ---------------------------------------------------------------------------

def _load_templates(folder: Path, num_classes: int) -> TemplateSet:
    images = []
    for c in range(num_classes):
        candidates = [folder / f"{c}.ppm", folder / f"{c:05d}.ppm"]
        path = next((p for p in candidates if p.is_file()), None)
        if path is None:
            raise DatasetError(f"class {c} has no template in {folder}")
        images.append(SignImage(normalize(read_pnm(path)), c, CLEAN, f"template/{path.name}"))
    return TemplateSet(images)


def load_directory(root, seed: int | None = None) -> tuple[DatasetSplit, TemplateSet]:
    """Read ``root/{train,val,test}/<class_id>/*.ppm`` plus ``root/templates/<class_id>.ppm``."""
    root = Path(root)
    parts: dict[str, list[SignImage]] = {}
    seen: set[int] = set()
    for part in ("train", "val", "test"):
        images = []
        folder = root / part
        if folder.is_dir():
            for class_dir in sorted(p for p in folder.iterdir() if p.is_dir()):
                try:
                    c = int(class_dir.name)
                except ValueError:
                    raise DatasetError(f"{class_dir}: class directory name is not an integer") from None
                seen.add(c)
                for path in sorted(class_dir.glob("*.ppm")):
                    try:
                        raw = read_pnm(path)
                    except PPMError as exc:
                        raise DatasetError(str(exc)) from None
                    images.append(SignImage(normalize(raw), c, CLEAN, f"{part}/{class_dir.name}/{path.name}"))
        parts[part] = images
    if not seen:
        raise DatasetError(f"{root}: no class directories under train/val/test")
    num_classes = max(seen) + 1
    tdir = root / "templates"
    for c in sorted(seen):
        if not any((tdir / name).is_file() for name in (f"{c}.ppm", f"{c:05d}.ppm")):
            raise DatasetError(f"class {c} appears in the data but has no template under {tdir}")
    templates = _load_templates(tdir, num_classes)
    return DatasetSplit(parts["train"], parts["val"], parts["test"], num_classes, seed=seed), templates


def save_directory(root, split: DatasetSplit, templates: TemplateSet) -> None:
    """Write a dataset in the layout :func:`load_directory` reads (8-bit quantised)."""
    root = Path(root)
    for part in ("train", "val", "test"):
        (root / part).mkdir(parents=True, exist_ok=True)
        for i, im in enumerate(getattr(split, part)):
            folder = root / part / str(im.class_id)
            folder.mkdir(exist_ok=True)
            write_ppm(folder / f"{i:06d}.ppm", im.pixels)
    (root / "templates").mkdir(parents=True, exist_ok=True)
    for im in templates:
        write_ppm(root / "templates" / f"{im.class_id}.ppm", im.pixels)


def resolve_data(spec: str, seed: int = 0, templates_dir=None) -> tuple[DatasetSplit, TemplateSet]:
    """``synthetic:C,n``, a GTSRB tree, or the plain directory layout."""
    if templates_dir is not None and (spec.startswith("synthetic:") or (Path(spec) / "templates").is_dir()):
        raise DatasetError("a templates folder only applies to GTSRB data; this source brings its own templates")
    if spec.startswith("synthetic:"):
        try:
            c, n = (int(x) for x in spec.split(":", 1)[1].split(","))
        except ValueError:
            raise DatasetError(f"bad synthetic spec {spec!r}, expected synthetic:C,n") from None
        try:
            return gen_synthetic(c, n, seed)
        except ValueError as exc:
            raise DatasetError(str(exc)) from None
    root = Path(spec)
    if not root.is_dir():
        raise DatasetError(f"data path {root} does not exist")
    if (root / "templates").is_dir() and (root / "train").is_dir() and not any((root / "train").glob("*/*.csv")):
        return load_directory(root, seed)
    return load_gtsrb(root, seed, templates_dir=templates_dir)


def template_gap(templates: TemplateSet) -> float:
    """Smallest mean absolute pixel difference between any two templates."""
    px = templates.pixels()
    best = math.inf
    for i in range(len(px)):
        for j in range(i + 1, len(px)):
            best = min(best, float(np.abs(px[i] - px[j]).mean()))
    return best


__all__ = [
    "DatasetError", "DatasetSplit", "TemplateSet", "gen_synthetic", "load_gtsrb", "load_directory",
    "normalize", "render_template", "archetype", "resolve_data", "save_directory",
]
