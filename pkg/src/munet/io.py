"""On-disk formats for mosaics, label maps, class tables and manifests."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .types import ClassTable, LabelMap, Mosaic, UNLABELED


def read_mosaic(path: str | os.PathLike, resolution: float = 4.0) -> Mosaic:
    """Load a single-channel 8- or 16-bit PNG/TIFF as intensities in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA", "P", "CMYK", "LA"):
            raise ValueError(f"{path}: expected a single-channel image, got mode {im.mode}")
        arr = np.array(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel image")
    if arr.dtype == np.uint8:
        px = arr.astype(np.float32) / 255.0
    elif arr.dtype in (np.uint16, np.int32, np.int16) or im.mode.startswith("I"):
        px = arr.astype(np.float32) / 65535.0
    elif arr.dtype == bool:
        px = arr.astype(np.float32)
    else:
        px = np.clip(arr.astype(np.float32), 0.0, 1.0)
    return Mosaic(px, resolution=resolution)


def write_mosaic(path: str | os.PathLike, mosaic: Mosaic, bits: int = 16) -> None:
    px = mosaic.pixels
    if bits == 8:
        Image.fromarray(np.round(px * 255.0).astype(np.uint8), mode="L").save(path)
    elif bits == 16:
        arr = np.round(px.astype(np.float64) * 65535.0).astype(np.uint16)
        Image.fromarray(arr).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


def read_labels(path: str | os.PathLike, num_classes: int = 6) -> LabelMap:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError(f"{path}: label files must be 8-bit single-channel")
    return LabelMap(arr, num_classes=num_classes)


def write_labels(path: str | os.PathLike, labels: LabelMap, table: ClassTable | None = None) -> None:
    """Write an indexed PNG; pixel value is the class index, 255 is UNLABELED."""
    im = Image.fromarray(np.asarray(labels.labels, dtype=np.uint8), mode="P")
    im.putpalette(_palette_bytes(table or ClassTable()))
    im.save(path, optimize=False)


def _palette_bytes(table: ClassTable) -> list[int]:
    rgb = table.rgb_palette()
    pal = np.zeros((256, 3), dtype=np.uint8)
    pal[: table.K] = rgb[: table.K]
    pal[UNLABELED] = rgb[-1]
    return pal.ravel().tolist()


def read_class_table(path: str | os.PathLike) -> ClassTable:
    """Parse ``name #rrggbb`` lines; a final ``unlabeled #rrggbb`` line is required.

    Blank lines and ``#`` comments are ignored.
    """
    names, colors = [], []
    unlabeled = None
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        name, _, color = line.rpartition(" ")
        name = name.strip()
        if not name:
            raise ValueError(f"{path}: malformed line {raw!r}")
        if name.lower() == "unlabeled":
            unlabeled = color
        else:
            names.append(name)
            colors.append(color)
    if unlabeled is None:
        raise ValueError(f"{path}: missing 'unlabeled' palette entry")
    return ClassTable(tuple(names), tuple(colors) + (unlabeled,))


def write_class_table(path: str | os.PathLike, table: ClassTable) -> None:
    lines = [f"{n} {c}" for n, c in zip(table.names, table.palette)]
    lines.append(f"unlabeled {table.palette[-1]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | os.PathLike) -> list[tuple[Path, Path]]:
    """Read ``image_path<TAB>label_path`` lines; relative paths resolve against the manifest."""
    root = Path(path).parent
    pairs = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}: expected two paths per line, got {raw!r}")
        pairs.append(tuple(p if p.is_absolute() else root / p for p in map(Path, parts)))
    return pairs


def write_manifest(path: str | os.PathLike, pairs) -> None:
    root = Path(path).parent
    lines = []
    for img, lab in pairs:
        img, lab = Path(img), Path(lab)
        try:
            img, lab = img.relative_to(root), lab.relative_to(root)
        except ValueError:
            pass
        lines.append(f"{img}\t{lab}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(manifest: str | os.PathLike, num_classes: int = 6) -> list[tuple[Mosaic, LabelMap]]:
    return [(read_mosaic(i), read_labels(l, num_classes)) for i, l in read_manifest(manifest)]
