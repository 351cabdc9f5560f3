"""Synthetic confounded SAR-like benchmark, crop masking and manifest ingestion.

A synthetic sample of class ``k`` is a centred silhouette (shape family
``k``) over a procedural background texture.  The texture id equals the
label with probability ``rho`` and is uniform over all ``K`` ids otherwise,
which gives a tunable spurious background/label correlation.  Multiplicative
gamma speckle is applied last.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

__all__ = [
    "Sample",
    "Dataset",
    "SyntheticSpec",
    "ManifestError",
    "SHAPE_LIBRARY",
    "generate_synthetic",
    "render_sample",
    "texture",
    "shape_mask",
    "apply_speckle",
    "center_crop_mask",
    "load_manifest",
    "write_manifest",
    "export_dataset",
    "read_image",
    "write_image",
]

SPLITS = ("train", "test")
_SPLIT_CODE = {"train": 0, "test": 1}

# 4x4 cell silhouettes; each entry is a list of (row, col) cells
SHAPE_LIBRARY: dict[str, list[tuple[int, int]]] = {
    "block": [(1, 1), (1, 2), (2, 1), (2, 2)],
    "ring": [(0, 0), (0, 1), (0, 2), (0, 3), (1, 0), (1, 3), (2, 0), (2, 3), (3, 0), (3, 1), (3, 2), (3, 3)],
    "cross": [(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)],
    "diagonal": [(0, 0), (1, 1), (2, 2), (3, 3)],
    "bar": [(0, 1), (1, 1), (2, 1), (3, 1)],
    "ell": [(0, 0), (1, 0), (2, 0), (2, 1), (2, 2)],
    "tee": [(0, 0), (0, 1), (0, 2), (1, 1), (2, 1)],
    "zigzag": [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3)],
}


@dataclass
class Sample:
    image: np.ndarray  # H x W, single channel, values in [0, 1]
    label: int
    split: str
    fg_mask: Optional[np.ndarray] = None
    bg_id: Optional[int] = None
    path: Optional[str] = None


@dataclass
class Dataset:
    """Column-oriented image set; ``images`` is (N, H, W) float32."""

    images: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    class_names: list[str]
    bg_ids: Optional[np.ndarray] = None
    fg_masks: Optional[np.ndarray] = None
    paths: Optional[list[str]] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=object)
        n = len(self.labels)
        if self.images.shape[0] != n or self.splits.shape[0] != n:
            raise ValueError("images, labels and splits must have the same length")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            image=self.images[i],
            label=int(self.labels[i]),
            split=str(self.splits[i]),
            fg_mask=None if self.fg_masks is None else self.fg_masks[i],
            bg_id=None if self.bg_ids is None else int(self.bg_ids[i]),
            path=None if self.paths is None else self.paths[i],
        )

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            images=self.images[index],
            labels=self.labels[index],
            splits=self.splits[index],
            class_names=list(self.class_names),
            bg_ids=None if self.bg_ids is None else self.bg_ids[index],
            fg_masks=None if self.fg_masks is None else self.fg_masks[index],
            paths=None if self.paths is None else [self.paths[i] for i in np.arange(len(self))[index]],
        )

    def split(self, name: str) -> "Dataset":
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return self.subset(np.flatnonzero(self.splits == name))

    def with_images(self, images: np.ndarray) -> "Dataset":
        return replace(self, images=np.asarray(images, dtype=np.float32))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class SyntheticSpec:
    K: int = 4
    image_size: int = 32
    n_train: int = 500
    n_test: int = 250
    rho: float = 0.95
    rho_test: float = 0.0
    fg_shapes: tuple[str, ...] = ("block", "ring", "cross", "diagonal")
    speckle_looks: float = 16.0
    fg_size: int = 12
    fg_level: float = 0.9
    bg_level: float = 0.3
    bg_contrast: float = 0.1
    jitter: int = 2

    def __post_init__(self):
        self.fg_shapes = tuple(self.fg_shapes)
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if not (0.0 <= self.rho <= 1.0 and 0.0 <= self.rho_test <= 1.0):
            raise ValueError("rho and rho_test must lie in [0, 1]")
        if len(self.fg_shapes) < self.K:
            raise ValueError(f"need {self.K} shape families, got {len(self.fg_shapes)}")
        unknown = [s for s in self.fg_shapes if s not in SHAPE_LIBRARY]
        if unknown:
            raise ValueError(f"unknown shape families {unknown}; choose from {sorted(SHAPE_LIBRARY)}")
        if not 4 <= self.fg_size < self.image_size:
            raise ValueError("fg_size must be at least 4 and smaller than image_size")
        if self.fg_size + 2 * self.jitter > self.image_size:
            raise ValueError("foreground plus jitter does not fit in the image")
        if self.speckle_looks < 1:
            raise ValueError("speckle_looks must be >= 1")
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("sample counts must be non-negative")

    def rho_for(self, split: str) -> float:
        return self.rho if split == "train" else self.rho_test

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fg_shapes"] = list(self.fg_shapes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown synthetic spec keys: {sorted(extra)}")
        return cls(**d)


def _band_centers(K: int) -> np.ndarray:
    # radial frequencies (cycles/pixel) spread over the usable band
    return np.linspace(0.06, 0.42, K)


def texture(tex_id: int, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Band-pass noise around a texture-specific radial frequency."""
    size = spec.image_size
    f = np.fft.fftfreq(size)
    radius = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    center = _band_centers(spec.K)[tex_id]
    band = np.exp(-((radius - center) ** 2) / (2 * 0.03 ** 2))
    noise = rng.standard_normal((size, size))
    field_ = np.real(np.fft.ifft2(np.fft.fft2(noise) * band))
    field_ /= field_.std() + 1e-12
    # keep the background strictly below the foreground level
    return np.clip(spec.bg_level + spec.bg_contrast * field_, 0.0, spec.fg_level - 0.05)


def shape_mask(label: int, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Rotated, jittered silhouette of class ``label``, centred in the image."""
    grid = np.zeros((4, 4), dtype=bool)
    for r, c in SHAPE_LIBRARY[spec.fg_shapes[label]]:
        grid[r, c] = True
    grid = np.rot90(grid, int(rng.integers(4)))
    cell = spec.fg_size // 4
    big = np.kron(grid, np.ones((cell, cell), dtype=bool))
    dy, dx = rng.integers(-spec.jitter, spec.jitter + 1, size=2)
    mask = np.zeros((spec.image_size, spec.image_size), dtype=bool)
    o = (spec.image_size - 4 * cell) // 2
    mask[o + dy:o + dy + 4 * cell, o + dx:o + dx + 4 * cell] = big
    return mask


def apply_speckle(image: np.ndarray, looks: float, seed) -> np.ndarray:
    """Multiply by i.i.d. gamma(shape=looks, mean=1) factors and clip to [0, 1]."""
    if looks < 1:
        raise ValueError("looks must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    image = np.asarray(image)
    factor = rng.gamma(looks, 1.0 / looks, size=image.shape)
    return np.clip(image * factor, 0.0, 1.0).astype(image.dtype if image.dtype.kind == "f" else np.float64)


def render_sample(spec: SyntheticSpec, seed: int, split: str, index: int):
    """Deterministically render one sample.

    Returns ``(image, label, bg_id, fg_mask, background)``, where
    ``background`` is the texture-only render before compositing and speckle.
    Samples are laid out class-major: index ``i`` has label ``i // n_split``.
    """
    n_split = spec.n_train if split == "train" else spec.n_test
    if not 0 <= index < n_split * spec.K:
        raise IndexError(f"index {index} outside split {split!r}")
    label = index // n_split
    rng = np.random.default_rng([int(seed), _SPLIT_CODE[split], int(index)])
    if rng.random() < spec.rho_for(split):
        bg_id = label
    else:
        bg_id = int(rng.integers(spec.K))
    background = texture(bg_id, spec, rng)
    mask = shape_mask(label, spec, rng)
    composite = np.where(mask, spec.fg_level, background)
    image = apply_speckle(composite, spec.speckle_looks, rng).astype(np.float32)
    return image, label, bg_id, mask, background


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> Dataset:
    """Train and test splits with exactly ``n_train`` / ``n_test`` samples per class."""
    images, labels, splits, bg_ids, masks = [], [], [], [], []
    for split in SPLITS:
        n_split = spec.n_train if split == "train" else spec.n_test
        for index in range(n_split * spec.K):
            img, label, bg, mask, _ = render_sample(spec, seed, split, index)
            images.append(img)
            labels.append(label)
            splits.append(split)
            bg_ids.append(bg)
            masks.append(mask)
    size = spec.image_size
    return Dataset(
        images=np.array(images, dtype=np.float32).reshape(-1, size, size),
        labels=np.array(labels, dtype=np.int64),
        splits=np.array(splits, dtype=object),
        class_names=[f"class{k}" for k in range(spec.K)],
        bg_ids=np.array(bg_ids, dtype=np.int64),
        fg_masks=np.array(masks, dtype=bool).reshape(-1, size, size),
    )


def center_crop_mask(image: np.ndarray, crop: int) -> np.ndarray:
    """Zero everything outside the centred ``crop`` x ``crop`` window.

    Acts on the two trailing axes, so a whole (N, H, W) stack can be masked
    at once.  Output shape equals input shape.
    """
    image = np.asarray(image)
    H, W = image.shape[-2:]
    if not 0 < crop <= min(H, W):
        raise ValueError(f"crop {crop} must lie in (0, {min(H, W)}]")
    r0 = (H - crop) // 2
    c0 = (W - crop) // 2
    out = np.zeros_like(image)
    out[..., r0:r0 + crop, c0:c0 + crop] = image[..., r0:r0 + crop, c0:c0 + crop]
    return out


# ---------------------------------------------------------------- image files


class ManifestError(ValueError):
    """A manifest row (or the manifest as a whole) violates the ingestion contract."""


def _read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError("only binary (P5) PGM is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos).reshape(height, width)
    return arr.astype(np.float32) / maxval


def read_image(path) -> np.ndarray:
    """Decode an 8/16-bit grayscale PNG or binary PGM to float32 in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        return _read_pgm(path)
    with Image.open(path) as im:
        if im.mode == "L":
            return np.asarray(im, dtype=np.float32) / 255.0
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im)
            return arr.astype(np.float32) / 65535.0
        raise ValueError(f"{path.name}: expected single-channel image, got mode {im.mode}")


def write_image(path, image: np.ndarray, bits: int = 16) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if bits == 8:
        Image.fromarray(np.round(arr * 255).astype(np.uint8), mode="L").save(path)
    elif bits == 16:
        Image.fromarray(np.round(arr * 65535).astype(np.uint16)).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


def _class_index(names: Sequence[str]) -> dict[str, int]:
    uniq = sorted(set(names))
    if all(n.isdigit() for n in uniq):
        ids = sorted(int(n) for n in uniq)
        if ids != list(range(len(ids))):
            missing = sorted(set(range(max(ids) + 1)) - set(ids))
            raise ManifestError(f"numeric labels are not contiguous from 0; missing {missing}")
        return {str(i): i for i in ids}
    return {name: i for i, name in enumerate(uniq)}


def load_manifest(directory) -> Dataset:
    """Load ``manifest.csv`` (header ``path,label,split``) and the images it lists.

    Images are scaled to [0, 1] by the pixel format's maximum and otherwise
    left untouched.  Errors name the offending data row (1-based, header
    excluded).
    """
    root = Path(directory)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise ManifestError(f"{manifest} not found")
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label", "split"]:
            raise ManifestError(f"{manifest}: header must be 'path,label,split', got {header}")
        rows = [r for r in reader if r]
    if not rows:
        raise ManifestError(f"{manifest}: manifest has no rows")

    seen: dict[str, int] = {}
    for i, row in enumerate(rows, start=1):
        if len(row) != 3:
            raise ManifestError(f"row {i}: expected 3 fields, got {len(row)}")
        rel, _, split = (v.strip() for v in row)
        if split not in SPLITS:
            raise ManifestError(f"row {i}: unknown split {split!r} (expected train or test)")
        if rel in seen:
            raise ManifestError(f"row {i}: duplicate path {rel!r} (first seen in row {seen[rel]})")
        seen[rel] = i

    names = [r[1].strip() for r in rows]
    index = _class_index(names)
    images, labels, splits, paths = [], [], [], []
    shape = None
    for i, row in enumerate(rows, start=1):
        rel, name, split = (v.strip() for v in row)
        path = root / rel
        if not path.is_file():
            raise ManifestError(f"row {i}: file {rel!r} does not exist")
        try:
            img = read_image(path)
        except Exception as exc:  # decoder errors vary by format
            raise ManifestError(f"row {i}: cannot decode {rel!r}: {exc}") from exc
        if img.ndim != 2:
            raise ManifestError(f"row {i}: {rel!r} is not single-channel")
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise ManifestError(f"row {i}: image {rel!r} is {img.shape}, expected {shape}")
        images.append(img)
        labels.append(index[name])
        splits.append(split)
        paths.append(rel)

    class_names = [n for n, _ in sorted(index.items(), key=lambda kv: kv[1])]
    ds = Dataset(
        images=np.stack(images),
        labels=np.array(labels),
        splits=np.array(splits, dtype=object),
        class_names=class_names,
        paths=paths,
    )
    _attach_meta(root, ds)
    return ds


def _attach_meta(root: Path, ds: Dataset) -> None:
    meta = root / "meta.csv"
    if not meta.is_file():
        return
    with open(meta, newline="", encoding="utf-8") as fh:
        rows = {r["path"]: r for r in csv.DictReader(fh)}
    if not all(p in rows for p in ds.paths):
        return
    ds.bg_ids = np.array([int(rows[p]["bg_id"]) for p in ds.paths], dtype=np.int64)
    ds.fg_masks = np.stack([read_image(root / rows[p]["fg_mask_path"]) > 0.5 for p in ds.paths])


def write_manifest(directory, rows: Iterable[tuple[str, str, str]]) -> Path:
    path = Path(directory) / "manifest.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "split"])
        w.writerows(rows)
    return path


def export_dataset(ds: Dataset, directory, spec: SyntheticSpec | None = None) -> Path:
    """Write images, ``manifest.csv`` and (when available) ``meta.csv`` sidecar."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    rows, meta = [], []
    counters: dict[tuple[str, int], int] = {}
    for i in range(len(ds)):
        split, label = str(ds.splits[i]), int(ds.labels[i])
        j = counters.get((split, label), 0)
        counters[(split, label)] = j + 1
        rel = f"images/{split}/{ds.class_names[label]}/{j:05d}.png"
        write_image(root / rel, ds.images[i], bits=16)
        rows.append((rel, ds.class_names[label], split))
        if ds.bg_ids is not None and ds.fg_masks is not None:
            mrel = f"masks/{split}/{ds.class_names[label]}/{j:05d}.png"
            write_image(root / mrel, ds.fg_masks[i].astype(np.float64), bits=8)
            meta.append((rel, int(ds.bg_ids[i]), mrel))
    path = write_manifest(root, rows)
    if meta:
        with open(root / "meta.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "bg_id", "fg_mask_path"])
            w.writerows(meta)
    if spec is not None:
        (root / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def binomial_band(p: float, n: int, k: float = 3.0) -> tuple[float, float]:
    """``p +- k`` binomial standard deviations for a proportion over ``n`` trials."""
    sd = math.sqrt(p * (1 - p) / n)
    return p - k * sd, p + k * sd
