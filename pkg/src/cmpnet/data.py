"""Synthetic fine-grained image dataset.

Every image shows the same stylised vehicle (body, cabin, two wheels) over
a textured background. Body colour, vehicle position (+-3 px), brightness
(+-10%) and background vary per sample. Class identity lives only in two
small high-contrast motifs: a 4x4 pattern on the cabin and one on the body.
The motifs are centred horizontally and are symmetric up to phase under a
horizontal flip, so flip augmentation never turns one class into another.

On-disk layout::

    <out>/manifest.txt     key=value header, blank line, path<TAB>label<TAB>split
    <out>/mean.cmpt        per-pixel mean of the training images
    <out>/train/NNNNN.cmpt one CMPT blob per image, shape (3, S, S), values in [0, 1]
    <out>/test/NNNNN.cmpt
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Rng, load_tensor, save_tensor

MANIFEST = "manifest.txt"
MEAN_FILE = "mean.cmpt"
JITTER = 3
BRIGHTNESS = 0.10
MOTIF = 4


def _patterns():
    r, c = np.mgrid[:MOTIF, :MOTIF]
    return {
        "hstripe": (r % 2 == 0),
        "vstripe": (c % 2 == 0),
        "checker": ((r + c) % 2 == 0),
        "blocks": ((r // 2 + c // 2) % 2 == 0),
    }


PATTERNS = _patterns()
CABIN_MOTIFS = ("hstripe", "vstripe", "checker", "blocks")
BODY_MOTIFS = ("hstripe", "vstripe", "checker", "blocks")


def class_motifs(label: int) -> tuple[str, str]:
    """(cabin motif, body motif) for a class; classes 0..15 are distinct."""
    return CABIN_MOTIFS[label % 4], BODY_MOTIFS[(label // 4) % 4]


@dataclass
class Nuisance:
    """Per-sample variation that carries no class information."""

    background: np.ndarray  # (3, S, S)
    body_color: np.ndarray  # (3,)
    dy: int
    dx: int
    brightness: float

    @classmethod
    def draw(cls, rng: Rng, size: int) -> "Nuisance":
        coarse = rng.uniform((3, 4, 4), 0.15, 0.55)
        cell = -(-size // 4)
        background = np.kron(coarse, np.ones((cell, cell)))[:, :size, :size]
        background = background + rng.uniform((3, size, size), -0.05, 0.05)
        return cls(
            background=background,
            body_color=rng.uniform((3,), 0.2, 0.8),
            dy=int(rng.integers(-JITTER, JITTER + 1)),
            dx=int(rng.integers(-JITTER, JITTER + 1)),
            brightness=float(rng.uniform((1,), 1 - BRIGHTNESS, 1 + BRIGHTNESS)[0]),
        )


def render(label: int, nz: Nuisance, size: int) -> np.ndarray:
    img = nz.background.copy()
    u = size / 32.0

    def box(top, left, h, w):
        t, l = int(round(top * u)) + nz.dy, int(round(left * u)) + nz.dx
        return slice(max(t, 0), max(t + int(round(h * u)), 0)), slice(max(l, 0), max(l + int(round(w * u)), 0))

    rows, cols = box(12, 4, 9, 24)
    img[:, rows, cols] = nz.body_color[:, None, None]
    rows, cols = box(6, 9, 7, 14)
    img[:, rows, cols] = 0.7 * nz.body_color[:, None, None]
    yy, xx = np.mgrid[:size, :size]
    for wx in (9, 23):
        cy, cx = 21 * u + nz.dy, wx * u + nz.dx
        wheel = (yy - cy) ** 2 + (xx - cx) ** 2 <= (3 * u) ** 2
        img[:, wheel] = 0.08

    centre = size // 2 - MOTIF // 2 + nz.dx
    cabin, body = class_motifs(label)
    for name, top in ((cabin, int(round(7.5 * u))), (body, int(round(14.5 * u)))):
        t = top + nz.dy
        patch = np.where(PATTERNS[name], 0.95, 0.05)
        img[:, t : t + MOTIF, centre : centre + MOTIF] = patch
    return np.clip(img * nz.brightness, 0.0, 1.0)


def make_sample(seed: int, index: int, label: int, size: int) -> np.ndarray:
    rng = Rng([seed, index])
    return render(label, Nuisance.draw(rng, size), size)


# --- manifest ---------------------------------------------------------------


@dataclass
class DatasetManifest:
    num_classes: int
    per_class_train: int
    per_class_test: int
    image_size: int
    seed: int
    channels: int = 3
    mean_image_file: str = MEAN_FILE
    samples: list = None  # (relative path, label, split)
    root: Path | None = None

    HEADER_KEYS = (
        "num_classes",
        "per_class_train",
        "per_class_test",
        "image_size",
        "channels",
        "seed",
        "mean_image_file",
    )

    def to_text(self) -> str:
        head = [f"{k}={getattr(self, k)}" for k in self.HEADER_KEYS]
        body = [f"{path}\t{label}\t{split}" for path, label, split in self.samples]
        return "\n".join(head) + "\n\n" + "\n".join(body) + "\n"

    @classmethod
    def parse(cls, text: str, root: Path | None = None) -> "DatasetManifest":
        head, sep, body = text.partition("\n\n")
        if not sep:
            raise FormatError("manifest has no blank line after the header")
        fields = {}
        for line in head.splitlines():
            key, eq, value = line.partition("=")
            if not eq or key not in cls.HEADER_KEYS:
                raise FormatError(f"bad manifest header line {line!r}")
            fields[key] = value
        missing = set(cls.HEADER_KEYS) - set(fields)
        if missing:
            raise FormatError(f"manifest header misses {sorted(missing)}")
        try:
            ints = {k: int(fields[k]) for k in cls.HEADER_KEYS if k != "mean_image_file"}
        except ValueError as exc:
            raise FormatError(f"manifest header: {exc}") from None
        samples = []
        for n, line in enumerate(body.splitlines(), 1):
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in ("train", "test"):
                raise FormatError(f"manifest sample line {n} malformed: {line!r}")
            try:
                label = int(parts[1])
            except ValueError:
                raise FormatError(f"manifest sample line {n}: bad label {parts[1]!r}") from None
            samples.append((parts[0], label, parts[2]))
        return cls(**ints, mean_image_file=fields["mean_image_file"], samples=samples, root=root)


def generate_dataset(
    out_dir,
    seed: int = 1,
    num_classes: int = 8,
    per_class_train: int = 64,
    per_class_test: int = 16,
    size: int = 32,
) -> DatasetManifest:
    if num_classes < 2 or num_classes > len(CABIN_MOTIFS) * len(BODY_MOTIFS):
        raise ValueError(f"num_classes must be in 2..16, got {num_classes}")
    if size < 16:
        raise ValueError(f"image size must be >= 16, got {size}")
    if per_class_train < 1 or per_class_test < 1:
        raise ValueError("per-class counts must be positive")
    out = Path(out_dir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(parents=True, exist_ok=True)

    samples = []
    mean = np.zeros((3, size, size))
    index = 0
    for split, per_class in (("train", per_class_train), ("test", per_class_test)):
        for n in range(per_class * num_classes):
            label = n % num_classes
            img = make_sample(seed, index, label, size)
            rel = f"{split}/{n:05d}.cmpt"
            save_tensor(img, out / rel)
            samples.append((rel, label, split))
            if split == "train":
                mean += img
            index += 1
    mean /= per_class_train * num_classes
    save_tensor(mean, out / MEAN_FILE)

    manifest = DatasetManifest(
        num_classes, per_class_train, per_class_test, size, seed, samples=samples, root=out
    )
    (out / MANIFEST).write_text(manifest.to_text(), encoding="utf-8", newline="\n")
    return manifest


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    mean: np.ndarray
    num_classes: int

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.x_train[:n], self.y_train[:n], self.x_test, self.y_test, self.mean, self.num_classes)


def load_dataset(manifest_path) -> Dataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    try:
        m = DatasetManifest.parse(text, root=path.parent)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    shape = (m.channels, m.image_size, m.image_size)

    def read(rel):
        full = path.parent / rel
        if not full.is_file():
            raise FormatError(f"{full}: referenced file is missing")
        t = load_tensor(full)
        if t.shape != shape:
            raise FormatError(f"{full}: shape {t.shape} != manifest {shape}")
        return t

    xs = {"train": [], "test": []}
    ys = {"train": [], "test": []}
    seen = set()
    for rel, label, split in m.samples:
        if not 0 <= label < m.num_classes:
            raise FormatError(f"{rel}: label {label} outside [0, {m.num_classes})")
        if rel in seen:
            raise FormatError(f"{rel}: listed more than once")
        seen.add(rel)
        xs[split].append(read(rel))
        ys[split].append(label)
    for split, per_class in (("train", m.per_class_train), ("test", m.per_class_test)):
        counts = np.bincount(np.array(ys[split], dtype=int), minlength=m.num_classes)
        if len(ys[split]) == 0 or np.any(counts != per_class):
            raise FormatError(f"{path}: {split} split is not {per_class} samples per class")
    return Dataset(
        np.stack(xs["train"]),
        np.array(ys["train"]),
        np.stack(xs["test"]),
        np.array(ys["test"]),
        read(m.mean_image_file),
        m.num_classes,
    )


def nearest_centroid_accuracy(data: Dataset) -> float:
    """Test accuracy of a raw-pixel nearest-class-mean classifier."""
    flat = data.x_train.reshape(len(data.x_train), -1)
    centroids = np.stack([flat[data.y_train == c].mean(axis=0) for c in range(data.num_classes)])
    test = data.x_test.reshape(len(data.x_test), -1)
    d = ((test[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float((d.argmin(axis=1) == data.y_test).mean())


def nuisance_vs_motif_mse(seed: int, num_classes: int, size: int = 32, pairs: int = 64):
    """Mean pixel MSE within a class (different nuisance) vs between classes (same nuisance)."""
    within, between = [], []
    for i in range(pairs):
        rng = Rng([seed, 10**6 + i])
        a, b = Nuisance.draw(rng, size), Nuisance.draw(rng, size)
        c1 = i % num_classes
        c2 = (c1 + 1 + i // num_classes % (num_classes - 1)) % num_classes
        within.append(np.mean((render(c1, a, size) - render(c1, b, size)) ** 2))
        between.append(np.mean((render(c1, a, size) - render(c2, a, size)) ** 2))
    return float(np.mean(within)), float(np.mean(between))
