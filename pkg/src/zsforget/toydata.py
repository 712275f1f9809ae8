"""Procedurally generated image/label datasets for the desk-scale model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .encoders import InputError

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "magenta": (0.9, 0.1, 0.85),
    "cyan": (0.1, 0.85, 0.9),
    "orange": (1.0, 0.55, 0.05),
    "purple": (0.5, 0.1, 0.7),
    "white": (0.97, 0.97, 0.97),
    "gray": (0.55, 0.55, 0.55),
}

SHAPE_CLASSES = [
    "red circle",
    "green square",
    "blue triangle",
    "yellow cross",
    "magenta diamond",
    "cyan ring",
    "orange bar",
    "purple frame",
    "white hourglass",
    "gray stripe",
]

PATTERN_CLASSES = [
    "horizontal stripes",
    "vertical stripes",
    "checkerboard",
    "polka dots",
    "diagonal lines",
]


@dataclass
class LabeledImageSet:
    """Images ``(n, H, W, C)`` in [0, 1] with integer labels into ``class_names``."""

    images: torch.Tensor
    labels: torch.Tensor
    class_names: list[str]
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.images.ndim != 4:
            raise InputError("images must be a (n, H, W, C) tensor")
        if len(self.images) != len(self.labels):
            raise InputError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise InputError("label out of range of class_names")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, mask: torch.Tensor) -> "LabeledImageSet":
        return LabeledImageSet(self.images[mask], self.labels[mask], list(self.class_names), self.name, dict(self.meta))

    def of_class(self, class_index: int) -> "LabeledImageSet":
        return self.subset(self.labels == class_index)

    def without_class(self, class_index: int) -> "LabeledImageSet":
        return self.subset(self.labels != class_index)

    def counts(self) -> list[int]:
        return torch.bincount(self.labels, minlength=len(self.class_names)).tolist()


def _grid(size: int):
    coords = (np.arange(size) + 0.5) / size * 2 - 1
    return np.meshgrid(coords, coords, indexing="ij")


def _shape_mask(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(size)
    cy, cx = rng.uniform(-0.2, 0.2, 2)
    r = rng.uniform(0.45, 0.7)
    y, x = (yy - cy) / r, (xx - cx) / r
    if shape == "circle":
        return x**2 + y**2 <= 1
    if shape == "square":
        return (abs(x) <= 0.85) & (abs(y) <= 0.85)
    if shape == "triangle":
        return (y <= 0.8) & (y >= 2 * abs(x) - 1.0)
    if shape == "cross":
        return ((abs(x) <= 0.3) & (abs(y) <= 1)) | ((abs(y) <= 0.3) & (abs(x) <= 1))
    if shape == "diamond":
        return abs(x) + abs(y) <= 1
    if shape == "ring":
        d = x**2 + y**2
        return (d <= 1) & (d >= 0.35)
    if shape == "bar":
        return (abs(y) <= 0.3) & (abs(x) <= 1.1)
    if shape == "frame":
        return (np.maximum(abs(x), abs(y)) <= 0.95) & (np.maximum(abs(x), abs(y)) >= 0.6)
    if shape == "hourglass":
        return (abs(y) <= 0.95) & (abs(x) <= abs(y))
    if shape == "stripe":
        return (abs(x) <= 0.3) & (abs(y) <= 1.1)
    raise InputError(f"unknown shape {shape!r}")


def _pattern_mask(pattern: str, size: int, rng: np.random.Generator) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    period = int(rng.integers(3, 5))
    phase = int(rng.integers(0, period))
    if pattern == "horizontal stripes":
        return ((ii + phase) % period) < period / 2
    if pattern == "vertical stripes":
        return ((jj + phase) % period) < period / 2
    if pattern == "checkerboard":
        return (((ii + phase) // 2 + (jj + phase) // 2) % 2) == 0
    if pattern == "polka dots":
        return (((ii + phase) % 4) < 2) & (((jj + phase) % 4) < 2) & (((ii // 4 + jj // 4) % 2) == 0)
    if pattern == "diagonal lines":
        return ((ii + jj + phase) % period) < period / 2
    raise InputError(f"unknown pattern {pattern!r}")


def _render_shape(name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    color_name, shape = name.split(" ", 1)
    color = np.clip(np.array(COLORS[color_name]) + rng.normal(0, 0.05, 3), 0, 1)
    bg = rng.uniform(0.0, 0.3) * np.ones(3) + rng.normal(0, 0.03, 3)
    img = np.broadcast_to(bg, (size, size, 3)).copy()
    img[_shape_mask(shape, size, rng)] = color
    return img


def _render_pattern(name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    fg = rng.uniform(0.5, 1.0, 3)
    bg = rng.uniform(0.0, 0.3, 3)
    img = np.broadcast_to(bg, (size, size, 3)).copy()
    img[_pattern_mask(name, size, rng)] = fg
    return img


def make_toy_dataset(
    kind: str = "shapes",
    per_class: int = 40,
    seed: int = 0,
    size: int = 16,
    class_names: Sequence[str] | None = None,
    noise: float = 0.04,
) -> LabeledImageSet:
    """Generate ``per_class`` images for each class of a toy dataset kind."""
    if kind == "shapes":
        names, render = list(class_names or SHAPE_CLASSES), _render_shape
    elif kind == "patterns":
        names, render = list(class_names or PATTERN_CLASSES), _render_pattern
    else:
        raise InputError(f"unknown toy dataset kind {kind!r}")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label, name in enumerate(names):
        for _ in range(per_class):
            img = render(name, size, rng) + rng.normal(0, noise, (size, size, 3))
            images.append(np.clip(img, 0, 1))
            labels.append(label)
    return LabeledImageSet(
        torch.tensor(np.stack(images), dtype=torch.float32),
        torch.tensor(labels),
        names,
        name=kind,
        meta={"kind": kind, "per_class": per_class, "seed": seed, "size": size},
    )


def train_test_split(dataset: LabeledImageSet, test_fraction: float = 0.3, seed: int = 0):
    """Stratified split; returns ``(train, test)``."""
    g = torch.Generator().manual_seed(seed)
    test_mask = torch.zeros(len(dataset), dtype=torch.bool)
    for c in range(len(dataset.class_names)):
        idx = torch.nonzero(dataset.labels == c).flatten()
        idx = idx[torch.randperm(len(idx), generator=g)]
        n_test = int(round(len(idx) * test_fraction))
        test_mask[idx[:n_test]] = True
    train, test = dataset.subset(~test_mask), dataset.subset(test_mask)
    train.name = test.name = dataset.name
    return train, test


def merge_datasets(datasets: Sequence[LabeledImageSet], name: str = "merged") -> LabeledImageSet:
    """Concatenate datasets, re-indexing labels into the union of class names."""
    class_names: list[str] = []
    for ds in datasets:
        for c in ds.class_names:
            if c not in class_names:
                class_names.append(c)
    images, labels = [], []
    for ds in datasets:
        remap = torch.tensor([class_names.index(c) for c in ds.class_names], dtype=torch.long)
        images.append(ds.images)
        labels.append(remap[ds.labels])
    return LabeledImageSet(torch.cat(images), torch.cat(labels), class_names, name=name)


def save_dataset(dataset: LabeledImageSet, path) -> None:
    np.savez_compressed(
        path,
        images=dataset.images.numpy(),
        labels=dataset.labels.numpy(),
        class_names=np.array(dataset.class_names),
        name=np.array(dataset.name),
    )


def load_dataset(path) -> LabeledImageSet:
    with np.load(path, allow_pickle=False) as data:
        return LabeledImageSet(
            torch.from_numpy(data["images"]),
            torch.from_numpy(data["labels"]),
            [str(c) for c in data["class_names"]],
            name=str(data["name"]),
        )
