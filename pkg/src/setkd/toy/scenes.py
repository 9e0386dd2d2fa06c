"""Synthetic scenes: up to five boxed objects rendered as Gaussian blobs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..matching_cost import Targets

GRID = 16
CHANNELS = 4  # one per class plus a class-agnostic channel
N_CLASSES = 3
NOISE = 0.05
MAX_OBJECTS = 5


@dataclass
class Scene:
    labels: np.ndarray
    boxes: np.ndarray  # (T, 4) cx, cy, w, h

    @property
    def targets(self) -> Targets:
        return Targets(self.labels, self.boxes)


@dataclass
class Dataset:
    scenes: list[Scene]
    grids: np.ndarray  # (n, G, G, CHANNELS)
    seed: int

    def __len__(self) -> int:
        return len(self.scenes)

    def targets(self, idx=None) -> list[Targets]:
        idx = range(len(self)) if idx is None else idx
        return [self.scenes[i].targets for i in idx]


def sample_scene(rng: np.random.Generator, max_objects: int = MAX_OBJECTS, n_classes: int = N_CLASSES) -> Scene:
    t = int(rng.integers(1, max_objects + 1))
    wh = rng.uniform(0.12, 0.4, (t, 2))
    c = rng.uniform(wh / 2, 1 - wh / 2)
    labels = rng.integers(0, n_classes, t)
    return Scene(labels.astype(np.int64), np.concatenate([c, wh], axis=1))


def cell_centers(grid: int = GRID) -> tuple[np.ndarray, np.ndarray]:
    """Normalized (x, y) of every cell, row-major, each shape (G*G,)."""
    ys, xs = np.meshgrid((np.arange(grid) + 0.5) / grid, (np.arange(grid) + 0.5) / grid, indexing="ij")
    return xs.ravel(), ys.ravel()


def render(scene: Scene, seed: int, grid: int = GRID, channels: int = CHANNELS, noise: float = NOISE) -> np.ndarray:
    """Deterministic G x G x C rendering of ``scene`` with i.i.d. noise."""
    xs, ys = cell_centers(grid)
    out = np.zeros((grid * grid, channels))
    for label, (cx, cy, w, h) in zip(scene.labels, scene.boxes):
        sx, sy = w / 4, h / 4
        blob = np.exp(-0.5 * (((xs - cx) / sx) ** 2 + ((ys - cy) / sy) ** 2))
        out[:, label] += blob
        out[:, channels - 1] += blob
    out += noise * np.random.default_rng(seed).standard_normal(out.shape)
    return out.reshape(grid, grid, channels)


def make_dataset(n: int, seed: int, grid: int = GRID) -> Dataset:
    rng = np.random.default_rng(seed)
    scenes, grids = [], []
    for _ in range(n):
        scene = sample_scene(rng)
        scenes.append(scene)
        grids.append(render(scene, int(rng.integers(2**32)), grid))
    return Dataset(scenes, np.stack(grids) if grids else np.zeros((0, grid, grid, CHANNELS)), seed)
