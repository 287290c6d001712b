"""Synthetic multi-domain BEV scenes for desk-scale adaptation experiments.

A scene is a G x G grid of cells. Each cell holds at most one object and is
described by a short vector: a noisy class signature, the object's offset
from the cell centre, size and heading cues, and a few nuisance channels
that carry no information in the source domain. Target domains corrupt the
descriptor: night lifts the class-signature channels by a per-scene glare
plus noise, haze attenuates the
informative channels and lifts the nuisance ones, rain drops sparse spikes.
The object layout depends only on (seed, scene id), so the same id renders
the same boxes in every domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..core import Box3D, DomainTag

NUM_CLASSES = 3
CLASS_NAMES = ("car", "pedestrian", "bicycle")
CLASS_FREQ = (0.70, 0.25, 0.05)
# mean (w, l, h) per class
CLASS_SIZE = ((1.9, 4.4, 1.6), (0.7, 0.7, 1.75), (0.6, 1.7, 1.3))
SIGNATURES = np.array([
    [1.0, 0.2, 0.0, 0.3],
    [0.2, 1.0, 0.3, 0.0],
    [0.0, 0.5, 1.0, 0.2],
])

SIG = slice(0, 4)
OFFSET = slice(4, 6)
SIZE = slice(6, 9)
HEADING = slice(9, 11)
NUISANCE = slice(11, 15)
CHANNELS = 15
INFORMATIVE = slice(0, 11)
GEOMETRY = slice(4, 11)

_DOMAIN_INDEX = {d: i for i, d in enumerate(DomainTag)}


@dataclass(frozen=True)
class SceneConfig:
    grid: int = 4
    cell: float = 4.0
    max_offset: float = 1.2
    min_objects: int = 1
    max_objects: int = 5
    signature_noise: float = 0.15
    geometry_noise: float = 0.05
    nuisance_noise: float = 0.2
    clutter_rate: float = 0.15
    # per-domain corruption
    night_offset: float = 0.0  # nuisance channels
    night_noise: float = 0.15
    # glare: a uniform lift of the class-signature channels
    night_glare: float = 1.7
    # per-scene severity: the night shift is scaled by U(1 - spread, 1 + spread)
    night_spread: float = 1.0
    haze_attenuation: float = 0.55
    haze_offset: float = 1.5
    rain_spike_rate: float = 0.05
    rain_offset: float = 1.0
    class_freq: tuple[float, float, float] = CLASS_FREQ

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        # one query per cell, and a cell holds at most one object
        if self.max_objects > self.num_cells:
            raise ValueError(f"max_objects {self.max_objects} exceeds the {self.num_cells} cells")

    @property
    def num_cells(self) -> int:
        return self.grid * self.grid

    def cell_centers(self) -> np.ndarray:
        """(num_cells, 2) ground-plane centres, row-major, origin at the grid centre."""
        g, s = self.grid, self.cell
        coords = (np.arange(g) - (g - 1) / 2.0) * s
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)

    def offset_vector(self, domain: DomainTag) -> np.ndarray:
        """Expected per-channel shift of a cell descriptor relative to source."""
        b = np.zeros(CHANNELS)
        if domain is DomainTag.NIGHT:
            b[NUISANCE] = self.night_offset
            b[SIG] = self.night_glare
        elif domain is DomainTag.HAZE:
            b[NUISANCE] = self.haze_offset
        elif domain is DomainTag.RAIN:
            b[NUISANCE] = self.rain_offset
        return b


@dataclass(frozen=True)
class ToyScene:
    scene_id: int
    domain: DomainTag
    labels: tuple[tuple[Box3D, int], ...]
    cells: tuple[int, ...]
    descriptor: np.ndarray = field(repr=False)  # (num_cells, CHANNELS)

    @property
    def vector(self) -> np.ndarray:
        return self.descriptor.ravel()


def _layout(cfg: SceneConfig, seed: int, scene_id: int):
    rng = np.random.default_rng([int(seed), int(scene_id)])
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    cells = np.sort(rng.choice(cfg.num_cells, size=n, replace=False))
    cats = rng.choice(NUM_CLASSES, size=n, p=np.asarray(cfg.class_freq) / sum(cfg.class_freq))
    centers = cfg.cell_centers()
    desc = np.zeros((cfg.num_cells, CHANNELS))
    desc[:, SIG] = rng.normal(0.0, cfg.signature_noise, (cfg.num_cells, 4))
    desc[:, OFFSET.start:NUISANCE.start] = rng.normal(0.0, cfg.geometry_noise, (cfg.num_cells, 7))
    desc[:, NUISANCE] = rng.normal(0.0, cfg.nuisance_noise, (cfg.num_cells, 4))
    clutter = rng.random(cfg.num_cells) < cfg.clutter_rate
    direction = rng.normal(size=(cfg.num_cells, 4))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    desc[clutter, SIG] += 0.6 * direction[clutter]
    labels = []
    for cell, cat in zip(cells, cats):
        w0, l0, h0 = CLASS_SIZE[cat]
        w, l, h = (v * rng.uniform(0.9, 1.1) for v in (w0, l0, h0))
        dx, dy = rng.uniform(-cfg.max_offset, cfg.max_offset, 2)
        yaw = rng.uniform(-math.pi, math.pi)
        strength = rng.uniform(0.7, 1.3)
        cx, cy = centers[cell]
        box = Box3D(cx + dx, cy + dy, h / 2.0, w, h, l, yaw)
        labels.append((box, int(cat)))
        row = desc[cell]
        row[SIG] = strength * SIGNATURES[cat] + rng.normal(0.0, cfg.signature_noise, 4)
        row[OFFSET] += (dx, dy)
        row[SIZE] += (w - 1.0, l - 2.0, h - 1.5)
        row[HEADING] += (math.cos(yaw), math.sin(yaw))
    return labels, tuple(int(c) for c in cells), desc


def _corrupt(desc: np.ndarray, cfg: SceneConfig, domain: DomainTag, rng) -> np.ndarray:
    out = desc.copy()
    if domain is DomainTag.NIGHT:
        severity = rng.uniform(1.0 - cfg.night_spread, 1.0 + cfg.night_spread)
        out += (severity - 1.0) * cfg.offset_vector(domain)
        out += rng.normal(0.0, cfg.night_noise, out.shape)
    elif domain is DomainTag.HAZE:
        out[:, INFORMATIVE] *= cfg.haze_attenuation
    elif domain is DomainTag.RAIN:
        spikes = rng.random(out.shape) < cfg.rain_spike_rate
        out[spikes] += rng.uniform(1.0, 3.0, int(spikes.sum()))
        # keep the expected shift equal to the configured offset
        out -= cfg.rain_spike_rate * 2.0
    out += cfg.offset_vector(domain)
    return out


def make_scene(scene_id: int, domain: DomainTag | str, seed: int = 42,
               cfg: SceneConfig | None = None) -> ToyScene:
    cfg = cfg or SceneConfig()
    domain = DomainTag.parse(domain)
    labels, cells, desc = _layout(cfg, seed, scene_id)
    if domain.is_target:
        rng = np.random.default_rng([int(seed), int(scene_id), 1 + _DOMAIN_INDEX[domain]])
        desc = _corrupt(desc, cfg, domain, rng)
    return ToyScene(int(scene_id), domain, tuple(labels), cells, desc)


def make_toy_dataset(n_scenes: int, domain: DomainTag | str, seed: int = 42,
                     cfg: SceneConfig | None = None, start_id: int = 0) -> list[ToyScene]:
    if n_scenes <= 0:
        raise ValueError("n_scenes must be positive")
    return [make_scene(start_id + i, domain, seed, cfg) for i in range(n_scenes)]
