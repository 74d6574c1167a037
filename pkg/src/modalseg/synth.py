"""Synthetic four-modality scenes with dense labels, and their on-disk format.

Scenes are axis-aligned rectangles and ellipses on a background. Two object
categories share a colour (appearance cannot separate them) and two others
share a depth (depth and range cannot separate them), so the segmentation
task needs more than one modality.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cmtb import ModalityBundle
from .serialize import ContainerError, load_tensor, save_tensor
from .sgm import IGNORE

FORMAT_VERSION = 1
MODALITIES = ("rgb", "depth", "event", "lidar")
CHANNELS = {"rgb": 3, "depth": 1, "event": 1, "lidar": 1}

# Category 1 and 2 collide in colour, 3 and 4 collide in depth.
PALETTE = np.array([
    [0.15, 0.15, 0.15],
    [0.85, 0.20, 0.20],
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.30, 0.85],
    [0.90, 0.85, 0.20],
])
INV_DEPTH = np.array([0.10, 0.30, 0.55, 0.80, 0.80, 1.05])
COLOR_COLLISION = (1, 2)
DEPTH_COLLISION = (3, 4)
EVENT_THRESHOLD = 0.05


@dataclass(frozen=True)
class SynthConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 6
    min_objects: int = 2
    max_objects: int = 5
    min_size: int = 12
    max_size: int = 32
    ignore_border: int = 0
    dtype: str = "float32"

    def validate(self) -> None:
        if self.num_classes < 2 or self.num_classes > len(PALETTE):
            raise ValueError(f"num_classes must be in 2..{len(PALETTE)}")
        if self.max_objects < 1 or self.min_objects < 1:
            raise ValueError("a scene needs at least one object to show two categories")
        if self.min_objects > self.max_objects or self.min_size > self.max_size:
            raise ValueError("inverted range in config")
        if self.min_size > min(self.height, self.width):
            raise ValueError("minimum object size exceeds the canvas")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


@dataclass(frozen=True)
class ObjectSpec:
    kind: str  # "rect" | "ellipse"
    top: int
    left: int
    height: int
    width: int
    category: int
    depth_jitter: float


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    objects: tuple
    background: int
    seed: int
    num_classes: int


@dataclass
class SampleRecord:
    maps: dict  # name -> [C, H, W]
    label: np.ndarray  # [H, W] uint8
    seed: int


def generate_scene(seed: int, config: SynthConfig = SynthConfig()) -> SceneSpec:
    config.validate()
    rng = np.random.default_rng(seed)
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    objects = []
    for _ in range(count):
        h = int(rng.integers(config.min_size, config.max_size + 1))
        w = int(rng.integers(config.min_size, config.max_size + 1))
        objects.append(ObjectSpec(
            kind=str(rng.choice(["rect", "ellipse"])),
            top=int(rng.integers(0, config.height - h + 1)),
            left=int(rng.integers(0, config.width - w + 1)),
            height=h,
            width=w,
            category=int(rng.integers(1, config.num_classes)),
            depth_jitter=float(rng.uniform(-0.03, 0.03)),
        ))
    return SceneSpec(config.height, config.width, tuple(objects), 0, int(seed), config.num_classes)


def object_mask(obj: ObjectSpec, height: int, width: int) -> np.ndarray:
    """Pixels whose centres fall inside the object (exact integer arithmetic)."""
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    if obj.kind == "rect":
        return (rows >= obj.top) & (rows < obj.top + obj.height) & (cols >= obj.left) & (cols < obj.left + obj.width)
    # doubled coordinates: centre 2*top+h, pixel centre 2*r+1, radii h and w
    dy = 2 * rows + 1 - (2 * obj.top + obj.height)
    dx = 2 * cols + 1 - (2 * obj.left + obj.width)
    return dy * dy * obj.width**2 + dx * dx * obj.height**2 <= obj.height**2 * obj.width**2


def rasterize(spec: SceneSpec) -> np.ndarray:
    label = np.full((spec.height, spec.width), spec.background, dtype=np.uint8)
    for obj in spec.objects:
        label[object_mask(obj, spec.height, spec.width)] = obj.category
    return label


def _smooth_fields(spec: SceneSpec):
    rng = np.random.default_rng([spec.seed, 1])
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(float) + 0.5
    cy, cx = rng.uniform(0, spec.height), rng.uniform(0, spec.width)
    sigma = rng.uniform(0.4, 0.7) * max(spec.height, spec.width)
    illum = 0.8 + 0.4 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    angle = rng.uniform(0, 2 * np.pi)
    ramp = 0.1 * ((yy / spec.height - 0.5) * np.sin(angle) + (xx / spec.width - 0.5) * np.cos(angle))
    sectors, phase = 24, int(rng.integers(0, 4))
    theta = np.arctan2(yy - spec.height / 2, xx - spec.width / 2)
    sector = np.floor((theta + np.pi) / (2 * np.pi) * sectors).astype(int) % sectors
    dropout = (sector + phase) % 4 == 0
    return illum, ramp, dropout


def render_modalities(spec: SceneSpec, config: SynthConfig = SynthConfig()) -> SampleRecord:
    label = rasterize(spec)
    illum, ramp, dropout = _smooth_fields(spec)
    appearance = PALETTE[label].transpose(2, 0, 1) * illum
    inv_depth = INV_DEPTH[label].astype(float)
    for obj in spec.objects:
        mask = object_mask(obj, spec.height, spec.width) & (label == obj.category)
        inv_depth[mask] += obj.depth_jitter
    inv_depth = inv_depth + ramp
    gy, gx = np.gradient(appearance, axis=(1, 2))
    grad_mag = np.sqrt(gy**2 + gx**2).max(axis=0)
    event = np.where(grad_mag > EVENT_THRESHOLD, grad_mag, 0.0)
    depth = (inv_depth - 0.55) / 0.3
    lidar = np.where(dropout, 0.0, depth)
    maps = {
        "rgb": (appearance - 0.5) / 0.25,
        "depth": depth[None],
        "event": (event / 0.2)[None],
        "lidar": lidar[None],
    }
    maps = {k: np.ascontiguousarray(v, dtype=config.dtype) for k, v in maps.items()}
    if config.ignore_border:
        b = config.ignore_border
        label = label.copy()
        label[:b], label[-b:], label[:, :b], label[:, -b:] = IGNORE, IGNORE, IGNORE, IGNORE
    return SampleRecord(maps, label, spec.seed)


def sample_seed(global_seed: int, index: int) -> int:
    return int(global_seed) ^ int(index)


def generate_samples(count: int, global_seed: int, config: SynthConfig = SynthConfig(), start: int = 0) -> list:
    return [render_modalities(generate_scene(sample_seed(global_seed, start + k), config), config)
            for k in range(count)]


@dataclass
class Dataset:
    """In-memory split: stacked maps per modality plus labels."""

    maps: dict  # name -> [N, C, H, W]
    labels: np.ndarray  # [N, H, W]
    names: list
    present: list
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def bundle(self, indices, present=None) -> ModalityBundle:
        indices = np.asarray(indices)
        present = self.present if present is None else list(present)
        return ModalityBundle([self.maps[n][indices] for n in self.names], present, list(self.names))

    @classmethod
    def from_samples(cls, samples, num_classes: int, names=MODALITIES) -> Dataset:
        if not samples:
            raise ValueError("empty dataset")
        maps = {n: np.stack([s.maps[n] for s in samples]) for n in names}
        labels = np.stack([s.label for s in samples])
        return cls(maps, labels, list(names), [True] * len(names), num_classes)


def write_dataset(samples, directory, config: SynthConfig = SynthConfig(), extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(samples):
        for name in MODALITIES:
            save_tensor(directory / f"{k}_{name}.eqt", s.maps[name])
        save_tensor(directory / f"{k}_label.eqt", s.label.astype(np.uint8))
    manifest = {
        "format_version": FORMAT_VERSION,
        "count": len(samples),
        "num_classes": config.num_classes,
        "modalities": list(MODALITIES),
        "channels": CHANNELS,
        "seeds": [s.seed for s in samples],
        "config": asdict(config),
        **(extra or {}),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContainerError(f"dataset format version {manifest.get('format_version')} unsupported")
    return manifest


def read_samples(directory) -> tuple[list, dict]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    samples = []
    for k in range(manifest["count"]):
        maps = {n: load_tensor(directory / f"{k}_{n}.eqt") for n in manifest["modalities"]}
        samples.append(SampleRecord(maps, load_tensor(directory / f"{k}_label.eqt"), manifest["seeds"][k]))
    return samples, manifest


def read_dataset(directory, keep=None, dtype=None) -> Dataset:
    """Load a split; modalities outside ``keep`` are marked absent."""
    samples, manifest = read_samples(directory)
    if not samples:
        raise ValueError(f"dataset at {directory} is empty")
    names = manifest["modalities"]
    if keep is not None:
        unknown = set(keep) - set(names)
        if unknown:
            raise ValueError(f"unknown modalities {sorted(unknown)}")
    ds = Dataset.from_samples(samples, manifest["num_classes"], names)
    if dtype is not None:
        ds.maps = {n: m.astype(dtype) for n, m in ds.maps.items()}
    ds.present = [keep is None or n in keep for n in names]
    if not any(ds.present):
        raise ValueError("modality filter removes every modality")
    ds.meta = manifest
    return ds
