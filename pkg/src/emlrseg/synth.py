"""Procedural PCB-CT-like scenes with per-pixel element labels.

Geometry (vias, pads, wires) and noise are drawn from separate random
streams, so changing any noise parameter never moves a label pixel.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

CLASS_NAMES = ("background", "via", "wire", "pad")
BACKGROUND, VIA, WIRE, PAD = range(4)

SAMPLE_MAGIC = b"EMLRSMP\0"
SAMPLE_VERSION = 1
_HEADER = struct.Struct("<8sIIII")

# dataset-level constants used to standardise pixels before patchifying
PIXEL_MEAN = 0.31
PIXEL_STD = 0.18


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    via_count: tuple[int, int] = (2, 4)
    via_radius: tuple[int, int] = (3, 5)
    pad_count: tuple[int, int] = (1, 3)
    pad_radius: tuple[int, int] = (4, 7)
    wire_count: tuple[int, int] = (2, 4)
    wire_width: tuple[int, int] = (2, 3)
    gradient_amp: float = 0.12
    streak_amp: float = 0.08
    streak_count: int = 2
    blur_sigma: float = 0.6
    noise_sigma: float = 0.04
    seed: int = 0

    def __post_init__(self):
        for name in ("via_radius", "pad_radius", "wire_width"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ValueError(f"{name} must be a positive (lo, hi) range, got {(lo, hi)}")
        for name in ("via_count", "pad_count", "wire_count"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-negative (lo, hi) range, got {(lo, hi)}")

    def with_seed(self, seed: int) -> "SceneSpec":
        return dataclasses.replace(self, seed=int(seed))

    def without_noise(self) -> "SceneSpec":
        return dataclasses.replace(self, gradient_amp=0.0, streak_amp=0.0, blur_sigma=0.0, noise_sigma=0.0)

    def geometry_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("seed")
        return d

    def spec_hash(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class Element:
    kind: int
    center: tuple[int, int]
    radius: int


@dataclass
class SegSample:
    image: np.ndarray  # [C, H, W] float32
    labels: np.ndarray  # [H, W] uint8
    elements: list = field(default_factory=list)
    wires: list = field(default_factory=list)

    def __post_init__(self):
        if self.labels.shape != self.image.shape[-2:]:
            raise ValueError(f"label dims {self.labels.shape} != image dims {self.image.shape[-2:]}")


# ----------------------------------------------------------------------
# shared geometry: the labeler and the painter both call these


def disc_mask(size: int, center: tuple[int, int], radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = center
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius


def rect_mask(size: int, r0: int, r1: int, c0: int, c1: int) -> np.ndarray:
    """Inclusive-exclusive row/col bounds, clipped to the image."""
    m = np.zeros((size, size), dtype=bool)
    m[max(r0, 0):min(r1, size), max(c0, 0):min(c1, size)] = True
    return m


def wire_mask(size: int, a: tuple[int, int], b: tuple[int, int], width: int, horizontal_first: bool) -> np.ndarray:
    """Straight or L-shaped trace of ``width`` pixels between two points."""
    (ra, ca), (rb, cb) = a, b
    lo = width // 2
    hi = width - lo
    corner = (ra, cb) if horizontal_first else (rb, ca)
    m = np.zeros((size, size), dtype=bool)
    for (r0, c0), (r1, c1) in ((a, corner), (corner, b)):
        if r0 == r1:
            m |= rect_mask(size, r0 - lo, r0 + hi, min(c0, c1) - lo, max(c0, c1) + hi)
        else:
            m |= rect_mask(size, min(r0, r1) - lo, max(r0, r1) + hi, c0 - lo, c0 + hi)
    return m


def _place(rng: np.random.Generator, size: int, radius: int, placed: list[Element], retries: int = 200):
    for _ in range(retries):
        lo, hi = radius + 1, size - radius - 2
        if hi < lo:
            break
        cy, cx = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        if all((cy - e.center[0]) ** 2 + (cx - e.center[1]) ** 2 > (radius + e.radius + 2) ** 2 for e in placed):
            return cy, cx
    raise PlacementError(f"could not place element of radius {radius} in {size}x{size} after {retries} tries")


def _layout(spec: SceneSpec) -> tuple[list[Element], list[tuple]]:
    rng = np.random.default_rng([spec.seed, 0])
    size = spec.image_size
    elements: list[Element] = []
    for kind, count, radius in ((PAD, spec.pad_count, spec.pad_radius), (VIA, spec.via_count, spec.via_radius)):
        n = int(rng.integers(count[0], count[1] + 1))
        for _ in range(n):
            r = int(rng.integers(radius[0], radius[1] + 1))
            elements.append(Element(kind, _place(rng, size, r, elements), r))
    wires = []
    n_wires = int(rng.integers(spec.wire_count[0], spec.wire_count[1] + 1))
    for _ in range(n_wires):
        if len(elements) >= 2:
            i, j = rng.choice(len(elements), size=2, replace=False)
            a, b = elements[i].center, elements[j].center
        else:
            a = tuple(int(v) for v in rng.integers(0, size, size=2))
            b = tuple(int(v) for v in rng.integers(0, size, size=2))
        width = int(rng.integers(spec.wire_width[0], spec.wire_width[1] + 1))
        wires.append((a, b, width, bool(rng.integers(0, 2))))
    return elements, wires


def _paint(spec: SceneSpec, elements: list[Element], wires: list[tuple]) -> tuple[np.ndarray, np.ndarray]:
    size = spec.image_size
    img = np.full((size, size), 0.25)
    lab = np.zeros((size, size), dtype=np.uint8)
    for a, b, width, hfirst in wires:
        m = wire_mask(size, a, b, width, hfirst)
        img[m] = 0.6
        lab[m] = WIRE
    for e in elements:
        if e.kind == PAD:
            m = disc_mask(size, e.center, e.radius)
            img[m] = 0.85
            lab[m] = PAD
    for e in elements:
        if e.kind == VIA:
            m = disc_mask(size, e.center, e.radius)
            img[m] = 0.95
            img[disc_mask(size, e.center, 0.45 * e.radius)] = 0.1
            lab[m] = VIA
    return img, lab


def _add_noise(spec: SceneSpec, img: np.ndarray, elements: list[Element]) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 1])
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    theta = rng.uniform(0, 2 * np.pi)
    img = img + spec.gradient_amp * (np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5)) * 2
    if spec.streak_amp and spec.streak_count:
        anchors = [e.center for e in elements if e.kind == VIA] or [(size // 2, size // 2)]
        for k in range(spec.streak_count):
            cy, cx = anchors[int(rng.integers(len(anchors)))]
            phi = rng.uniform(0, np.pi)
            dist = np.abs((yy * (size - 1) - cy) * np.cos(phi) - (xx * (size - 1) - cx) * np.sin(phi))
            sign = 1.0 if k % 2 == 0 else -1.0
            img = img + sign * spec.streak_amp * np.exp(-0.5 * dist ** 2)
    if spec.blur_sigma > 0:
        img = gaussian_filter(img, spec.blur_sigma, mode="nearest")
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return img


def generate(spec: SceneSpec) -> SegSample:
    elements, wires = _layout(spec)
    img, lab = _paint(spec, elements, wires)
    img = _add_noise(spec, img, elements)
    return SegSample(img[None].astype(np.float32), lab, elements, wires)


def normalize(images: np.ndarray) -> np.ndarray:
    return ((images - PIXEL_MEAN) / PIXEL_STD).astype(np.float32)


# ----------------------------------------------------------------------
# splits and persistence


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    index: int
    seed: int
    spec_hash: str


def make_split(n_train: int = 2000, n_val: int = 200, n_test: int = 200, base_seed: int = 1000,
               spec: SceneSpec | None = None) -> dict[str, list[ManifestEntry]]:
    """Consecutive, disjoint seed ranges for train / val / test."""
    spec = spec or SceneSpec()
    out: dict[str, list[ManifestEntry]] = {}
    start = base_seed
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        if n < 0:
            raise ValueError(f"{split} size must be >= 0")
        out[split] = [ManifestEntry(split, i, start + i, spec.with_seed(start + i).spec_hash()) for i in range(n)]
        start += n
    return out


def write_manifest(path, entries: list[ManifestEntry], spec: SceneSpec) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"spec": spec.geometry_dict()}, sort_keys=True) + "\n")
        for e in entries:
            fh.write(json.dumps(dataclasses.asdict(e), sort_keys=True) + "\n")


def read_manifest(path) -> tuple[SceneSpec, list[ManifestEntry]]:
    lines = Path(path).read_text().splitlines()
    head = json.loads(lines[0])["spec"]
    spec = SceneSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in head.items()})
    return spec, [ManifestEntry(**json.loads(line)) for line in lines[1:] if line.strip()]


def regenerate(entry: ManifestEntry, spec: SceneSpec) -> SegSample:
    s = spec.with_seed(entry.seed)
    if s.spec_hash() != entry.spec_hash:
        raise ValueError(f"spec hash mismatch for seed {entry.seed}: {s.spec_hash()} != {entry.spec_hash}")
    return generate(s)


def write_sample(path, sample: SegSample) -> None:
    c, h, w = sample.image.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SAMPLE_MAGIC, SAMPLE_VERSION, c, h, w))
        fh.write(sample.image.astype("<f4").tobytes())
        fh.write(sample.labels.astype(np.uint8).tobytes())


def read_sample(path) -> SegSample:
    raw = Path(path).read_bytes()
    magic, version, c, h, w = _HEADER.unpack_from(raw)
    if magic != SAMPLE_MAGIC:
        raise ValueError(f"{path}: not a sample file")
    if version != SAMPLE_VERSION:
        raise ValueError(f"{path}: unsupported sample version {version}")
    off = _HEADER.size
    n = c * h * w
    image = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(c, h, w).astype(np.float32)
    labels = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=off + 4 * n).reshape(h, w).copy()
    return SegSample(image, labels)


def generate_arrays(entries: list[ManifestEntry], spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Stack images [N, C, H, W] and labels [N, H, W] for manifest entries."""
    samples = [regenerate(e, spec) for e in entries]
    if not samples:
        s = spec.image_size
        return np.zeros((0, 1, s, s), np.float32), np.zeros((0, s, s), np.uint8)
    return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples])
