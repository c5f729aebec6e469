"""Aligned visible/infrared pairs: synthetic scene rendering, PPM/PGM
codecs, manifests, frame downsampling, and batching.

The synthetic generator bakes in the modality asymmetry the training
loop relies on: the visible channel carries color and is scaled by an
illumination factor, the infrared channel carries per-class heat and is
illumination-invariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class SceneObject:
    kind: str  # "circle" | "square" | "bar"
    cx: float
    cy: float
    size: float
    cls: str


@dataclass(frozen=True)
class SceneSpec:
    height: int = 16
    width: int = 16
    objects: tuple[SceneObject, ...] = ()
    colors: dict = field(default_factory=dict)       # cls -> (r, g, b) in [0,1]
    heats: dict = field(default_factory=dict)        # cls -> intensity in [0,1]
    background_color: tuple = (0.35, 0.4, 0.3)
    background_heat: float = 0.15
    noise_visible: float = 0.0
    noise_infrared: float = 0.0
    illumination: float = 1.0


@dataclass
class PairedSample:
    visible: Tensor   # (3, H, W) in [0,1]
    infrared: Tensor  # (1, H, W) in [0,1]
    scene_id: str
    source: str


def _object_mask(obj: SceneObject, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if obj.kind == "circle":
        return (xx - obj.cx) ** 2 + (yy - obj.cy) ** 2 <= obj.size ** 2
    if obj.kind == "square":
        return (np.abs(xx - obj.cx) <= obj.size) & (np.abs(yy - obj.cy) <= obj.size)
    if obj.kind == "bar":
        return (np.abs(yy - obj.cy) <= obj.size / 2.0) & (np.abs(xx - obj.cx) <= 2.5 * obj.size)
    raise ConfigError(f"unknown object kind {obj.kind!r}")


def gen_scene(spec: SceneSpec, seed: int, scene_id: str = "synthetic",
              source: str = "generator") -> PairedSample:
    """Render the same geometry into both modalities, deterministically."""
    h, w = spec.height, spec.width
    for obj in spec.objects:
        if not (0 <= obj.cx < w and 0 <= obj.cy < h):
            raise ConfigError(f"object center ({obj.cx},{obj.cy}) outside {w}x{h} image")
    rng = np.random.default_rng(seed)
    visible = np.empty((3, h, w))
    visible[:] = np.asarray(spec.background_color)[:, None, None]
    infrared = np.full((1, h, w), spec.background_heat)
    for obj in spec.objects:
        mask = _object_mask(obj, h, w)
        color = np.asarray(spec.colors[obj.cls])
        for c in range(3):
            visible[c][mask] = color[c]
        infrared[0][mask] = spec.heats[obj.cls]
    visible = visible * spec.illumination
    if spec.noise_visible > 0.0:
        visible = visible + rng.normal(0.0, spec.noise_visible, visible.shape)
    if spec.noise_infrared > 0.0:
        infrared = infrared + rng.normal(0.0, spec.noise_infrared, infrared.shape)
    return PairedSample(
        visible=Tensor(np.clip(visible, 0.0, 1.0)),
        infrared=Tensor(np.clip(infrared, 0.0, 1.0)),
        scene_id=scene_id,
        source=source,
    )


def random_scene_spec(rng: np.random.Generator, *, height: int = 16, width: int = 16,
                      classes: dict | None = None, n_objects: tuple[int, int] = (1, 3),
                      illumination: float = 1.0,
                      noise_visible: float = 0.02,
                      noise_infrared: float = 0.03) -> SceneSpec:
    """Sample a plausible scene: a few objects from a fixed class palette."""
    if classes is None:
        classes = {
            "vehicle": {"color": (0.8, 0.15, 0.1), "heat": 0.9, "kind": "square"},
            "person": {"color": (0.2, 0.3, 0.85), "heat": 0.75, "kind": "circle"},
            "plant": {"color": (0.15, 0.7, 0.2), "heat": 0.25, "kind": "bar"},
        }
    names = sorted(classes)
    count = int(rng.integers(n_objects[0], n_objects[1] + 1))
    objects = []
    for _ in range(count):
        cls = names[int(rng.integers(len(names)))]
        size = float(rng.uniform(1.5, min(height, width) / 4.0))
        objects.append(SceneObject(
            kind=classes[cls]["kind"],
            cx=float(rng.uniform(size, width - 1 - size)),
            cy=float(rng.uniform(size, height - 1 - size)),
            size=size,
            cls=cls,
        ))
    return SceneSpec(
        height=height, width=width, objects=tuple(objects),
        colors={c: classes[c]["color"] for c in names},
        heats={c: classes[c]["heat"] for c in names},
        noise_visible=noise_visible, noise_infrared=noise_infrared,
        illumination=illumination,
    )


# -- PPM (P6) / PGM (P5) codecs, 8-bit --------------------------------


def write_ppm(path, img: np.ndarray) -> None:
    """(3, H, W) floats in [0,1] to binary P6."""
    _, h, w = img.shape
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(u8.transpose(1, 2, 0).tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    """(1, H, W) floats in [0,1] to binary P5."""
    _, h, w = img.shape
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(u8[0].tobytes())


def _read_pnm_header(f, magic: bytes, path) -> tuple[int, int]:
    def token():
        tok = b""
        while True:
            ch = f.read(1)
            if not ch:
                raise DataError(f"truncated header in {path}")
            if ch.isspace():
                if tok:
                    return tok
                continue
            if ch == b"#":
                f.readline()
                continue
            tok += ch

    if token() != magic:
        raise DataError(f"{path}: expected {magic.decode()} magic")
    w = int(token())
    h = int(token())
    maxval = int(token())
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit maxval 255 supported, got {maxval}")
    return w, h


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = _read_pnm_header(f, b"P6", path)
        raw = f.read(3 * w * h)
    if len(raw) != 3 * w * h:
        raise DataError(f"{path}: truncated pixel payload")
    u8 = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return u8.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = _read_pnm_header(f, b"P5", path)
        raw = f.read(w * h)
    if len(raw) != w * h:
        raise DataError(f"{path}: truncated pixel payload")
    u8 = np.frombuffer(raw, dtype=np.uint8).reshape(1, h, w)
    return u8.astype(np.float64) / 255.0


# -- manifests ---------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    scene_id: str
    visible_path: str
    infrared_path: str
    sequence_id: str


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
        entries.append(ManifestEntry(*parts))
    return entries


def write_manifest(path, entries) -> None:
    lines = [
        f"{e.scene_id}\t{e.visible_path}\t{e.infrared_path}\t{e.sequence_id}"
        for e in entries
    ]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_pairs(manifest_path):
    """Stream PairedSamples in manifest order; misaligned pairs are rejected."""
    root = Path(manifest_path).parent
    for entry in read_manifest(manifest_path):
        vis_path = root / entry.visible_path
        ir_path = root / entry.infrared_path
        for p in (vis_path, ir_path):
            if not p.exists():
                raise DataError(f"{entry.scene_id}: missing file {p}")
        visible = read_ppm(vis_path)
        infrared = read_pgm(ir_path)
        if visible.shape[1:] != infrared.shape[1:]:
            raise DataError(
                f"{entry.scene_id}: resolution mismatch "
                f"{visible.shape[1:]} vs {infrared.shape[1:]}"
            )
        yield PairedSample(
            visible=Tensor(visible), infrared=Tensor(infrared),
            scene_id=entry.scene_id, source=str(manifest_path),
        )


def downsample_frames(entries, stride: int):
    """Keep indices 0, stride, 2*stride, ... within each sequence group."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    counters: dict[str, int] = {}
    kept = []
    for e in entries:
        idx = counters.get(e.sequence_id, 0)
        counters[e.sequence_id] = idx + 1
        if idx % stride == 0:
            kept.append(e)
    return kept


def batch(samples, size: int, seed: int):
    """Seeded shuffle, then fixed-size batches; the final partial batch is kept."""
    if size < 1:
        raise ValueError(f"batch size must be >= 1, got {size}")
    items = list(samples)
    order = np.random.default_rng(seed).permutation(len(items))
    shuffled = [items[i] for i in order]
    for start in range(0, len(shuffled), size):
        yield shuffled[start:start + size]
