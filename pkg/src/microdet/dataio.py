"""File formats and fixtures: tensors, annotations, manifests, config, toy scenes.

Tensor files ("T4v1") are an ASCII header `T4 n c h w` plus little-endian
float64 payload. Annotations are one `class_id cx cy w h` line per object,
normalized. Predictions add a confidence column. Config files are flat
`key = value` text with `#` comments. Everything round-trips exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import Box, iou
from .metrics import Detection, GroundTruth
from .tensor import DomainError, ShapeError, Tensor4


class AnnotationError(ValueError):
    """Malformed or out-of-range annotation line; carries the line number."""

    def __init__(self, path, line_no, detail):
        self.path = str(path)
        self.line_no = line_no
        self.detail = detail
        super().__init__(f"{path}:{line_no}: {detail}")


# ---------------------------------------------------------------------------
# T4v1 tensors


def write_t4(path, tensor):
    arr = tensor.data if isinstance(tensor, Tensor4) else np.asarray(tensor, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError("t4", f"expected 4 axes, got {arr.ndim}")
    n, c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"T4 {n} {c} {h} {w}\n".encode())
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_t4(path) -> Tensor4:
    with open(path, "rb") as fh:
        header = fh.readline().decode()
        parts = header.split()
        if len(parts) != 5 or parts[0] != "T4":
            raise DomainError("t4", f"{path}: bad header {header!r}")
        shape = tuple(int(v) for v in parts[1:])
        numel = int(np.prod(shape))
        payload = fh.read(8 * numel)
        if len(payload) != 8 * numel:
            raise DomainError("t4", f"{path}: truncated payload "
                                    f"({len(payload)} of {8 * numel} bytes)")
        return Tensor4(np.frombuffer(payload, dtype="<f8").reshape(shape).copy())


# ---------------------------------------------------------------------------
# annotations and predictions


def _parse_line(path, line_no, line, n_fields):
    parts = line.split()
    if len(parts) != n_fields:
        raise AnnotationError(path, line_no, f"expected {n_fields} fields, got {len(parts)}")
    try:
        cls = int(parts[0])
        vals = [float(v) for v in parts[1:]]
    except ValueError as exc:
        raise AnnotationError(path, line_no, f"unparsable number: {exc}") from None
    if cls < 0:
        raise AnnotationError(path, line_no, f"negative class id {cls}")
    for v in vals:
        if not 0.0 <= v <= 1.0:
            raise AnnotationError(path, line_no, f"value {v} outside [0, 1]")
    return cls, vals


def load_annotations(path) -> list[GroundTruth]:
    """`class_id cx cy w h` per line, all normalized; empty file = no objects."""
    path = Path(path)
    image_id = path.stem
    out = []
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        cls, (cx, cy, w, h) = _parse_line(path, line_no, line, 5)
        if w <= 0 or h <= 0:
            raise AnnotationError(path, line_no, f"degenerate box w={w}, h={h}")
        out.append(GroundTruth(cls, Box(cx, cy, w, h), image_id))
    return out


def save_annotations(path, gts):
    lines = [f"{g.class_id} {g.box.cx:.17g} {g.box.cy:.17g} "
             f"{g.box.w:.17g} {g.box.h:.17g}" for g in gts]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_predictions(path) -> list[Detection]:
    """`class_id confidence cx cy w h` per line."""
    path = Path(path)
    image_id = path.stem
    out = []
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        cls, (conf, cx, cy, w, h) = _parse_line(path, line_no, line, 6)
        if w <= 0 or h <= 0:
            raise AnnotationError(path, line_no, f"degenerate box w={w}, h={h}")
        out.append(Detection(cls, conf, Box(cx, cy, w, h), image_id))
    return out


def save_predictions(path, dets):
    lines = [f"{d.class_id} {d.confidence:.17g} {d.box.cx:.17g} {d.box.cy:.17g} "
             f"{d.box.w:.17g} {d.box.h:.17g}" for d in dets]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# config files


def parse_config(path) -> dict:
    """Flat `key = value` UTF-8 text; `#` starts a comment."""
    out = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise AnnotationError(path, line_no, f"expected key = value, got {stripped!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_config(path, values: dict):
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass
class DatasetManifest:
    classes: list[str]
    entries: list[tuple[str, str]]  # (image tensor path, annotation path)
    split: str = "train"
    root: Path = field(default_factory=Path)

    def validate(self):
        for img, ann in self.entries:
            for p in (self.root / img, self.root / ann):
                if not p.exists():
                    raise DomainError("manifest", f"referenced file missing: {p}")
        for _, ann in self.entries:
            for g in load_annotations(self.root / ann):
                if g.class_id >= len(self.classes):
                    raise DomainError(
                        "manifest",
                        f"{ann}: class id {g.class_id} >= class count {len(self.classes)}",
                    )

    def load_image(self, idx) -> Tensor4:
        return read_t4(self.root / self.entries[idx][0])

    def load_gts(self, idx) -> list[GroundTruth]:
        return load_annotations(self.root / self.entries[idx][1])


def save_manifest(path, manifest: DatasetManifest):
    lines = [f"split = {manifest.split}",
             f"classes = {','.join(manifest.classes)}"]
    lines += [f"image = {img} {ann}" for img, ann in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    split, classes, entries = "train", [], []
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise AnnotationError(path, line_no, f"expected key = value, got {stripped!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key == "split":
            split = value
        elif key == "classes":
            classes = [c.strip() for c in value.split(",") if c.strip()]
        elif key == "image":
            parts = value.split()
            if len(parts) != 2:
                raise AnnotationError(path, line_no, "image line needs <tensor> <annotation>")
            entries.append((parts[0], parts[1]))
        else:
            raise AnnotationError(path, line_no, f"unknown manifest key {key!r}")
    if not classes:
        raise DomainError("manifest", f"{path}: no classes declared")
    manifest = DatasetManifest(classes, entries, split, root=path.parent)
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# synthetic scenes

_PALETTE = np.array([
    [0.95, 0.25, 0.20],
    [0.20, 0.35, 0.95],
    [0.20, 0.90, 0.30],
    [0.95, 0.85, 0.20],
    [0.85, 0.25, 0.90],
    [0.25, 0.90, 0.90],
])


def generate_toy_scene(seed, image_size=64, num_classes=2, num_objects=2,
                       min_size=14, max_size=30):
    """Noise background plus colored rectangles; annotations are exact.

    Rectangles land on integer pixel bounds and the emitted normalized box
    is computed from those same bounds, so a rasterization round trip agrees
    within one pixel by construction. Deterministic per seed.
    """
    if max_size + 4 >= image_size:
        raise DomainError("toy_scene", f"objects up to {max_size}px cannot fit "
                                       f"with margin in a {image_size}px image")
    rng = np.random.default_rng(seed)
    img = 0.25 + 0.08 * rng.random((1, 3, image_size, image_size))
    gts = []
    placed = []
    attempts = 0
    while len(gts) < num_objects:
        attempts += 1
        if attempts > 200 * num_objects:
            raise DomainError("toy_scene", f"could not pack {num_objects} objects "
                                           f"after {attempts} attempts")
        w = int(rng.integers(min_size, max_size + 1))
        h = int(rng.integers(min_size, max_size + 1))
        x0 = int(rng.integers(2, image_size - w - 1))
        y0 = int(rng.integers(2, image_size - h - 1))
        box = Box((x0 + w / 2) / image_size, (y0 + h / 2) / image_size,
                  w / image_size, h / image_size)
        if any(iou(box, other) > 0.1 for other in placed):
            continue
        cls = int(rng.integers(num_classes))
        color = _PALETTE[cls % len(_PALETTE)] * (1.0 - 0.3 * (cls // len(_PALETTE)))
        patch = np.tile(color.reshape(3, 1, 1), (1, h, w)).copy()
        if cls % 2 == 1:  # stripe texture so odd classes differ by more than hue
            patch[:, ::4, :] *= 0.65
        patch += 0.02 * rng.standard_normal((3, h, w))
        img[0, :, y0:y0 + h, x0:x0 + w] = patch
        placed.append(box)
        gts.append(GroundTruth(cls, box, "0"))
    np.clip(img, 0.0, 1.0, out=img)
    return Tensor4(img), gts


def generate_toy_dataset(out_dir, seed=0, n_images=20, image_size=64, num_classes=2,
                         min_objects=1, max_objects=3):
    """Write images, labels, classes and a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_images):
        n_obj = int(rng.integers(min_objects, max_objects + 1))
        scene_seed = int(rng.integers(0, 2**31 - 1))
        img, gts = generate_toy_scene(scene_seed, image_size, num_classes, n_obj)
        stem = f"img_{i:03d}"
        write_t4(out_dir / "images" / f"{stem}.t4", img)
        save_annotations(out_dir / "labels" / f"{stem}.txt",
                         [GroundTruth(g.class_id, g.box, stem) for g in gts])
        entries.append((f"images/{stem}.t4", f"labels/{stem}.txt"))
    classes = [f"class{i}" for i in range(num_classes)]
    manifest = DatasetManifest(classes, entries, "train", root=out_dir)
    save_manifest(out_dir / "manifest.txt", manifest)
    return out_dir / "manifest.txt"
