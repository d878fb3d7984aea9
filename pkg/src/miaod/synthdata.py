"""Synthetic shape-detection scenes and their on-disk format.

A dataset directory holds ``manifest.txt``, one 8-bit binary PGM per image
(``img_<id>.pgm``) and one label file per image (``lab_<id>.txt``, lines of
``class_index x_min y_min x_max y_max``).
"""
from __future__ import annotations

import hashlib
import re
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_VERSION = "miaod-dataset v1"
MAX_PLACEMENT_TRIES = 100


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    classes: tuple[str, ...] = ("square", "disc", "cross")
    objects_per_image: tuple[int, int] = (1, 3)
    object_size: tuple[int, int] = (8, 16)
    foreground_intensity: tuple[float, float] = (0.55, 1.0)
    background_mean: float = 0.10
    noise_std: float = 0.05
    min_center_separation: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "objects_per_image", tuple(self.objects_per_image))
        object.__setattr__(self, "object_size", tuple(self.object_size))
        object.__setattr__(self, "foreground_intensity", tuple(self.foreground_intensity))
        self.validate()

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def validate(self) -> None:
        unknown = set(self.classes) - set(SHAPES)
        if not self.classes:
            raise ValueError("at least one class is required")
        if unknown:
            raise ValueError(f"unknown shape classes: {sorted(unknown)}")
        if self.image_size <= 0:
            raise ValueError("image_size must be positive")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError(f"bad objects_per_image range {self.objects_per_image}")
        lo, hi = self.object_size
        if not 0 < lo <= hi <= self.image_size:
            raise ValueError(f"object_size {self.object_size} must lie in (0, image_size]")
        lo, hi = self.foreground_intensity
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("foreground_intensity must lie within [0, 1]")
        if not 0.0 <= self.background_mean <= 1.0 or self.noise_std < 0:
            raise ValueError("bad background parameters")
        if self.min_center_separation < 0:
            raise ValueError("min_center_separation must be non-negative")


@dataclass(frozen=True)
class SceneObject:
    cls: int
    x: int
    y: int
    size: int
    intensity: float

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (float(self.x), float(self.y), float(self.x + self.size), float(self.y + self.size))


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray
    gt_boxes: np.ndarray  # (M, 4) x_min, y_min, x_max, y_max
    gt_classes: np.ndarray  # (M,)
    image_labels: np.ndarray = field(default=None)  # (C,) 0/1

    def __eq__(self, other):
        if not isinstance(other, ImageSample):
            return NotImplemented
        return (self.id == other.id
                and np.array_equal(self.pixels, other.pixels)
                and np.array_equal(self.gt_boxes, other.gt_boxes)
                and np.array_equal(self.gt_classes, other.gt_classes)
                and np.array_equal(self.image_labels, other.image_labels))


def image_labels_for(gt_classes, num_classes: int) -> np.ndarray:
    labels = np.zeros(num_classes, dtype=np.float64)
    labels[np.asarray(gt_classes, dtype=int)] = 1.0
    return labels


# ---------------------------------------------------------------- rasterisation


def _square_mask(size: int) -> np.ndarray:
    return np.ones((size, size), dtype=bool)


def _disc_mask(size: int) -> np.ndarray:
    r = size / 2.0
    c = (np.arange(size) + 0.5) - r
    return (c[None, :] ** 2 + c[:, None] ** 2) <= r * r


def _cross_mask(size: int) -> np.ndarray:
    width = max(2, size // 4)
    lo = (size - width) // 2
    mask = np.zeros((size, size), dtype=bool)
    mask[lo:lo + width, :] = True
    mask[:, lo:lo + width] = True
    return mask


SHAPES = {"square": _square_mask, "disc": _disc_mask, "cross": _cross_mask}


def render_scene(objects, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw objects in order (later ones overdraw), add noise, clamp to [0, 1]."""
    n = spec.image_size
    img = np.full((n, n), spec.background_mean, dtype=np.float64)
    for obj in objects:
        if obj.x < 0 or obj.y < 0 or obj.x + obj.size > n or obj.y + obj.size > n:
            raise ValueError(f"object {obj} leaves the {n}x{n} canvas")
        mask = SHAPES[spec.classes[obj.cls]](obj.size)
        region = img[obj.y:obj.y + obj.size, obj.x:obj.x + obj.size]
        region[mask] = obj.intensity
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _place_objects(spec: SceneSpec, rng: np.random.Generator, index: int) -> list[SceneObject]:
    n = spec.image_size
    count = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    for _ in range(MAX_PLACEMENT_TRIES):
        placed: list[SceneObject] = []
        centers: list[tuple[float, float]] = []
        for _ in range(count):
            size = int(rng.integers(spec.object_size[0], spec.object_size[1] + 1))
            x = int(rng.integers(0, n - size + 1))
            y = int(rng.integers(0, n - size + 1))
            cx, cy = x + size / 2.0, y + size / 2.0
            if any(np.hypot(cx - ox, cy - oy) < spec.min_center_separation for ox, oy in centers):
                break
            cls = int(rng.integers(0, spec.num_classes))
            intensity = float(rng.uniform(*spec.foreground_intensity))
            placed.append(SceneObject(cls, x, y, size, intensity))
            centers.append((cx, cy))
        else:
            return placed
    raise DatasetError(f"could not place {count} objects in sample {index} "
                       f"after {MAX_PLACEMENT_TRIES} attempts")


def _sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(split.encode()), index])


def sample_id(split: str, index: int) -> str:
    return f"{split}-{index:05d}"


def generate_sample(spec: SceneSpec, seed: int, index: int, split: str = "train") -> ImageSample:
    rng = _sample_rng(seed, split, index)
    objects = _place_objects(spec, rng, index)
    pixels = quantize(render_scene(objects, spec, rng))
    boxes = np.array([o.box for o in objects], dtype=np.float64).reshape(-1, 4)
    classes = np.array([o.cls for o in objects], dtype=np.int64)
    return ImageSample(sample_id(split, index), pixels, boxes, classes,
                       image_labels_for(classes, spec.num_classes))


def generate_dataset(spec: SceneSpec, count: int, seed: int, split: str = "train") -> list[ImageSample]:
    """Render ``count`` scenes; sample ``i`` depends only on (seed, split, i)."""
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    return [generate_sample(spec, seed, i, split) for i in range(count)]


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0


# ---------------------------------------------------------------- persistence


def encode_pgm(pixels: np.ndarray) -> bytes:
    h, w = pixels.shape
    raw = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode() + raw.tobytes()


def decode_pgm(blob: bytes) -> np.ndarray:
    # header is four whitespace-separated tokens followed by exactly one whitespace byte;
    # the payload itself may start with whitespace-valued bytes
    match = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", blob)
    if match is None:
        raise DatasetError("not an 8-bit binary PGM")
    w, h = int(match.group(1)), int(match.group(2))
    raw = blob[match.end():]
    if len(raw) != w * h:
        raise DatasetError(f"PGM payload has {len(raw)} bytes, expected {w * h}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def encode_labels(sample: ImageSample) -> bytes:
    lines = [" ".join([str(int(c))] + [_fmt(v) for v in box])
             for c, box in zip(sample.gt_classes, sample.gt_boxes)]
    return ("\n".join(lines) + ("\n" if lines else "")).encode()


def decode_labels(blob: bytes) -> tuple[np.ndarray, np.ndarray]:
    classes, boxes = [], []
    for line in blob.decode().splitlines():
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 5:
            raise DatasetError(f"bad label line {line!r}")
        classes.append(int(fields[0]))
        boxes.append([float(v) for v in fields[1:]])
    return (np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(classes, dtype=np.int64))


def _digest(*blobs: bytes) -> str:
    h = hashlib.sha256()
    for b in blobs:
        h.update(b)
    return h.hexdigest()


def _spec_lines(spec: SceneSpec) -> list[str]:
    out = []
    for key, value in asdict(spec).items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        out.append(f"{key} {value}")
    return out


def _parse_spec(fields: dict[str, str]) -> SceneSpec:
    def pair(text, cast):
        a, b = text.split(",")
        return (cast(a), cast(b))

    try:
        return SceneSpec(
            image_size=int(fields["image_size"]),
            classes=tuple(fields["classes"].split(",")),
            objects_per_image=pair(fields["objects_per_image"], int),
            object_size=pair(fields["object_size"], int),
            foreground_intensity=pair(fields["foreground_intensity"], float),
            background_mean=float(fields["background_mean"]),
            noise_std=float(fields["noise_std"]),
            min_center_separation=float(fields["min_center_separation"]),
        )
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"corrupt manifest spec: {exc}") from None


def save_dataset(samples: list[ImageSample], directory, spec: SceneSpec, seed: int,
                 split: str = "train") -> str:
    """Write a dataset directory; returns the dataset checksum."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        pgm, lab = encode_pgm(s.pixels), encode_labels(s)
        (root / f"img_{s.id}.pgm").write_bytes(pgm)
        (root / f"lab_{s.id}.txt").write_bytes(lab)
        records.append((s.id, _digest(pgm, lab)))
    total = _digest(*(d.encode() for _, d in records))
    lines = [f"# {MANIFEST_VERSION}", *_spec_lines(spec), f"count {len(samples)}",
             f"seed {seed}", f"split {split}", f"checksum {total}"]
    lines += [f"sample {sid} {digest}" for sid, digest in records]
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return total


@dataclass
class LoadedDataset:
    samples: list[ImageSample]
    spec: SceneSpec
    seed: int
    split: str
    checksum: str


def load_dataset(directory) -> LoadedDataset:
    root = Path(directory)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise DatasetError(f"missing manifest in {root}")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0] != f"# {MANIFEST_VERSION}":
        raise DatasetError(f"corrupt manifest header in {manifest}")
    fields: dict[str, str] = {}
    records: list[tuple[str, str]] = []
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "sample":
            sid, _, digest = rest.partition(" ")
            records.append((sid, digest))
        elif key:
            fields[key] = rest
    spec = _parse_spec(fields)
    try:
        count, seed = int(fields["count"]), int(fields["seed"])
        split, checksum = fields["split"], fields["checksum"]
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"corrupt manifest: {exc}") from None
    if count != len(records):
        raise DatasetError(f"manifest count {count} does not match {len(records)} sample records")
    if _digest(*(d.encode() for _, d in records)) != checksum:
        raise DatasetError("manifest checksum mismatch")

    samples = []
    for sid, digest in records:
        img_path, lab_path = root / f"img_{sid}.pgm", root / f"lab_{sid}.txt"
        if not img_path.is_file() or not lab_path.is_file():
            raise DatasetError(f"missing files for sample {sid}")
        pgm, lab = img_path.read_bytes(), lab_path.read_bytes()
        if _digest(pgm, lab) != digest:
            raise DatasetError(f"checksum mismatch for sample {sid}")
        boxes, classes = decode_labels(lab)
        samples.append(ImageSample(sid, decode_pgm(pgm), boxes, classes,
                                   image_labels_for(classes, spec.num_classes)))
    return LoadedDataset(samples, spec, seed, split, checksum)


def persist_roundtrip(samples: list[ImageSample], directory, spec: SceneSpec | None = None,
                      seed: int = 0) -> list[ImageSample]:
    save_dataset(samples, directory, spec or SceneSpec(), seed)
    return load_dataset(directory).samples
