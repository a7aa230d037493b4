"""Sequence manifests: on-disk format, validation, tiny-object test, statistics and splits.

Layout of a dataset root::

    root/
      <sequence>/
        groundtruth.txt   one ``x,y,w,h`` line per frame (top-left origin, pixels)
        attributes.txt    12 comma-separated 0/1 flags in ATTRIBUTE_NAMES order
        meta.txt          ``key=value`` lines: class, width, height[, frames]
        img/              optional per-frame images, sorted by file name

The tiny-object test averages per-frame box *area* and compares it to 22*22 px^2;
a mean of side lengths would be an equally defensible reading.
"""
from __future__ import annotations

import math
import random
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

ATTRIBUTE_NAMES = ("SV", "FM", "OV", "IV", "CM", "MB", "BC", "SO", "PO", "FO", "AM", "LI")

TINY_ABSOLUTE_AREA = 22.0 * 22.0
TINY_RELATIVE_AREA = 0.01

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

SPLIT_TAGS = ("train", "test", "unassigned")


class DatasetError(Exception):
    pass


class SequenceLoadError(DatasetError):
    """A single sequence directory could not be parsed."""

    def __init__(self, sequence: str, message: str):
        super().__init__(f"{sequence}: {message}")
        self.sequence = sequence
        self.message = message


class ValidationError(SequenceLoadError):
    """The sequence parsed but violates an invariant."""


def format_coord(value: float) -> str:
    """Format with two decimals unless that would lose precision."""
    text = f"{value:.2f}"
    if float(text) == value:
        return text
    return repr(float(value))


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive size, got w={self.w}, h={self.h}")

    @classmethod
    def parse(cls, line: str) -> "BoundingBox":
        parts = line.replace("\t", ",").replace(" ", ",").split(",")
        parts = [p for p in parts if p]
        if len(parts) != 4:
            raise ValueError(f"expected 4 values, got {len(parts)}: {line!r}")
        return cls(*(float(p) for p in parts))

    def format(self) -> str:
        return ",".join(format_coord(v) for v in (self.x, self.y, self.w, self.h))

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)


@dataclass(frozen=True)
class FrameAnnotation:
    frame_index: int
    box: BoundingBox
    image_width: int
    image_height: int

    def check(self, tol: float = 1e-6) -> None:
        b = self.box
        if b.x < -tol or b.y < -tol:
            raise ValueError(f"frame {self.frame_index}: box starts outside the image")
        if b.x + b.w > self.image_width + tol or b.y + b.h > self.image_height + tol:
            raise ValueError(f"frame {self.frame_index}: box ends outside the image")


@dataclass(frozen=True)
class AttributeVector:
    SV: bool = False
    FM: bool = False
    OV: bool = False
    IV: bool = False
    CM: bool = False
    MB: bool = False
    BC: bool = False
    SO: bool = False
    PO: bool = False
    FO: bool = False
    AM: bool = False
    LI: bool = False

    @classmethod
    def from_flags(cls, flags: Sequence[int | bool]) -> "AttributeVector":
        if len(flags) != len(ATTRIBUTE_NAMES):
            raise ValueError(f"expected {len(ATTRIBUTE_NAMES)} attribute flags, got {len(flags)}")
        return cls(*(bool(int(f)) for f in flags))

    @classmethod
    def parse(cls, text: str) -> "AttributeVector":
        values = [v.strip() for v in text.strip().split(",") if v.strip()]
        for v in values:
            if v not in ("0", "1"):
                raise ValueError(f"attribute flags must be 0 or 1, got {v!r}")
        return cls.from_flags([int(v) for v in values])

    def as_tuple(self) -> tuple[bool, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    def format(self) -> str:
        return ",".join(str(int(v)) for v in self.as_tuple())

    def active(self) -> list[str]:
        return [name for name, v in zip(ATTRIBUTE_NAMES, self.as_tuple()) if v]


@dataclass
class SequenceRecord:
    name: str
    class_label: str
    annotations: list[FrameAnnotation]
    attributes: AttributeVector = field(default_factory=AttributeVector)
    frame_source: Path | Callable[[int], np.ndarray] | None = None

    def __post_init__(self):
        if not self.annotations:
            raise ValueError(f"{self.name}: sequence needs at least one annotation")
        sizes = {(a.image_width, a.image_height) for a in self.annotations}
        if len(sizes) != 1:
            raise ValueError(f"{self.name}: frames have differing image sizes {sorted(sizes)}")

    def __len__(self) -> int:
        return len(self.annotations)

    @property
    def image_size(self) -> tuple[int, int]:
        a = self.annotations[0]
        return a.image_width, a.image_height

    @property
    def boxes(self) -> np.ndarray:
        return np.array([a.box.as_list() for a in self.annotations], dtype=np.float64)

    def frame_paths(self) -> list[Path]:
        if not isinstance(self.frame_source, Path):
            return []
        return sorted(p for p in self.frame_source.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)

    def load_frame(self, index: int) -> np.ndarray:
        """Return frame ``index`` as an HxWx3 uint8 array."""
        if callable(self.frame_source):
            return self.frame_source(index)
        paths = self.frame_paths()
        if not paths:
            raise DatasetError(f"{self.name}: no frames available")
        from PIL import Image

        with Image.open(paths[index]) as im:
            return np.asarray(im.convert("RGB"))

    @classmethod
    def from_boxes(cls, name: str, boxes: Iterable[Sequence[float]], image_size: tuple[int, int],
                   class_label: str = "object", attributes: AttributeVector | None = None,
                   frame_source=None) -> "SequenceRecord":
        w, h = image_size
        anns = [FrameAnnotation(i, BoundingBox(*map(float, b)), int(w), int(h)) for i, b in enumerate(boxes)]
        return cls(name, class_label, anns, attributes or AttributeVector(), frame_source)


@dataclass
class DatasetManifest:
    sequences: list[SequenceRecord]
    split_tags: dict[str, str] = field(default_factory=dict)
    errors: list[SequenceLoadError] = field(default_factory=list)

    def __post_init__(self):
        names = [s.name for s in self.sequences]
        dupes = [n for n, c in Counter(names).items() if c > 1]
        if dupes:
            raise ValueError(f"duplicate sequence names: {dupes}")
        for name in names:
            self.split_tags.setdefault(name, "unassigned")

    def __len__(self) -> int:
        return len(self.sequences)

    def __getitem__(self, name: str) -> SequenceRecord:
        for s in self.sequences:
            if s.name == name:
                return s
        raise KeyError(name)

    def names(self) -> list[str]:
        return [s.name for s in self.sequences]

    def subset(self, tag: str) -> list[SequenceRecord]:
        return [s for s in self.sequences if self.split_tags.get(s.name) == tag]


# -- on-disk format ---------------------------------------------------------


def parse_groundtruth(text: str) -> list[BoundingBox]:
    return [BoundingBox.parse(line) for line in text.splitlines() if line.strip()]


def format_groundtruth(boxes: Iterable[BoundingBox]) -> str:
    return "".join(b.format() + "\n" for b in boxes)


def parse_meta(text: str) -> dict[str, str]:
    meta = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"meta line without '=': {line!r}")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def format_meta(class_label: str, width: int, height: int, frames: int | None = None) -> str:
    lines = [f"class={class_label}", f"width={width}", f"height={height}"]
    if frames is not None:
        lines.append(f"frames={frames}")
    return "\n".join(lines) + "\n"


def load_sequence(seq_dir: Path) -> SequenceRecord:
    """Parse one sequence directory, raising SequenceLoadError on any problem."""
    seq_dir = Path(seq_dir)
    name = seq_dir.name
    files = {}
    for fname in ("groundtruth.txt", "attributes.txt", "meta.txt"):
        path = seq_dir / fname
        if not path.is_file():
            raise SequenceLoadError(name, f"missing {fname}")
        files[fname] = path.read_text()

    try:
        boxes = parse_groundtruth(files["groundtruth.txt"])
    except ValueError as exc:
        raise ValidationError(name, f"groundtruth.txt: {exc}") from None
    if not boxes:
        raise ValidationError(name, "groundtruth.txt has no annotations")

    try:
        attrs = AttributeVector.parse(files["attributes.txt"])
    except ValueError as exc:
        raise ValidationError(name, f"attributes.txt: {exc}") from None

    try:
        meta = parse_meta(files["meta.txt"])
        width, height = int(meta["width"]), int(meta["height"])
        class_label = meta["class"]
    except (ValueError, KeyError) as exc:
        raise ValidationError(name, f"meta.txt: bad or missing field {exc}") from None
    if width <= 0 or height <= 0:
        raise ValidationError(name, f"meta.txt: non-positive image size {width}x{height}")

    img_dir = seq_dir / "img"
    frame_count = None
    if img_dir.is_dir():
        frame_count = sum(1 for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    elif "frames" in meta:
        frame_count = int(meta["frames"])
    if frame_count is not None and frame_count != len(boxes):
        raise ValidationError(name, f"{len(boxes)} annotations but {frame_count} frames")

    anns = [FrameAnnotation(i, b, width, height) for i, b in enumerate(boxes)]
    for a in anns:
        try:
            a.check()
        except ValueError as exc:
            raise ValidationError(name, str(exc)) from None

    return SequenceRecord(name, class_label, anns, attrs, img_dir if img_dir.is_dir() else None)


def load_manifest(root_path: str | Path) -> DatasetManifest:
    """Load every sequence under ``root_path``; failures are collected in ``manifest.errors``."""
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    sequences, errors = [], []
    for seq_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            sequences.append(load_sequence(seq_dir))
        except SequenceLoadError as exc:
            errors.append(exc)
    return DatasetManifest(sequences, errors=errors)


def write_sequence(root: str | Path, seq: SequenceRecord, frames: np.ndarray | None = None) -> Path:
    """Write ``seq`` (and optionally its frames) in the on-disk format."""
    seq_dir = Path(root) / seq.name
    seq_dir.mkdir(parents=True, exist_ok=True)
    (seq_dir / "groundtruth.txt").write_text(format_groundtruth(a.box for a in seq.annotations))
    (seq_dir / "attributes.txt").write_text(seq.attributes.format() + "\n")
    w, h = seq.image_size
    (seq_dir / "meta.txt").write_text(format_meta(seq.class_label, w, h, len(seq)))
    if frames is not None:
        from PIL import Image

        img_dir = seq_dir / "img"
        img_dir.mkdir(exist_ok=True)
        for i, frame in enumerate(frames):
            Image.fromarray(frame).save(img_dir / f"{i + 1:08d}.png")
    return seq_dir


# -- tiny-object definition ---------------------------------------------------


def average_absolute_size(seq: SequenceRecord) -> float:
    """Mean per-frame box area in px^2."""
    b = seq.boxes
    return float(np.mean(b[:, 2] * b[:, 3]))


def average_relative_size(seq: SequenceRecord) -> float:
    """Mean per-frame ratio of box area to image area."""
    w, h = seq.image_size
    if w <= 0 or h <= 0:
        raise ValueError("image area must be positive")
    b = seq.boxes
    return float(np.mean(b[:, 2] * b[:, 3] / (w * h)))


def is_tiny(seq: SequenceRecord) -> bool:
    return average_absolute_size(seq) < TINY_ABSOLUTE_AREA and average_relative_size(seq) < TINY_RELATIVE_AREA


# -- statistics -------------------------------------------------------------------


@dataclass
class DatasetStats:
    num_sequences: int
    min_frames: int
    max_frames: int
    avg_frames: float
    total_frames: int
    class_histogram: dict[str, int]
    attribute_counts: dict[str, int]
    tiny_sequences: int

    @property
    def avg_frames_display(self) -> int:
        """Nearest integer, halves rounded up; ``avg_frames`` keeps the exact value."""
        return int(math.floor(self.avg_frames + 0.5))

    @property
    def total_frames_display(self) -> str:
        if self.total_frames >= 1000:
            return f"{self.total_frames / 1000:.1f}K"
        return str(self.total_frames)

    def rows(self) -> list[tuple[str, str]]:
        rows = [
            ("videos", str(self.num_sequences)),
            ("classes", str(len(self.class_histogram))),
            ("tiny videos", str(self.tiny_sequences)),
            ("min frames", str(self.min_frames)),
            ("max frames", str(self.max_frames)),
            ("avg frames", str(self.avg_frames_display)),
            ("total frames", self.total_frames_display),
        ]
        rows += [(f"attr {k}", str(v)) for k, v in self.attribute_counts.items()]
        rows += [(f"class {k}", str(v)) for k, v in sorted(self.class_histogram.items())]
        return rows


def dataset_stats(manifest: DatasetManifest | Sequence[SequenceRecord]) -> DatasetStats:
    seqs = manifest.sequences if isinstance(manifest, DatasetManifest) else list(manifest)
    if not seqs:
        raise ValueError("dataset_stats needs at least one sequence")
    counts = [len(s) for s in seqs]
    total = sum(counts)
    attr_counts = {name: 0 for name in ATTRIBUTE_NAMES}
    for s in seqs:
        for name in s.attributes.active():
            attr_counts[name] += 1
    return DatasetStats(
        num_sequences=len(seqs),
        min_frames=min(counts),
        max_frames=max(counts),
        avg_frames=total / len(seqs),
        total_frames=total,
        class_histogram=dict(Counter(s.class_label for s in seqs)),
        attribute_counts=attr_counts,
        tiny_sequences=sum(is_tiny(s) for s in seqs),
    )


# -- splitting ---------------------------------------------------------------------


def split_manifest(manifest: DatasetManifest, test_pool: Iterable[str], test_count: int,
                   seed: int) -> DatasetManifest:
    """Tag ``test_count`` sequences drawn from ``test_pool`` as test, everything else as train."""
    pool = sorted(set(test_pool))
    known = set(manifest.names())
    missing = [n for n in pool if n not in known]
    if missing:
        raise ValueError(f"test pool names not in manifest: {missing[:5]}")
    if test_count < 0 or test_count > len(pool):
        raise ValueError(f"test_count={test_count} must be within [0, {len(pool)}]")
    test = set(random.Random(seed).sample(pool, test_count))
    tags = {n: ("test" if n in test else "train") for n in manifest.names()}
    return DatasetManifest(list(manifest.sequences), split_tags=tags, errors=list(manifest.errors))
