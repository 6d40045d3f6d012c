"""Forging a labeled training set out of a weakly labeled image corpus.

The corpus is a JSON-lines manifest of (image, topic) pairs, where topics are
web-search phrases. A detector (run offline; here consumed as a JSON-lines
proposal file) supplies scored category boxes per image. Forging keeps the
regions whose detector category is plausible for the image's topic and whose
score clears a threshold, merges topics up a fixed hierarchy into the four
target categories, and crops/downsamples each region into a 32x32 record.

Datasets are stored in a CIFAR-style binary format: per record one label byte
followed by 3072 bytes of channel-planar RGB (32x32), plus a JSON sidecar
(`<name>.meta.json`) naming the categories and counts.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import bilinear_resize, hist_equalize
from .errors import ConfigError, DataError
from .ppm import read_ppm

# Topic -> plausible detector categories. Detections of any other category on
# an image of that topic are treated as noise.
TOPIC_TABLE: dict[str, frozenset[str]] = {
    "pet": frozenset({"cat", "dog", "bird"}),
    "pedestrian": frozenset({"person"}),
    "mixer car": frozenset({"car"}),
    "car": frozenset({"car"}),
    "military truck": frozenset({"truck", "bus"}),
    "military off-road vehicle": frozenset({"car"}),
    "truck": frozenset({"truck", "bus"}),
    "amphibious armored vehicle": frozenset({"airplane", "train", "boat"}),
    "wheeled armored vehicle": frozenset({"airplane", "train", "boat"}),
    "goat": frozenset({"sheep"}),
    "cattle": frozenset({"cow"}),
    "off-road vehicle": frozenset({"car"}),
    "tank": frozenset({"airplane", "train", "boat"}),
    "armored personnel carrier": frozenset({"airplane", "train", "boat"}),
    "soldier": frozenset({"person"}),
}

# Topic -> target category (the label hierarchy, merged upward).
HIERARCHY: dict[str, str] = {
    "pedestrian": "Person",
    "soldier": "Person",
    "car": "Wheeled Vehicle",
    "military off-road vehicle": "Wheeled Vehicle",
    "off-road vehicle": "Wheeled Vehicle",
    "truck": "Wheeled Vehicle",
    "military truck": "Wheeled Vehicle",
    "mixer car": "Wheeled Vehicle",
    "armored personnel carrier": "Tracked Vehicle",
    "amphibious armored vehicle": "Tracked Vehicle",
    "tank": "Tracked Vehicle",
    "wheeled armored vehicle": "Tracked Vehicle",
    "pet": "Other",
    "cattle": "Other",
    "goat": "Other",
}

TARGET_CATEGORIES = ("Person", "Wheeled Vehicle", "Tracked Vehicle", "Other")

RECORD_BYTES = 1 + 3 * 32 * 32  # label byte + planar RGB


@dataclass(frozen=True)
class RegionProposal:
    """Detector box with half-open extent [x, x+w) by [y, y+h)."""

    x: int
    y: int
    w: int
    h: int
    category: str
    score: float

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise DataError(f"region has empty extent {self.w}x{self.h}")
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"region score {self.score} outside [0,1]")


@dataclass(frozen=True)
class ForgeConfig:
    score_threshold: float = 0.7  # inclusive: score >= threshold survives
    min_side: int = 2             # post-clip minimum box side
    output_size: int = 32

    def __post_init__(self):
        if not 0.0 < self.score_threshold <= 1.0:
            raise ConfigError(
                f"score_threshold must be in (0,1], got {self.score_threshold}")
        if self.min_side < 1:
            raise ConfigError(f"min_side must be >= 1, got {self.min_side}")


@dataclass
class CorpusRecord:
    path: str
    topic: str
    image: np.ndarray  # uint8 [3,H,W]


@dataclass
class CorpusManifest:
    records: list[CorpusRecord]
    topic_counts: dict[str, int]
    skipped: int = 0


def load_corpus(manifest_path) -> CorpusManifest:
    """Read a JSON-lines manifest of {"image": path, "topic": name}.

    Image paths are resolved relative to the manifest file. Topics must be in
    TOPIC_TABLE (case-insensitive). Records whose image cannot be read are
    skipped with a warning and counted; an unknown topic is an error.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    records: list[CorpusRecord] = []
    counts: dict[str, int] = {}
    skipped = 0
    with open(manifest_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{manifest_path}:{lineno}: malformed JSON: {e}") from None
            if "image" not in obj or "topic" not in obj:
                raise DataError(f"{manifest_path}:{lineno}: record needs image and topic")
            topic = str(obj["topic"]).strip().lower()
            if topic not in TOPIC_TABLE:
                raise DataError(f"{manifest_path}:{lineno}: unknown topic {obj['topic']!r}")
            img_path = base / obj["image"]
            try:
                image = read_ppm(img_path)
            except (DataError, OSError) as e:
                warnings.warn(f"skipping unreadable image {img_path}: {e}")
                skipped += 1
                continue
            records.append(CorpusRecord(path=str(obj["image"]), topic=topic, image=image))
            counts[topic] = counts.get(topic, 0) + 1
    return CorpusManifest(records=records, topic_counts=counts, skipped=skipped)


def load_proposals(path) -> dict[str, list[RegionProposal]]:
    """Read a JSON-lines proposal file: {"image": path, "regions": [...]}, one
    line per image; regions carry x, y, w, h, category, score."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"proposal file not found: {path}")
    out: dict[str, list[RegionProposal]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed JSON: {e}") from None
            regions = []
            for r in obj.get("regions", ()):
                try:
                    regions.append(RegionProposal(
                        x=int(r["x"]), y=int(r["y"]), w=int(r["w"]), h=int(r["h"]),
                        category=str(r["category"]).strip().lower(),
                        score=float(r["score"])))
                except KeyError as e:
                    raise DataError(f"{path}:{lineno}: region missing field {e}") from None
            out[str(obj["image"])] = regions
    return out


def clip_region(r: RegionProposal, width: int, height: int) -> RegionProposal | None:
    """Clip to the image; None if a side falls below 2 pixels."""
    x0 = max(r.x, 0)
    y0 = max(r.y, 0)
    x1 = min(r.x + r.w, width)
    y1 = min(r.y + r.h, height)
    if x1 - x0 < 2 or y1 - y0 < 2:
        return None
    return RegionProposal(x=x0, y=y0, w=x1 - x0, h=y1 - y0,
                          category=r.category, score=r.score)


def filter_regions(image: np.ndarray, topic: str, proposals: list[RegionProposal],
                   cfg: ForgeConfig = ForgeConfig()) -> list[RegionProposal]:
    """Keep proposals whose category is plausible for the topic and whose
    score clears the threshold (inclusive); clip survivors to the image."""
    if topic not in TOPIC_TABLE:
        raise DataError(f"unknown topic {topic!r}")
    allowed = TOPIC_TABLE[topic]
    _, h, w = image.shape
    kept = []
    for r in proposals:
        if r.category not in allowed or r.score < cfg.score_threshold:
            continue
        clipped = clip_region(r, w, h)
        if clipped is not None:
            kept.append(clipped)
    return kept


def merge_hierarchy(by_topic: dict[str, list]) -> dict[str, list]:
    """Relabel per-topic groups to target categories; items are preserved and
    append-ordered by input order."""
    merged: dict[str, list] = {c: [] for c in TARGET_CATEGORIES}
    for topic, items in by_topic.items():
        target = HIERARCHY.get(topic)
        if target is None:
            raise DataError(f"topic {topic!r} missing from the label hierarchy")
        merged[target].extend(items)
    return merged


@dataclass
class LabeledDataset:
    """In-memory labeled image set: uint8 [N,3,32,32] pixels, int labels."""

    images: np.ndarray
    labels: np.ndarray
    categories: tuple[str, ...]

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1:] != (3, 32, 32):
            raise DataError(f"images must be [N,3,32,32], got {self.images.shape}")
        if self.images.dtype != np.uint8:
            raise DataError(f"images must be uint8, got {self.images.dtype}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError("labels must align with images")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= len(self.categories)):
            raise DataError(f"labels must lie in [0, {len(self.categories)})")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.categories))


@dataclass
class ForgeStats:
    kept_regions: int = 0
    dropped_regions: int = 0
    per_topic: dict = field(default_factory=dict)
    per_category: dict = field(default_factory=dict)


def build_dataset(groups: dict[str, list[tuple[np.ndarray, RegionProposal]]],
                  cfg: ForgeConfig = ForgeConfig()) -> LabeledDataset:
    """Crop each (image, region), downsample to 32x32, equalize, and label by
    the group's target category."""
    images = []
    labels = []
    for li, category in enumerate(TARGET_CATEGORIES):
        for image, region in groups.get(category, ()):
            crop = image[:, region.y:region.y + region.h, region.x:region.x + region.w]
            small = bilinear_resize(np.ascontiguousarray(crop),
                                    cfg.output_size, cfg.output_size)
            images.append(hist_equalize(small))
            labels.append(li)
    if not images:
        raise DataError("no regions survived filtering; nothing to build")
    return LabeledDataset(images=np.stack(images),
                          labels=np.asarray(labels, dtype=np.int64),
                          categories=TARGET_CATEGORIES)


def forge_dataset(manifest: CorpusManifest,
                  proposals: dict[str, list[RegionProposal]],
                  cfg: ForgeConfig = ForgeConfig()) -> tuple[LabeledDataset, ForgeStats]:
    """Filter + merge + build, with bookkeeping."""
    stats = ForgeStats()
    by_topic: dict[str, list] = {}
    for rec in manifest.records:
        props = proposals.get(rec.path, [])
        kept = filter_regions(rec.image, rec.topic, props, cfg)
        stats.kept_regions += len(kept)
        stats.dropped_regions += len(props) - len(kept)
        if kept:
            bucket = by_topic.setdefault(rec.topic, [])
            bucket.extend((rec.image, r) for r in kept)
    stats.per_topic = {t: len(v) for t, v in sorted(by_topic.items())}
    merged = merge_hierarchy(by_topic)
    stats.per_category = {c: len(v) for c, v in merged.items()}
    ds = build_dataset(merged, cfg)
    return ds, stats


# -- binary dataset io -----------------------------------------------------------


def write_dataset(path, ds: LabeledDataset, provenance: dict | None = None) -> None:
    """Write CIFAR-style records plus the `<name>.meta.json` sidecar."""
    path = Path(path)
    if len(ds.categories) > 256:
        raise DataError("binary format stores labels in one byte")
    with open(path, "wb") as f:
        for img, label in zip(ds.images, ds.labels):
            f.write(bytes([int(label)]))
            f.write(img.tobytes())
    meta = {
        "categories": list(ds.categories),
        "count": len(ds),
        "counts": {c: int(n) for c, n in zip(ds.categories, ds.counts())},
    }
    if provenance:
        meta["provenance"] = provenance
    with open(meta_path(path), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def read_dataset(path, categories: tuple[str, ...] | None = None) -> LabeledDataset:
    """Read a CIFAR-style binary file.

    The category table comes from (in order of preference) the explicit
    argument, the sidecar, or generic names sized by the largest label seen.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset not found: {path}")
    raw = path.read_bytes()
    if len(raw) == 0:
        raise DataError(f"{path}: empty dataset file")
    if len(raw) % RECORD_BYTES:
        raise DataError(
            f"{path}: size {len(raw)} is not a multiple of the {RECORD_BYTES}-byte record")
    n = len(raw) // RECORD_BYTES
    body = np.frombuffer(raw, dtype=np.uint8).reshape(n, RECORD_BYTES)
    labels = body[:, 0].astype(np.int64)
    images = np.ascontiguousarray(body[:, 1:].reshape(n, 3, 32, 32))

    sidecar = meta_path(path)
    if categories is None and sidecar.is_file():
        try:
            meta = json.loads(sidecar.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DataError(f"{sidecar}: malformed sidecar: {e}") from None
        categories = tuple(meta["categories"])
        if meta.get("count") is not None and meta["count"] != n:
            raise DataError(
                f"{path}: file holds {n} records but sidecar says {meta['count']}")
    if categories is None:
        categories = tuple(f"class_{i}" for i in range(int(labels.max()) + 1))
    if labels.max() >= len(categories):
        raise DataError(
            f"{path}: label {int(labels.max())} out of range for "
            f"{len(categories)} categories")
    return LabeledDataset(images=images, labels=labels, categories=categories)


CIFAR10_CATEGORIES = ("airplane", "automobile", "bird", "cat", "deer",
                      "dog", "frog", "horse", "ship", "truck")
