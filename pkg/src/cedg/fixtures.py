"""Deterministic desk-scale fixtures: a drawable stand-in for field data.

Four visual families, one per target category: tall person figures, boxy
vehicles on circular wheels, tracked hulls with turrets and stud bands, and
four-legged animal blobs for Other. The generator emits a weakly labeled
corpus (64x64 scenes, one topic each, with a mock detector's proposals) plus
object-centered 32x32 train/val splits in the binary dataset format. Given
the same seed, every byte of every output file is identical across runs.

The three outputs deliberately live in different visual regimes, mirroring
the data situation the pipeline exists for:

- the train split is the broad common domain: every background and every
  palette appears, with no relation between the two;
- the corpus is a narrow slice with a trap: each category always sits on its
  own signature background in a single palette entry, so a model fit only to
  crops from it can score well on background alone;
- the val split is the target domain: backgrounds the corpus never uses
  (though the train split does) and full palettes, so the shortcut fails.

The drawing is deliberately simple; what matters is that the categories are
linearly separable (probe accuracy > 0.9) so training smoke tests measure
learning, not noise.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .domainforge import (
    HIERARCHY, TARGET_CATEGORIES, TOPIC_TABLE, LabeledDataset, write_dataset,
)
from .errors import ConfigError
from .ppm import write_ppm
from .rng import stream

SHAPE_KINDS = ("person", "wheeled", "tracked", "other")  # aligned with TARGET_CATEGORIES

_PALETTES = {
    "person": [(200, 60, 50), (60, 90, 200), (70, 160, 70), (190, 170, 40)],
    "wheeled": [(180, 30, 30), (40, 60, 180), (220, 220, 220), (240, 160, 30)],
    "tracked": [(110, 115, 70), (130, 110, 80), (105, 105, 105), (90, 120, 95)],
    "other": [(150, 100, 60), (120, 120, 120), (230, 225, 210), (90, 70, 50)],
}
# signature corpus background per category: the shortcut a corpus-only model
# can learn instead of shape
_CORPUS_BACKGROUNDS = {
    "person": (95, 125, 160),
    "wheeled": (165, 125, 90),
    "tracked": (100, 145, 100),
    "other": (150, 150, 150),
}
_VAL_BACKGROUNDS = [(135, 110, 140), (115, 145, 135), (155, 140, 110), (120, 120, 105)]
# the common domain sees everything: val backgrounds, corpus backgrounds
# (decoupled from category), and four of its own
_TRAIN_BACKGROUNDS = (
    _VAL_BACKGROUNDS
    + sorted(_CORPUS_BACKGROUNDS.values())
    + [(120, 140, 90), (150, 130, 100), (110, 120, 130), (140, 140, 120)]
)

_ALL_DETECTOR_CATEGORIES = sorted({c for cats in TOPIC_TABLE.values() for c in cats})


def _grid(size: int):
    return np.mgrid[0:size, 0:size].astype(np.float64)


def _paint(canvas: np.ndarray, mask: np.ndarray, color) -> None:
    for ch in range(3):
        canvas[ch][mask] = color[ch]


def _ellipse(yy, xx, cy, cx, ry, rx) -> np.ndarray:
    return ((yy - cy) / max(ry, 1e-6)) ** 2 + ((xx - cx) / max(rx, 1e-6)) ** 2 <= 1.0


def _rect(yy, xx, y0, y1, x0, x1) -> np.ndarray:
    return (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)


def _draw_person(canvas, yy, xx, cy, cx, s, rng, pal=None) -> None:
    body = pal if pal is not None else rng.choice(len(_PALETTES["person"]))
    clothes = _PALETTES["person"][body]
    skin = (225, 180, 150)
    _paint(canvas, _ellipse(yy, xx, cy + 0.10 * s, cx, 0.32 * s, 0.14 * s), clothes)
    _paint(canvas, _rect(yy, xx, cy + 0.18 * s, cy + 0.48 * s, cx - 0.10 * s, cx - 0.03 * s),
           tuple(int(v * 0.6) for v in clothes))
    _paint(canvas, _rect(yy, xx, cy + 0.18 * s, cy + 0.48 * s, cx + 0.03 * s, cx + 0.10 * s),
           tuple(int(v * 0.6) for v in clothes))
    _paint(canvas, _ellipse(yy, xx, cy - 0.32 * s, cx, 0.13 * s, 0.11 * s), skin)


def _draw_wheeled(canvas, yy, xx, cy, cx, s, rng, pal=None) -> None:
    i = pal if pal is not None else rng.choice(len(_PALETTES["wheeled"]))
    body = _PALETTES["wheeled"][i]
    _paint(canvas, _rect(yy, xx, cy - 0.16 * s, cy + 0.12 * s, cx - 0.40 * s, cx + 0.40 * s), body)
    _paint(canvas, _rect(yy, xx, cy - 0.32 * s, cy - 0.16 * s, cx - 0.18 * s, cx + 0.14 * s),
           tuple(min(255, int(v * 1.2)) for v in body))
    for wx in (cx - 0.24 * s, cx + 0.24 * s):
        _paint(canvas, _ellipse(yy, xx, cy + 0.16 * s, wx, 0.11 * s, 0.11 * s), (25, 25, 25))
        _paint(canvas, _ellipse(yy, xx, cy + 0.16 * s, wx, 0.04 * s, 0.04 * s), (160, 160, 160))


def _draw_tracked(canvas, yy, xx, cy, cx, s, rng, pal=None) -> None:
    i = pal if pal is not None else rng.choice(len(_PALETTES["tracked"]))
    hull = _PALETTES["tracked"][i]
    _paint(canvas, _rect(yy, xx, cy - 0.10 * s, cy + 0.10 * s, cx - 0.38 * s, cx + 0.38 * s), hull)
    _paint(canvas, _rect(yy, xx, cy - 0.28 * s, cy - 0.10 * s, cx - 0.14 * s, cx + 0.14 * s),
           tuple(int(v * 0.85) for v in hull))
    _paint(canvas, _rect(yy, xx, cy - 0.24 * s, cy - 0.19 * s, cx + 0.14 * s, cx + 0.44 * s),
           (50, 50, 45))
    band = _rect(yy, xx, cy + 0.10 * s, cy + 0.26 * s, cx - 0.42 * s, cx + 0.42 * s)
    _paint(canvas, band, (40, 40, 38))
    stud_w = max(2, int(0.07 * s))
    stud = band & ((xx.astype(np.int64) // stud_w) % 2 == 0)
    _paint(canvas, stud, (150, 150, 140))


def _draw_other(canvas, yy, xx, cy, cx, s, rng, pal=None) -> None:
    i = pal if pal is not None else rng.choice(len(_PALETTES["other"]))
    coat = _PALETTES["other"][i]
    for lx in (-0.26, -0.10, 0.08, 0.24):
        _paint(canvas, _rect(yy, xx, cy + 0.08 * s, cy + 0.36 * s,
                             cx + lx * s, cx + (lx + 0.06) * s),
               tuple(int(v * 0.7) for v in coat))
    _paint(canvas, _ellipse(yy, xx, cy - 0.02 * s, cx - 0.02 * s, 0.16 * s, 0.34 * s), coat)
    _paint(canvas, _ellipse(yy, xx, cy - 0.16 * s, cx + 0.32 * s, 0.10 * s, 0.10 * s), coat)
    _paint(canvas, _ellipse(yy, xx, cy - 0.24 * s, cx + 0.36 * s, 0.05 * s, 0.03 * s),
           tuple(int(v * 0.6) for v in coat))


_DRAWERS = {"person": _draw_person, "wheeled": _draw_wheeled,
            "tracked": _draw_tracked, "other": _draw_other}


def _background(size: int, rng: np.random.Generator, noise: float,
                options) -> np.ndarray:
    base = options[rng.choice(len(options))]
    canvas = np.empty((3, size, size), dtype=np.float64)
    ramp = np.linspace(-12, 12, size)[None, :]
    for ch in range(3):
        canvas[ch] = base[ch] + ramp
    canvas += rng.normal(0.0, noise, size=canvas.shape)
    return canvas


def _finish(canvas: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)


def render_scene(kind: str, rng: np.random.Generator, size: int = 32,
                 noise: float = 10.0, backgrounds=None) -> np.ndarray:
    """One object-centered scene, e.g. a field-style 32x32 sample."""
    if kind not in _DRAWERS:
        raise ConfigError(f"unknown shape kind {kind!r}")
    yy, xx = _grid(size)
    canvas = _background(size, rng, noise,
                         _TRAIN_BACKGROUNDS if backgrounds is None else backgrounds)
    s = size * rng.uniform(0.62, 0.92)
    cy = size / 2 + rng.uniform(-0.06, 0.06) * size
    cx = size / 2 + rng.uniform(-0.06, 0.06) * size
    _DRAWERS[kind](canvas, yy, xx, cy, cx, s, rng)
    canvas += rng.normal(0.0, 3.0, size=canvas.shape)
    return _finish(canvas)


def render_corpus_scene(topic: str, rng: np.random.Generator, size: int = 64,
                        noise: float = 12.0):
    """A weakly labeled scene: 1-3 drawn objects of the topic's category at
    random positions. Returns the image and the true boxes as (x, y, w, h).

    Corpus scenes are the narrow domain: always the category's signature
    background and the first palette entry, so crops carry a background
    shortcut that the val split does not honor.
    """
    kind = SHAPE_KINDS[TARGET_CATEGORIES.index(HIERARCHY[topic])]
    yy, xx = _grid(size)
    canvas = _background(size, rng, noise, [_CORPUS_BACKGROUNDS[kind]])
    boxes = []
    for _ in range(int(rng.integers(1, 4))):
        s = rng.uniform(18, 34)
        half = s / 2
        cy = rng.uniform(half, size - half)
        cx = rng.uniform(half, size - half)
        if any(abs(cy - by) < half and abs(cx - bx) < half for by, bx, _ in boxes):
            continue
        _DRAWERS[kind](canvas, yy, xx, cy, cx, s, rng, pal=0)
        boxes.append((cy, cx, s))
    canvas += rng.normal(0.0, 3.0, size=canvas.shape)
    img = _finish(canvas)
    out = []
    for cy, cx, s in boxes:
        half = s / 2
        x0 = max(0, int(cx - half) - 1)
        y0 = max(0, int(cy - half) - 1)
        x1 = min(size, int(cx + half) + 2)
        y1 = min(size, int(cy + half) + 2)
        out.append((x0, y0, x1 - x0, y1 - y0))
    return img, out


def _mock_proposals(topic: str, boxes, size: int, rng: np.random.Generator,
                    pin_boundary: bool) -> list[dict]:
    """What a sloppy detector would say about the scene: correct boxes with
    high confidence, plus low-score and wrong-category distractors."""
    allowed = sorted(TOPIC_TABLE[topic])
    wrong = [c for c in _ALL_DETECTOR_CATEGORIES if c not in TOPIC_TABLE[topic]]
    props = []
    for i, (x, y, w, h) in enumerate(boxes):
        score = 0.7 if (pin_boundary and i == 0) else round(float(rng.uniform(0.72, 0.99)), 4)
        props.append({"x": x, "y": y, "w": w, "h": h,
                      "category": allowed[int(rng.choice(len(allowed)))],
                      "score": score})
        if rng.random() < 0.6:
            props.append({"x": x, "y": y, "w": w, "h": h,
                          "category": allowed[int(rng.choice(len(allowed)))],
                          "score": round(float(rng.uniform(0.05, 0.69)), 4)})
        if rng.random() < 0.6 and wrong:
            props.append({"x": x, "y": y, "w": w, "h": h,
                          "category": wrong[int(rng.choice(len(wrong)))],
                          "score": round(float(rng.uniform(0.72, 0.99)), 4)})
    if rng.random() < 0.3:
        props.append({"x": size - 4, "y": size - 4, "w": 12, "h": 12,
                      "category": allowed[0],
                      "score": round(float(rng.uniform(0.72, 0.99)), 4)})
    if rng.random() < 0.2:
        props.append({"x": 0, "y": 0, "w": 1, "h": 6, "category": allowed[0],
                      "score": 0.95})
    return props


def _labeled_split(count: int, seed: int, purpose: str,
                   backgrounds) -> LabeledDataset:
    images = np.empty((count, 3, 32, 32), dtype=np.uint8)
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        rng = stream(seed, purpose, 0, i)
        label = int(rng.integers(0, len(TARGET_CATEGORIES)))
        labels[i] = label
        images[i] = render_scene(SHAPE_KINDS[label], rng, backgrounds=backgrounds)
    return LabeledDataset(images=images, labels=labels, categories=TARGET_CATEGORIES)


def make_fixtures(out_dir, seed: int = 0, corpus_images: int = 120,
                  train_count: int = 400, val_count: int = 200) -> dict:
    """Generate the full fixture family under `out_dir`; returns the paths.

    Layout: corpus/NNN.ppm scenes, manifest.jsonl, proposals.jsonl, and
    train.bin / val.bin with their sidecars. All 15 topics appear in the
    manifest (round-robin) when corpus_images >= 15.
    """
    if corpus_images < 1 or train_count < 1 or val_count < 1:
        raise ConfigError("fixture counts must be positive")
    out_dir = Path(out_dir)
    corpus_dir = out_dir / "corpus"
    corpus_dir.mkdir(parents=True, exist_ok=True)
    topics = sorted(TOPIC_TABLE)

    manifest_lines = []
    proposal_lines = []
    for i in range(corpus_images):
        topic = topics[i % len(topics)]
        rng = stream(seed, "fixtures-corpus", 0, i)
        img, boxes = render_corpus_scene(topic, rng)
        rel = f"corpus/{i:04d}.ppm"
        write_ppm(out_dir / rel, img)
        manifest_lines.append(json.dumps({"image": rel, "topic": topic}, sort_keys=True))
        props = _mock_proposals(topic, boxes, img.shape[1], rng, pin_boundary=(i == 0))
        proposal_lines.append(json.dumps({"image": rel, "regions": props}, sort_keys=True))

    manifest_path = out_dir / "manifest.jsonl"
    manifest_path.write_text("\n".join(manifest_lines) + "\n", encoding="utf-8")
    proposals_path = out_dir / "proposals.jsonl"
    proposals_path.write_text("\n".join(proposal_lines) + "\n", encoding="utf-8")

    train = _labeled_split(train_count, seed, "fixtures-train", _TRAIN_BACKGROUNDS)
    val = _labeled_split(val_count, seed, "fixtures-val", _VAL_BACKGROUNDS)
    train_path = out_dir / "train.bin"
    val_path = out_dir / "val.bin"
    prov = {"generator": "fixtures", "seed": seed}
    write_dataset(train_path, train, provenance=dict(prov, split="train"))
    write_dataset(val_path, val, provenance=dict(prov, split="val"))
    return {"corpus_dir": str(corpus_dir), "manifest": str(manifest_path),
            "proposals": str(proposals_path), "train": str(train_path),
            "val": str(val_path)}


def linear_probe_accuracy(train: LabeledDataset, val: LabeledDataset,
                          ridge: float = 1.0) -> float:
    """Closed-form one-hot ridge regression on raw pixels; returns val accuracy.

    A sanity floor for the fixtures: if a linear probe separates the classes,
    any failure of the convnet to learn is the convnet's fault.
    """
    def flat(ds):
        return ds.images.reshape(len(ds), -1).astype(np.float64) / 255.0

    x = flat(train)
    mu = x.mean(axis=0)
    x -= mu
    y = np.zeros((len(train), len(train.categories)))
    y[np.arange(len(train)), train.labels] = 1.0
    gram = x.T @ x + ridge * np.eye(x.shape[1])
    w = np.linalg.solve(gram, x.T @ y)
    pred = ((flat(val) - mu) @ w).argmax(axis=1)
    return float((pred == val.labels).mean())
