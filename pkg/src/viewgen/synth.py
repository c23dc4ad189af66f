"""Procedural multi-view studies with templated reports.

A scene is a handful of 3-d shapes inside the unit cube (x to the image
right, y downwards, z front-to-back).  Frontal views project along z (PA is
AP mirrored left-right); the lateral view projects along x, so its columns
show depth.  Each shape's depth follows its side of the body, which lets a
lateral view disambiguate left from right.  Reports enumerate the shapes in
a fixed grammar, each finding independently omitted with ``omission_prob``.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .pgm import read_pgm, write_pgm
from .views import View

KINDS = ("disc", "bar", "blob")
SIZES = {"small": 0.07, "medium": 0.11, "large": 0.15}
BANDS = {"upper": 0.27, "middle": 0.5, "lower": 0.73}
SIDES = {"left": 0.3, "right": 0.7}
DEPTHS = {"left": 0.35, "right": 0.65}
NO_FINDINGS = "no findings."

COMPOSITIONS = {
    1: ((View.AP,), (View.PA,)),
    2: ((View.AP, View.LATERAL), (View.PA, View.LATERAL)),
    3: ((View.AP, View.PA, View.LATERAL), (View.PA, View.PA, View.LATERAL)),
}


@dataclass(frozen=True)
class Shape:
    kind: str
    size_name: str
    band: str
    side: str
    x: float
    y: float
    z: float
    intensity: float

    @property
    def size(self) -> float:
        return SIZES[self.size_name]

    @property
    def label(self) -> tuple[str, str, str, str]:
        return (self.size_name, self.kind, self.band, self.side)

    def half_extents(self) -> tuple[float, float, float]:
        s = self.size
        if self.kind == "bar":
            return 1.5 * s, 0.5 * s, 0.5 * s
        return s, s, s


@dataclass(frozen=True)
class SceneSpec:
    shapes: tuple[Shape, ...]
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class SynthStudy:
    study_id: str
    views: tuple[View, ...]
    images: list[np.ndarray]
    report: str
    labels: tuple[tuple[str, str, str, str], ...]
    scene: SceneSpec | None = None


def sample_scene(rng: np.random.Generator, jitter: float = 0.03,
                 max_offset: float = 0.02) -> SceneSpec:
    n = int(rng.integers(1, 4))
    zones = [(b, s) for b in BANDS for s in SIDES]
    picks = rng.choice(len(zones), size=n, replace=False)
    shapes = []
    for zi in sorted(picks):
        band, side = zones[zi]
        kind = KINDS[int(rng.integers(len(KINDS)))]
        size_name = tuple(SIZES)[int(rng.integers(len(SIZES)))]
        dx, dy, dz = rng.uniform(-jitter, jitter, size=3)
        shapes.append(Shape(kind, size_name, band, side,
                            SIDES[side] + dx, BANDS[band] + dy, DEPTHS[side] + dz,
                            float(rng.uniform(0.7, 1.0))))
    offset = tuple(float(v) for v in rng.uniform(-max_offset, max_offset, size=3))
    return SceneSpec(tuple(shapes), offset)


def _coverage(dist: np.ndarray, extent: float, side: int) -> np.ndarray:
    """Anti-aliased inside-ness of |d| <= extent, one pixel of ramp."""
    return np.clip((extent - dist) * side + 0.5, 0.0, 1.0)


def render_view(scene: SceneSpec, view: View, side: int = 16) -> np.ndarray:
    """Orthographic, additive projection of the scene, clamped to [0, 1]."""
    view = View(view)
    centers = (np.arange(side) + 0.5) / side
    vv, uu = np.meshgrid(centers, centers, indexing="ij")
    img = np.zeros((side, side))
    ox, oy, oz = scene.offset
    for sh in scene.shapes:
        x, y, z = sh.x + ox, sh.y + oy, sh.z + oz
        ex, ey, ez = sh.half_extents()
        if view is View.AP:
            cu, eu = x, ex
        elif view is View.PA:
            cu, eu = 1.0 - x, ex
        else:
            cu, eu = z, ez
        du, dv = uu - cu, vv - y
        if sh.kind == "disc":
            fp = _coverage(np.hypot(du, dv), sh.size, side)
        elif sh.kind == "bar":
            fp = _coverage(np.abs(du), eu, side) * _coverage(np.abs(dv), ey, side)
        else:
            sigma = 0.6 * sh.size
            fp = np.exp(-(du * du + dv * dv) / (2.0 * sigma * sigma))
        img += sh.intensity * fp
    return np.clip(img, 0.0, 1.0)


def finding_phrase(label: Sequence[str]) -> str:
    return " ".join(label)


def write_report(scene: SceneSpec, rng: np.random.Generator, omission_prob: float) -> str:
    kept = [sh for sh in scene.shapes if rng.random() >= omission_prob]
    if not kept:
        return NO_FINDINGS
    return "; ".join(finding_phrase(sh.label) for sh in kept) + "."


def parse_report(text: str) -> Counter:
    """Recover the multiset of (size, kind, band, side) findings."""
    body = text.strip().lower().rstrip(".")
    found: Counter = Counter()
    if not body or body + "." == NO_FINDINGS:
        return found
    for phrase in body.split(";"):
        words = phrase.split()
        if len(words) == 4 and words[0] in SIZES and words[1] in KINDS \
                and words[2] in BANDS and words[3] in SIDES:
            found[tuple(words)] += 1
    return found


def _normalise_distribution(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,) or np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise ValueError(f"view distribution needs 3 non-negative weights, got {list(weights)}")
    return w / w.sum()


def make_study(index: int, seed: int, image_side: int, view_distribution: Sequence[float],
               omission_prob: float, jitter: float = 0.03, prefix: str = "study") -> SynthStudy:
    probs = _normalise_distribution(view_distribution)
    rng = np.random.default_rng([seed, index])
    n_views = 1 + int(rng.choice(3, p=probs))
    options = COMPOSITIONS[n_views]
    views = options[int(rng.integers(len(options)))]
    scene = sample_scene(rng, jitter)
    report = write_report(scene, rng, omission_prob)
    images = [render_view(scene, v, image_side) for v in views]
    return SynthStudy(f"{prefix}-{index:05d}", views, images, report,
                      tuple(sh.label for sh in scene.shapes), scene)


def generate_dataset(n_studies: int, image_side: int = 16,
                     view_distribution: Sequence[float] = (0.5, 0.4, 0.1),
                     omission_prob: float = 0.3, seed: int = 0, jitter: float = 0.03,
                     prefix: str = "study") -> list[SynthStudy]:
    """Deterministic under ``seed``; study ``i`` depends only on (seed, i)."""
    if not 0.0 <= omission_prob <= 1.0:
        raise ValueError("omission_prob must lie in [0, 1]")
    _normalise_distribution(view_distribution)
    return [make_study(i, seed, image_side, view_distribution, omission_prob, jitter, prefix)
            for i in range(n_studies)]


# -- on-disk layout -----------------------------------------------------------

def save_dataset(studies: Sequence[SynthStudy], root: str | Path, split: str = "train") -> Path:
    """Append studies to ``root/manifest.jsonl`` with PGM images and text reports."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "reports").mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.jsonl"
    with manifest.open("a", encoding="utf-8") as fh:
        for st in studies:
            image_paths = []
            for i, (view, img) in enumerate(zip(st.views, st.images)):
                rel = f"images/{st.study_id}_{i}_{view.value}.pgm"
                write_pgm(root / rel, img)
                image_paths.append(rel)
            report_rel = f"reports/{st.study_id}.txt"
            (root / report_rel).write_text(st.report + "\n", encoding="utf-8")
            record = {
                "id": st.study_id,
                "split": split,
                "views": [v.value for v in st.views],
                "images": image_paths,
                "report": report_rel,
                "labels": [finding_phrase(lb) for lb in st.labels],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest


def load_dataset(root: str | Path, split: str | None = None) -> list[SynthStudy]:
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.jsonl under {root}")
    studies = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if split is not None and rec.get("split") != split:
            continue
        studies.append(SynthStudy(
            rec["id"],
            tuple(View(v) for v in rec["views"]),
            [read_pgm(root / p) for p in rec["images"]],
            (root / rec["report"]).read_text(encoding="utf-8").strip(),
            tuple(tuple(lb.split()) for lb in rec["labels"]),
        ))
    return studies
