"""BLEU-4, Frechet distance, token accuracy and paired bootstrap comparison."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

PSD_TOLERANCE = 1e-8
BOOTSTRAP_SAMPLES = 1000
MIN_PAIRED = 10


@dataclass(frozen=True)
class BleuReport:
    bleu4: float
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    empty: bool = False


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: Sequence[str] | str, reference: Sequence[str] | str, smooth: bool = False) -> BleuReport:
    """Sentence BLEU-4 with clipped counts and brevity penalty.

    Strings are split on whitespace.  ``smooth`` adds one to the numerator
    and denominator of the 2- to 4-gram precisions.
    """
    cand = candidate.split() if isinstance(candidate, str) else list(candidate)
    ref = reference.split() if isinstance(reference, str) else list(reference)
    if not cand:
        return BleuReport(0.0, (0.0, 0.0, 0.0, 0.0), 0.0, empty=True)
    precisions = []
    for n in range(1, 5):
        c, r = _ngrams(cand, n), _ngrams(ref, n)
        hits = sum(min(k, r[g]) for g, k in c.items())
        total = max(len(cand) - n + 1, 0)
        if smooth and n > 1:
            hits, total = hits + 1, total + 1
        precisions.append(hits / total if total else 0.0)
    c_len, r_len = len(cand), len(ref)
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    if min(precisions) == 0.0:
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / 4.0)
    return BleuReport(score, tuple(precisions), bp)  # type: ignore[arg-type]


# -- Frechet distance -----------------------------------------------------------------

@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance {self.cov.shape} does not match mean of dimension {d}")
        if self.count < 2:
            raise ValueError("feature statistics need at least two samples")
        if not np.allclose(self.cov, self.cov.T, atol=1e-12):
            raise ValueError("covariance is not symmetric")

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ValueError("need an (n >= 2, d) feature matrix")
        cov = np.cov(feats, rowvar=False, ddof=1).reshape(feats.shape[1], feats.shape[1])
        return cls(feats.mean(axis=0), (cov + cov.T) / 2.0, feats.shape[0])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if vals.min() < -PSD_TOLERANCE * max(1.0, abs(vals).max()):
        raise ValueError(f"matrix is not positive semi-definite (eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The cross term uses ``tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))``, which equals
    the trace of the principal root of ``S_a S_b`` and keeps every square
    root symmetric.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"feature dimensions differ: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    root_a = _psd_sqrt(a.cov)
    _psd_sqrt(b.cov)  # validates b
    cross = _psd_sqrt(root_a @ b.cov @ root_a)
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def image_features(images: np.ndarray, pool: int = 8) -> np.ndarray:
    """Average-pool images to ``pool x pool`` and flatten (64-d for the default)."""
    images = np.asarray(images, dtype=np.float64)
    n, h, w = images.shape
    if h % pool or w % pool:
        raise ValueError(f"image side {h}x{w} not divisible by pool {pool}")
    return images.reshape(n, pool, h // pool, pool, w // pool).mean(axis=(2, 4)).reshape(n, -1)


# -- token accuracy and paired comparison ------------------------------------------------

def token_accuracy(generated: np.ndarray, reference: np.ndarray) -> float:
    g, r = np.asarray(generated), np.asarray(reference)
    if g.shape != r.shape:
        raise ValueError(f"grid shapes differ: {g.shape} vs {r.shape}")
    return float(np.mean(g == r))


@dataclass(frozen=True)
class PairedResult:
    mean_difference: float
    ci_low: float
    ci_high: float
    n: int
    resamples: int
    seed: int

    @property
    def excludes_zero(self) -> bool:
        return self.ci_low > 0.0 or self.ci_high < 0.0

    def as_dict(self) -> dict:
        return {"mean_difference": self.mean_difference, "ci_low": self.ci_low, "ci_high": self.ci_high,
                "n": self.n, "resamples": self.resamples, "seed": self.seed}


def paired_compare(a: Sequence[float], b: Sequence[float], resamples: int = BOOTSTRAP_SAMPLES,
                   seed: int = 0, alpha: float = 0.05) -> PairedResult:
    """Mean of per-study differences ``a - b`` with a percentile bootstrap CI."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired comparison needs two equal-length 1-d samples")
    if a.size < MIN_PAIRED:
        raise ValueError(f"paired comparison needs at least {MIN_PAIRED} studies, got {a.size}")
    diff = a - b
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, diff.size, size=(resamples, diff.size))
    means = diff[idx].mean(axis=1)
    lo, hi = np.quantile(means, [alpha / 2.0, 1.0 - alpha / 2.0])
    return PairedResult(float(diff.mean()), float(lo), float(hi), int(diff.size), resamples, seed)
