"""Temperature plus nucleus (top-p) sampling and view/report generation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ModelParams, head_logits
from .sequence import Study, pack_study
from .views import View


@dataclass(frozen=True)
class SamplerConfig:
    p: float = 0.9
    temperature: float = 0.7
    max_len: int = 0  # report token budget; 0 -> layout T
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"top-p must lie in (0, 1], got {self.p}")
        if not self.temperature > 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.max_len < 0:
            raise ValueError("max_len must be non-negative")


def nucleus_distribution(logits: np.ndarray, p: float, temperature: float = 1.0) -> np.ndarray:
    """Renormalised nucleus probabilities over the last axis.

    The nucleus is the shortest descending-probability prefix whose mass
    reaches ``p``; tokens tied with its last member are included too.
    Entries at ``-inf`` never enter it.
    """
    z = np.asarray(logits, dtype=np.float64) / temperature
    if np.any(np.isnan(z)) or np.any(z == np.inf):
        raise ValueError("logits must be finite or -inf")
    z = z - z.max(axis=-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=-1, keepdims=True)
    if p >= 1.0:
        return probs
    desc = -np.sort(-probs, axis=-1)
    before = np.cumsum(desc, axis=-1) - desc
    # threshold = probability of the token where the cumulative mass first reaches p
    crossing = np.sum(before < p * (1.0 - 1e-12), axis=-1, keepdims=True) - 1
    threshold = np.take_along_axis(desc, np.maximum(crossing, 0), axis=-1)
    keep = (probs >= threshold) & (probs > 0)
    kept = np.where(keep, probs, 0.0)
    return kept / kept.sum(axis=-1, keepdims=True)


def top_p_sample(logits: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray | int:
    """Draw one id per row of ``logits`` (a scalar for 1-d input)."""
    dist = nucleus_distribution(logits, cfg.p, cfg.temperature)
    flat = dist.reshape(-1, dist.shape[-1])
    ids = np.array([_draw(row, rng) for row in flat], dtype=np.int64)
    return int(ids[0]) if dist.ndim == 1 else ids.reshape(dist.shape[:-1])


def _study_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 7, index])


def generate_views(params: ModelParams, studies: Sequence[Study], target: View, cfg: SamplerConfig,
                   indices: Sequence[int] | None = None) -> list[np.ndarray]:
    """Sample an h x w code grid for ``target`` per study, batched by prompt length.

    Study ``i`` draws from its own generator seeded by (seed, indices[i]), so
    results do not depend on batch composition.
    """
    lay = params.config.layout
    target = View(target)
    indices = list(range(len(studies))) if indices is None else list(indices)
    prompts = [pack_study(s, lay, mode="infer", target_view=target).tokens for s in studies]
    out: list[np.ndarray | None] = [None] * len(studies)
    by_len: dict[int, list[int]] = {}
    for i, pr in enumerate(prompts):
        by_len.setdefault(len(pr), []).append(i)
    code_mask = np.full(lay.image_vocab, -np.inf)
    code_mask[: lay.codebook_size] = 0.0
    for members in by_len.values():
        tokens = np.stack([prompts[i] for i in members])
        rngs = [_study_rng(cfg.seed, indices[i]) for i in members]
        codes = np.empty((len(members), lay.cells), dtype=np.int64)
        for c in range(lay.cells):
            logits = head_logits(params, tokens, "image") + code_mask
            dist = nucleus_distribution(logits, cfg.p, cfg.temperature)
            for row, rng in enumerate(rngs):
                codes[row, c] = _draw(dist[row], rng)
            tokens = np.concatenate([tokens, lay.image_id(codes[:, c:c + 1])], axis=1)
        for row, i in enumerate(members):
            out[i] = codes[row].reshape(lay.grid, lay.grid)
    return out  # type: ignore[return-value]


def generate_view(params: ModelParams, study: Study, target: View, cfg: SamplerConfig,
                  index: int = 0) -> np.ndarray:
    return generate_views(params, [study], target, cfg, [index])[0]


def _draw(dist: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(dist)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    i = min(i, len(dist) - 1)
    while dist[i] == 0:
        i -= 1
    return i


@dataclass
class GeneratedReport:
    ids: list[int]
    text: str
    truncated: bool


def generate_reports(params: ModelParams, studies: Sequence[Study], cfg: SamplerConfig, vocab,
                     indices: Sequence[int] | None = None) -> list[GeneratedReport]:
    """Sample report text from image-first prompts until EOS_R or the token budget."""
    lay = params.config.layout
    budget = cfg.max_len or lay.text_len
    indices = list(range(len(studies))) if indices is None else list(indices)
    prompts = [pack_study(s, lay, mode="report").tokens for s in studies]
    mask = np.zeros(lay.text_vocab)
    mask[[lay.sos_r, lay.txt_pad]] = -np.inf
    results: list[GeneratedReport | None] = [None] * len(studies)
    by_len: dict[int, list[int]] = {}
    for i, pr in enumerate(prompts):
        by_len.setdefault(len(pr), []).append(i)
    for members in by_len.values():
        tokens = np.stack([prompts[i] for i in members])
        rngs = [_study_rng(cfg.seed, indices[i]) for i in members]
        words: list[list[int]] = [[] for _ in members]
        done = np.zeros(len(members), dtype=bool)
        ended = np.zeros(len(members), dtype=bool)
        for _ in range(budget + 1):
            if done.all():
                break
            logits = head_logits(params, tokens, "text") + mask
            dist = nucleus_distribution(logits, cfg.p, cfg.temperature)
            nxt = np.full(len(members), lay.txt_pad)
            for row, rng in enumerate(rngs):
                if done[row]:
                    continue
                if len(words[row]) == budget:
                    done[row] = True
                    continue
                tok = _draw(dist[row], rng)
                if tok == lay.eos_r:
                    done[row] = ended[row] = True
                else:
                    words[row].append(tok)
                nxt[row] = tok
            tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
        for row, i in enumerate(members):
            ids = words[row]
            results[i] = GeneratedReport(ids, vocab.decode(ids), truncated=not ended[row])
    return results  # type: ignore[return-value]


def generate_report(params: ModelParams, study: Study, cfg: SamplerConfig, vocab,
                    index: int = 0) -> GeneratedReport:
    return generate_reports(params, [study], cfg, vocab, [index])[0]
