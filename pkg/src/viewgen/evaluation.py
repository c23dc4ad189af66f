"""Paired condition evaluation on two-view studies (one frontal, one lateral).

Image conditions generate the frontal view:

* ``report-only``: prompt is the report alone;
* ``report+1view``: prompt is the report plus the lateral view.

Report conditions generate the report:

* ``1view``: prompt is the lateral view alone;
* ``2view``: prompt is the frontal and lateral views.

Image outputs are scored by token accuracy against the codec's encoding of
the true frontal view; reports by sentence BLEU-4 (+1 smoothed, since
short single-sentence references often have no matching 4-gram).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import codec as C
from .bpe import Vocabulary
from .metrics import PairedResult, bleu4, paired_compare, token_accuracy
from .model import ModelParams
from .sampling import SamplerConfig, generate_reports, generate_views
from .sequence import Study
from .synth import SynthStudy
from .views import View

IMAGE_CONDITIONS = ("report-only", "report+1view")
REPORT_CONDITIONS = ("1view", "2view")
ALL_CONDITIONS = IMAGE_CONDITIONS + REPORT_CONDITIONS
COMPARISONS = {"image": ("report+1view", "report-only"), "report": ("2view", "1view")}


def encode_studies(studies: Sequence[SynthStudy], codec: C.CodecParams, vocab: Vocabulary) -> list[Study]:
    """Turn rendered studies into model studies (BPE ids plus code grids)."""
    flat = [img for s in studies for img in s.images]
    grids = C.encode_images(codec, np.array(flat)) if flat else np.zeros((0,))
    out, k = [], 0
    for s in studies:
        imgs = []
        for v in s.views:
            imgs.append((View(v), grids[k]))
            k += 1
        out.append(Study(vocab.encode(s.report), imgs, s.study_id))
    return out


def split_two_view(study: Study) -> tuple[tuple[View, np.ndarray], tuple[View, np.ndarray]]:
    frontal = [im for im in study.images if im[0].is_frontal]
    lateral = [im for im in study.images if im[0] is View.LATERAL]
    if len(study.images) != 2 or len(frontal) != 1 or len(lateral) != 1:
        raise ValueError(f"study {study.study_id!r} is not a frontal + lateral pair")
    return frontal[0], lateral[0]


def parse_conditions(text: str | Iterable[str]) -> list[str]:
    names = [c.strip() for c in (text.split(",") if isinstance(text, str) else text) if c.strip()]
    unknown = [c for c in names if c not in ALL_CONDITIONS]
    if unknown:
        raise ValueError(f"unknown condition(s) {unknown}; choose from {list(ALL_CONDITIONS)}")
    return names


@dataclass
class EvalResult:
    records: list[dict] = field(default_factory=list)
    comparisons: dict[str, PairedResult] = field(default_factory=dict)
    grids: dict[str, list[np.ndarray]] = field(default_factory=dict)
    reports: dict[str, list[str]] = field(default_factory=dict)

    def scores(self, condition: str) -> np.ndarray:
        return np.array([r["value"] for r in self.records if r["condition"] == condition])


def evaluate(params: ModelParams, studies: Sequence[Study], references: Sequence[str], vocab: Vocabulary,
             conditions: Sequence[str], sampler: SamplerConfig, bootstrap_seed: int = 0,
             resamples: int = 1000, alpha: float = 0.05) -> EvalResult:
    """Score each condition per study, then pair up complementary conditions."""
    pairs = [split_two_view(s) for s in studies]
    idx = list(range(len(studies)))
    result = EvalResult()
    for cond in conditions:
        if cond in IMAGE_CONDITIONS:
            prompts = [Study(s.report_ids, [] if cond == "report-only" else [lat], s.study_id)
                       for s, (_, lat) in zip(studies, pairs)]
            # all targets share one frontal view tag per call so that prompts batch together
            grids: list[np.ndarray | None] = [None] * len(studies)
            for view in (View.AP, View.PA):
                sel = [i for i, (fr, _) in enumerate(pairs) if fr[0] is view]
                if sel:
                    out = generate_views(params, [prompts[i] for i in sel], view, sampler, [idx[i] for i in sel])
                    for i, g in zip(sel, out):
                        grids[i] = g
            result.grids[cond] = grids  # type: ignore[assignment]
            for s, (fr, _), g in zip(studies, pairs, grids):
                result.records.append({"study": s.study_id, "condition": cond, "metric": "token_accuracy",
                                       "value": token_accuracy(g, fr[1])})
        else:
            prompts = [Study([], [lat] if cond == "1view" else [fr, lat], s.study_id)
                       for s, (fr, lat) in zip(studies, pairs)]
            reports = generate_reports(params, prompts, sampler, vocab, idx)
            result.reports[cond] = [r.text for r in reports]
            for s, ref, rep in zip(studies, references, reports):
                result.records.append({"study": s.study_id, "condition": cond, "metric": "bleu4",
                                       "value": bleu4(rep.text, ref, smooth=True).bleu4,
                                       "truncated": rep.truncated})
    for name, (a, b) in COMPARISONS.items():
        if a in conditions and b in conditions:
            result.comparisons[name] = paired_compare(result.scores(a), result.scores(b), resamples,
                                                      bootstrap_seed, alpha)
    return result
