"""Joint token vocabulary and multimodal study packing.

Joint ids put the text vocabulary first (``[0, V)``, its last three ids being
SOS_R, EOS_R and TXT_PAD) and the image vocabulary after it (``V + [0, N)``
with ``N = M + 7``): the M codebook codes, then SOS/EOS for AP, PA and
LATERAL, then IMG_PAD.

A packed study always has length ``S = k (h w + 2) + T + 2``:

* the report segment is ``SOS_R, words[:T], EOS_R`` followed by TXT_PAD up
  to ``T + 2`` tokens;
* each image segment is ``SOS_view, h*w codes, EOS_view``;
* missing images become runs of ``h w + 2`` IMG_PAD tokens, always last.

Training packs shuffle the present segments uniformly.  Inference packs put
the report first, then conditioning images, then the target's SOS.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .views import View

N_IMAGE_SPECIALS = 7
MODALITY_TEXT, MODALITY_IMAGE = 0, 1


@dataclass(frozen=True)
class SequenceLayout:
    text_vocab: int  # V, including the three text specials
    codebook_size: int  # M
    grid: int  # h = w
    text_len: int  # T
    max_views: int = 3  # k

    def __post_init__(self):
        if self.text_vocab < 4 or self.codebook_size < 2 or self.grid < 1 or self.text_len < 0:
            raise ValueError(f"degenerate sequence layout {self}")
        if not 1 <= self.max_views:
            raise ValueError("max_views must be positive")

    # -- sizes ---------------------------------------------------------------
    @property
    def image_vocab(self) -> int:
        return self.codebook_size + N_IMAGE_SPECIALS

    @property
    def joint_vocab(self) -> int:
        return self.text_vocab + self.image_vocab

    @property
    def cells(self) -> int:
        return self.grid * self.grid

    @property
    def image_segment(self) -> int:
        return self.cells + 2

    @property
    def text_segment(self) -> int:
        return self.text_len + 2

    @property
    def length(self) -> int:
        return self.max_views * self.image_segment + self.text_segment

    # -- special ids (joint) -------------------------------------------------
    @property
    def sos_r(self) -> int:
        return self.text_vocab - 3

    @property
    def eos_r(self) -> int:
        return self.text_vocab - 2

    @property
    def txt_pad(self) -> int:
        return self.text_vocab - 1

    def image_id(self, local: int | np.ndarray):
        return self.text_vocab + (local if np.isscalar(local) else np.asarray(local))

    def sos_view(self, view: View) -> int:
        return self.image_id(self.codebook_size + 2 * View(view).index)

    def eos_view(self, view: View) -> int:
        return self.image_id(self.codebook_size + 2 * View(view).index + 1)

    @property
    def img_pad(self) -> int:
        return self.image_id(self.codebook_size + 6)

    def is_code(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        return (ids >= self.text_vocab) & (ids < self.text_vocab + self.codebook_size)

    def is_image(self, ids: np.ndarray) -> np.ndarray:
        return np.asarray(ids) >= self.text_vocab

    def is_sos(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        local = ids - self.text_vocab - self.codebook_size
        img_sos = (local >= 0) & (local < 6) & (local % 2 == 0)
        return img_sos | (ids == self.sos_r)


def reference_length(visual_tokens: int = 1026, word_tokens: int = 256, views: int = 3) -> int:
    """S from per-segment totals (image segment ``h w + 2``, text segment ``T + 2``)."""
    return views * visual_tokens + word_tokens


@dataclass
class Study:
    """Model-side study: BPE ids of the report and view-tagged code grids."""

    report_ids: Sequence[int]
    images: list[tuple[View, np.ndarray]]
    study_id: str = ""


@dataclass
class StudySequence:
    tokens: np.ndarray  # (S,) joint ids
    modality: np.ndarray  # (S,) 0 text, 1 image
    view: np.ndarray  # (S,) view index, -1 for text and padding
    index: np.ndarray  # (S,) position within the segment
    loss_mask: np.ndarray  # (S,) True where the token is a supervised target
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tokens)


def _text_segment(layout: SequenceLayout, ids: Sequence[int]) -> tuple[list[int], list[bool], bool]:
    ids = [int(i) for i in ids]
    bad = [i for i in ids if not 0 <= i < layout.sos_r]
    if bad:
        raise IndexError(f"report id {bad[0]} is not a word token of a {layout.text_vocab}-token vocabulary")
    truncated = len(ids) > layout.text_len
    words = ids[:layout.text_len]
    pad = layout.text_len - len(words)
    tokens = [layout.sos_r, *words, layout.eos_r] + [layout.txt_pad] * pad
    mask = [False] + [True] * (len(words) + 1) + [False] * pad
    return tokens, mask, truncated


def _image_segment(layout: SequenceLayout, view: View, grid: np.ndarray) -> tuple[list[int], list[bool]]:
    codes = np.asarray(grid, dtype=np.int64)
    if codes.shape != (layout.grid, layout.grid):
        raise ValueError(f"grid shape {codes.shape} does not match layout {layout.grid}x{layout.grid}")
    if codes.size and (codes.min() < 0 or codes.max() >= layout.codebook_size):
        raise IndexError(f"grid code outside [0, {layout.codebook_size})")
    tokens = [layout.sos_view(view), *layout.image_id(codes.reshape(-1)).tolist(), layout.eos_view(view)]
    return tokens, [False] + [True] * (layout.cells + 1)


def _assemble(layout: SequenceLayout, segments: list[tuple[str, View | None, list[int], list[bool]]],
              meta: dict) -> StudySequence:
    tokens, modality, view, index, mask = [], [], [], [], []
    for kind, v, toks, msk in segments:
        n = len(toks)
        tokens += toks
        mask += msk
        index += list(range(n))
        modality += [MODALITY_TEXT if kind == "report" else MODALITY_IMAGE] * n
        view += [View(v).index if v is not None else -1] * n
    meta["segments"] = [(kind, v.value if v is not None else None) for kind, v, _, _ in segments]
    return StudySequence(np.array(tokens, dtype=np.int64), np.array(modality, dtype=np.int8),
                         np.array(view, dtype=np.int8), np.array(index, dtype=np.int64),
                         np.array(mask, dtype=bool), meta)


def pack_study(study: Study, layout: SequenceLayout, rng: np.random.Generator | None = None,
               mode: str = "train", target_view: View | None = None) -> StudySequence:
    """Pack a study for training (shuffled, padded to S) or for inference.

    ``mode="infer"`` with ``target_view`` set yields the image-generation
    prompt (report, conditioning images, SOS of the target view);
    ``mode="report"`` yields the report-generation prompt (images, SOS_R).
    """
    if len(study.images) > layout.max_views:
        raise ValueError(f"study has {len(study.images)} images but layout allows {layout.max_views}")
    text, text_mask, truncated = _text_segment(layout, study.report_ids)
    images = [(View(v), *_image_segment(layout, View(v), g)) for v, g in study.images]
    meta: dict = {"truncated": truncated, "study_id": study.study_id}

    if mode == "train":
        if rng is None:
            raise ValueError("train packing needs an rng")
        present = [("report", None, text, text_mask)] + [("image", v, t, m) for v, t, m in images]
        order = rng.permutation(len(present))
        segments = [present[i] for i in order]
        pad = [layout.img_pad] * layout.image_segment
        for _ in range(layout.max_views - len(images)):
            segments.append(("pad", None, list(pad), [False] * layout.image_segment))
        seq = _assemble(layout, segments, meta)
        assert len(seq) == layout.length
        return seq
    if mode == "infer":
        if target_view is None:
            raise ValueError("infer mode needs a target view")
        target_view = View(target_view)
        meta["regenerate"] = any(v is target_view for v, _, _ in images)
        segments = [("report", None, text, text_mask)] + [("image", v, t, m) for v, t, m in images]
        segments.append(("image", target_view, [layout.sos_view(target_view)], [False]))
        return _assemble(layout, segments, meta)
    if mode == "report":
        if not images:
            raise ValueError("report generation needs at least one image")
        segments = [("image", v, t, m) for v, t, m in images]
        segments.append(("report", None, [layout.sos_r], [False]))
        return _assemble(layout, segments, meta)
    raise ValueError(f"unknown packing mode {mode!r}")


def segment_positions(layout: SequenceLayout, tokens: np.ndarray) -> np.ndarray:
    """Index of each token within its segment, derived from the ids alone.

    Counts restart at every SOS token; IMG_PAD runs count from their start
    in blocks of ``h w + 2``.
    """
    tokens = np.asarray(tokens)
    pos = np.arange(tokens.shape[-1])
    is_pad = tokens == layout.img_pad
    prev_pad = np.concatenate([np.zeros(tokens.shape[:-1] + (1,), bool), is_pad[..., :-1]], axis=-1)
    starts = layout.is_sos(tokens) | (is_pad & ~prev_pad)
    anchor = np.maximum.accumulate(np.where(starts, pos, 0), axis=-1)
    index = pos - anchor
    return np.where(is_pad, index % layout.image_segment, index)
