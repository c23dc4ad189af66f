"""Unified multimodal transformer over packed study sequences.

Embeddings:

* image codes: ``f_VE(code) + row(r) + col(c)`` with learned axial tables;
* image specials (SOS/EOS/IMG_PAD): ``f_VE(id)`` alone;
* text tokens: ``f_WE(id) + f_WP(j)`` with a fixed sin/cos table indexed by
  the position ``j`` inside the report segment.

Blocks are pre-norm (attention, then a 4x GELU MLP).  Attention is FAVOR+
by default, exact softmax attention as a switchable oracle.  Two heads share
the final hidden state: the text head scores the next token where the
target is text, the image head where it is image-side.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .favor import (DEFAULT_EPS, RandomFeatureMap, default_feature_count, draw_orthogonal_features,
                    exact_causal_attention, favor_causal_attention)
from .optim import AdamW, clip_grad_norm, cosine_lr
from .sequence import SequenceLayout, StudySequence, segment_positions
from .tensor import DivergenceError, NumericalError, Tensor, no_grad

log = logging.getLogger(__name__)

MAGIC = b"VXG1"


@dataclass
class ModelConfig:
    text_vocab: int = 512
    codebook_size: int = 32
    grid: int = 4
    text_len: int = 30
    max_views: int = 3
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    mlp_ratio: int = 4
    attention: str = "favor"
    n_features: int = 0  # 0 -> default for the head width
    feature_seed: int = 0
    attn_eps: float = DEFAULT_EPS
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.attention not in ("favor", "exact"):
            raise ValueError(f"attention must be 'favor' or 'exact', got {self.attention!r}")
        if self.n_layers < 1:
            raise ValueError("need at least one layer")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def feature_count(self) -> int:
        return self.n_features or default_feature_count(self.head_dim)

    @property
    def layout(self) -> SequenceLayout:
        return SequenceLayout(self.text_vocab, self.codebook_size, self.grid, self.text_len, self.max_views)


@dataclass
class TrainConfig:
    lr: float = 3e-3
    min_lr: float = 1e-4
    warmup_steps: int = 50
    epochs: int = 20
    batch_size: int = 16
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    max_steps: int = 0  # 0 -> no cap beyond the epoch count
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.min_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("epochs and batch_size must be positive, max_steps non-negative")


@dataclass
class ModelParams:
    """Weights in checkpoint order (see ``weight_shapes``) plus frozen feature maps."""

    config: ModelConfig
    weights: "OrderedDict[str, Tensor]"
    features: list[RandomFeatureMap]
    history: list[dict] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        return list(self.weights.values())


@dataclass
class Logits:
    text: Tensor  # (B, S, V)
    image: Tensor  # (B, S, N)


# -- construction -----------------------------------------------------------------

def weight_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    d, lay = cfg.d_model, cfg.layout
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["f_VE"] = (lay.image_vocab, d)
    shapes["f_WE"] = (lay.text_vocab, d)
    shapes["pos_row"] = (lay.grid, d)
    shapes["pos_col"] = (lay.grid, d)
    hidden = cfg.mlp_ratio * d
    for i in range(cfg.n_layers):
        p = f"block{i}."
        shapes[p + "ln1.g"], shapes[p + "ln1.b"] = (d,), (d,)
        shapes[p + "wqkv"], shapes[p + "bqkv"] = (d, 3 * d), (3 * d,)
        shapes[p + "wo"], shapes[p + "bo"] = (d, d), (d,)
        shapes[p + "ln2.g"], shapes[p + "ln2.b"] = (d,), (d,)
        shapes[p + "w1"], shapes[p + "b1"] = (d, hidden), (hidden,)
        shapes[p + "w2"], shapes[p + "b2"] = (hidden, d), (d,)
    shapes["lnf.g"], shapes["lnf.b"] = (d,), (d,)
    shapes["head_text.w"], shapes["head_text.b"] = (d, lay.text_vocab), (lay.text_vocab,)
    shapes["head_image.w"], shapes["head_image.b"] = (d, lay.image_vocab), (lay.image_vocab,)
    return shapes


def _draw_features(cfg: ModelConfig) -> list[RandomFeatureMap]:
    return [draw_orthogonal_features(cfg.head_dim, cfg.feature_count, seed=cfg.feature_seed * 1000 + i)
            for i in range(cfg.n_layers)]


def init_model(cfg: ModelConfig) -> ModelParams:
    rng = np.random.default_rng([cfg.seed, 31])
    weights: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in weight_shapes(cfg).items():
        if name.endswith(".g"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, cfg.init_std, size=shape)
        weights[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(cfg, weights, _draw_features(cfg))


def sinusoid_table(n_pos: int, d: int) -> np.ndarray:
    """Row j: sin/cos pairs ``sin(j / 10000^(2i/d)), cos(j / 10000^(2i/d))`` interleaved."""
    pos = np.arange(n_pos)[:, None]
    freq = 1.0 / 10000.0 ** (np.arange(0, d, 2) / d)
    table = np.zeros((n_pos, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)[:, : d // 2]
    return table


# -- forward --------------------------------------------------------------------------

def embed(params: ModelParams, tokens: np.ndarray) -> Tensor:
    """(B, S) joint ids -> (B, S, d) input embeddings."""
    cfg, w = params.config, params.weights
    lay = cfg.layout
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= lay.joint_vocab):
        raise IndexError(f"token id outside joint vocabulary [0, {lay.joint_vocab})")
    idx = segment_positions(lay, tokens)
    is_img = lay.is_image(tokens)
    is_code = lay.is_code(tokens)
    img_ids = np.where(is_img, tokens - lay.text_vocab, 0)
    txt_ids = np.where(is_img, 0, tokens)
    cell = np.where(is_code, idx - 1, 0)
    if np.any(cell >= lay.cells):
        raise ValueError("image segment longer than the grid")
    row, col = cell // lay.grid, cell % lay.grid
    img_m = is_img[..., None].astype(np.float64)
    code_m = is_code[..., None].astype(np.float64)
    txt_m = 1.0 - img_m
    text_pos = sinusoid_table(lay.text_segment, cfg.d_model)[np.where(is_img, 0, np.minimum(idx, lay.text_segment - 1))]
    x = T.embedding_lookup(w["f_VE"], img_ids) * img_m
    x = x + T.embedding_lookup(w["f_WE"], txt_ids) * txt_m
    x = x + (T.embedding_lookup(w["pos_row"], row) + T.embedding_lookup(w["pos_col"], col)) * code_m
    x = x + text_pos * txt_m
    # pads stay visible to attention but their embedding rows receive no gradient
    pad = ((tokens == lay.txt_pad) | (tokens == lay.img_pad))[..., None].astype(np.float64)
    if pad.any():
        x = x * (1.0 - pad) + T.detach(x) * pad
    return x


def attention(params: ModelParams, layer: int, x: Tensor, stats: dict | None = None) -> Tensor:
    cfg, w = params.config, params.weights
    p = f"block{layer}."
    b, s, d = x.shape
    h, dh = cfg.n_heads, cfg.head_dim
    qkv = T.matmul(x, w[p + "wqkv"]) + w[p + "bqkv"]
    qkv = T.transpose(T.reshape(qkv, (b, s, 3, h, dh)), (2, 0, 3, 1, 4))  # (3, B, H, S, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    if cfg.attention == "exact":
        out = exact_causal_attention(q, k, v)
    else:
        out = favor_causal_attention(q, k, v, params.features[layer], eps=cfg.attn_eps, stats=stats)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, s, d))
    return T.matmul(out, w[p + "wo"]) + w[p + "bo"]


def block(params: ModelParams, layer: int, x: Tensor, stats: dict | None = None) -> Tensor:
    w = params.weights
    p = f"block{layer}."
    x = x + attention(params, layer, T.layer_norm(x, w[p + "ln1.g"], w[p + "ln1.b"]), stats)
    hdn = T.gelu(T.matmul(T.layer_norm(x, w[p + "ln2.g"], w[p + "ln2.b"]), w[p + "w1"]) + w[p + "b1"])
    return x + T.matmul(hdn, w[p + "w2"]) + w[p + "b2"]


def hidden_states(params: ModelParams, tokens: np.ndarray, stats: dict | None = None) -> Tensor:
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    x = embed(params, tokens)
    for i in range(params.config.n_layers):
        x = block(params, i, x, stats)
    w = params.weights
    return T.layer_norm(x, w["lnf.g"], w["lnf.b"])


def forward(params: ModelParams, tokens: np.ndarray, stats: dict | None = None) -> Logits:
    """Logits of both heads at every position; position t scores token t+1."""
    hs = hidden_states(params, tokens, stats)
    w = params.weights
    return Logits(T.matmul(hs, w["head_text.w"]) + w["head_text.b"],
                  T.matmul(hs, w["head_image.w"]) + w["head_image.b"])


def head_logits(params: ModelParams, tokens: np.ndarray, head: str, last_only: bool = True) -> np.ndarray:
    """Inference helper: logits of one head (text or image) without building a tape."""
    with no_grad():
        hs = hidden_states(params, tokens)
        if last_only:
            hs = hs[:, -1]
        w = params.weights
        return (T.matmul(hs, w[f"head_{head}.w"]) + w[f"head_{head}.b"]).data


# -- loss -------------------------------------------------------------------------------

def _stack(seqs: Sequence[StudySequence]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.tokens for s in seqs]), np.stack([s.loss_mask for s in seqs])


def nll_loss(logits: Logits, tokens: np.ndarray, loss_mask: np.ndarray, layout: SequenceLayout,
             reduction: str = "mean") -> Tensor:
    """Next-token NLL over supervised target positions, routed to the matching head.

    ``reduction="mean"`` divides by the number of supervised targets (0 if none).
    """
    tokens = np.atleast_2d(tokens)
    loss_mask = np.atleast_2d(loss_mask)
    targets = tokens[:, 1:].reshape(-1)
    active = loss_mask[:, 1:].reshape(-1)
    is_img = layout.is_image(targets)
    b, s = tokens.shape
    txt = T.reshape(logits.text[:, :-1], (b * (s - 1), layout.text_vocab))
    img = T.reshape(logits.image[:, :-1], (b * (s - 1), layout.image_vocab))
    lt = T.cross_entropy_logits(txt, np.where(is_img, 0, targets), active & ~is_img, reduction="sum")
    li = T.cross_entropy_logits(img, np.where(is_img, targets - layout.text_vocab, 0), active & is_img,
                                reduction="sum")
    total = lt + li
    if reduction == "sum":
        return total
    count = int(active.sum())
    return total * (1.0 / count) if count else total


def sequence_loss(params: ModelParams, seqs: Sequence[StudySequence], stats: dict | None = None) -> Tensor:
    tokens, mask = _stack(seqs)
    return nll_loss(forward(params, tokens, stats), tokens, mask, params.config.layout)


# -- training -------------------------------------------------------------------------------

def train(params: ModelParams, studies: Sequence, tcfg: TrainConfig,
          progress: Callable[[dict], None] | None = None) -> ModelParams:
    """AdamW with warm-up and cosine decay; studies are re-shuffled and re-packed every epoch."""
    from .sequence import pack_study

    if not studies:
        raise ValueError("no training studies")
    layout = params.config.layout
    rng = np.random.default_rng([tcfg.seed, 41])
    n = len(studies)
    bs = min(tcfg.batch_size, n)
    per_epoch = math.ceil(n / bs)
    total_steps = per_epoch * tcfg.epochs
    if tcfg.max_steps:
        total_steps = min(total_steps, tcfg.max_steps)
    opt = AdamW(params.parameters(), tcfg.lr, betas=(tcfg.beta1, tcfg.beta2), eps=tcfg.eps,
                weight_decay=tcfg.weight_decay)
    step = 0
    for epoch in range(tcfg.epochs):
        if step >= total_steps:
            break
        order = rng.permutation(n)
        loss_sum, tok_sum, clamped = 0.0, 0, {}
        for start in range(0, n, bs):
            if step >= total_steps:
                break
            batch = [pack_study(studies[i], layout, rng, "train") for i in order[start:start + bs]]
            lr = cosine_lr(step, total_steps, tcfg.lr, tcfg.warmup_steps, tcfg.min_lr)
            opt.zero_grad()
            try:
                loss = sequence_loss(params, batch, clamped)
            except (FloatingPointError, NumericalError) as err:
                raise DivergenceError(f"non-finite forward pass at epoch {epoch}, step {step}: {err}", params) from err
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step} (lr {lr:.3g})", params)
            loss.backward()
            gnorm = clip_grad_norm(params.parameters(), tcfg.grad_clip)
            if not np.isfinite(gnorm):
                raise DivergenceError(f"non-finite gradient at epoch {epoch}, step {step}", params)
            opt.step(lr)
            count = int(sum(s.loss_mask[1:].sum() for s in batch))
            loss_sum += value * count
            tok_sum += count
            step += 1
        record = {"epoch": epoch, "step": step, "nll": loss_sum / max(tok_sum, 1),
                  "lr": cosine_lr(step - 1, total_steps, tcfg.lr, tcfg.warmup_steps, tcfg.min_lr),
                  "clamped": int(clamped.get("clamped", 0))}
        params.history.append(record)
        log.info("epoch %d nll %.4f", epoch, record["nll"])
        if progress is not None:
            progress(record)
    for p in params.parameters():
        p.grad = None
    return params


# -- checkpoints --------------------------------------------------------------------------------

_INT_FIELDS = ("text_vocab", "codebook_size", "grid", "text_len", "max_views", "d_model", "n_layers",
               "n_heads", "mlp_ratio", "n_features", "feature_seed", "seed")


def save_model(params: ModelParams, path: str | Path) -> None:
    """``VXG1``; u32 attention flag + config ints; f64 attention eps and init std;
    f64 weights in ``weight_shapes`` order; f64 feature matrices, one per layer."""
    cfg = params.config
    ints = [1 if cfg.attention == "favor" else 0] + [getattr(cfg, f) for f in _INT_FIELDS]
    parts = [MAGIC, struct.pack(f"<{len(ints)}I", *ints), struct.pack("<2d", cfg.attn_eps, cfg.init_std)]
    parts += [np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in params.weights.values()]
    parts += [np.ascontiguousarray(rf.omega, dtype="<f8").tobytes() for rf in params.features]
    Path(path).write_bytes(b"".join(parts))


def load_model(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a VXG1 model checkpoint")
    n_int = 1 + len(_INT_FIELDS)
    ints = struct.unpack_from(f"<{n_int}I", raw, 4)
    pos = 4 + 4 * n_int
    eps, std = struct.unpack_from("<2d", raw, pos)
    pos += 16
    kwargs = dict(zip(_INT_FIELDS, ints[1:]))
    cfg = ModelConfig(attention="favor" if ints[0] else "exact", attn_eps=eps, init_std=std, **kwargs)
    weights: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in weight_shapes(cfg).items():
        count = int(np.prod(shape))
        data = np.frombuffer(raw, "<f8", count, pos).reshape(shape).astype(np.float64)
        weights[name] = Tensor(data, requires_grad=True, name=name)
        pos += 8 * count
    feats = []
    for i in range(cfg.n_layers):
        count = cfg.feature_count * cfg.head_dim
        omega = np.frombuffer(raw, "<f8", count, pos).reshape(cfg.feature_count, cfg.head_dim).astype(np.float64)
        feats.append(RandomFeatureMap(omega, cfg.feature_seed * 1000 + i, True))
        pos += 8 * count
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes in model checkpoint")
    return ModelParams(cfg, weights, feats)


def weights_digest(params: ModelParams) -> str:
    h = hashlib.sha256()
    for t in params.weights.values():
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
