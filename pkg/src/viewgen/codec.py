"""Vector-quantised image codec: conv encoder, nearest-code quantiser, conv decoder.

Images are single-channel ``H x W`` arrays in [0, 1] (RGB input is reduced
to one channel).  The encoder halves the resolution ``log2(f)`` times with
4x4 stride-2 convolutions; the decoder mirrors it with nearest upsampling
and 3x3 convolutions.  Training alternates a generator step on
``L_VQ + lambda * (L_G + feature L2)`` with a discriminator step, where the
feature term (an L2 between discriminator activations of real and
reconstructed images) stands in for a pretrained perceptual loss.
"""

from __future__ import annotations

import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .optim import AdamW
from .tensor import DivergenceError, NumericalError, Tensor, no_grad

log = logging.getLogger(__name__)

MAGIC = b"VQC1"
PROB_CLAMP = 1e-7


@dataclass
class CodecConfig:
    codebook_size: int = 32
    code_dim: int = 16
    downsample: int = 4
    channels: tuple[int, ...] = (16, 32)
    disc_channels: tuple[int, ...] = (16, 32)
    image_side: int = 16
    beta: float = 0.25
    gan_weight: float = 0.1
    feature_weight: float = 1.0
    lr: float = 2e-3
    steps: int = 2000
    batch_size: int = 16
    disc_start: int = 0
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.disc_channels = tuple(int(c) for c in self.disc_channels)
        levels = math.log2(self.downsample)
        if self.downsample < 1 or levels != int(levels):
            raise ValueError(f"downsample factor must be a power of two, got {self.downsample}")
        if len(self.channels) != int(levels):
            raise ValueError(f"need {int(levels)} encoder channel widths for f={self.downsample}, "
                             f"got {len(self.channels)}")
        if self.image_side % self.downsample:
            raise ValueError(f"image side {self.image_side} not divisible by f={self.downsample}")
        if self.codebook_size < 2 or self.code_dim < 1:
            raise ValueError("codebook needs M >= 2 and n >= 1")
        if len(self.disc_channels) != 2:
            raise ValueError("discriminator takes exactly two hidden widths")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.downsample


@dataclass
class CodecParams:
    """Weights in checkpoint order: encoder, codebook, decoder, discriminator."""

    config: CodecConfig
    weights: "OrderedDict[str, Tensor]"
    history: list[dict] = field(default_factory=list)

    @property
    def codebook(self) -> Tensor:
        return self.weights["codebook"]

    def group(self, prefix: str) -> list[Tensor]:
        return [t for k, t in self.weights.items() if k.startswith(prefix)]

    @property
    def generator_params(self) -> list[Tensor]:
        return [t for k, t in self.weights.items() if not k.startswith("disc.")]

    @property
    def disc_params(self) -> list[Tensor]:
        return self.group("disc.")


class Quantized(NamedTuple):
    straight_through: Tensor  # values of z_q, gradient of identity into z
    quantized: Tensor  # z_q, gradient into the codebook
    codes: np.ndarray


# -- construction ------------------------------------------------------------------

def _conv_weight(rng, out_c, in_c, k):
    std = math.sqrt(2.0 / (in_c * k * k))
    return Tensor(rng.normal(0.0, std, size=(out_c, in_c, k, k)), requires_grad=True)


def _bias(n):
    return Tensor(np.zeros(n), requires_grad=True)


def init_codec(config: CodecConfig) -> CodecParams:
    rng = np.random.default_rng([config.seed, 17])
    w: OrderedDict[str, Tensor] = OrderedDict()
    prev = 1
    for i, c in enumerate(config.channels):
        w[f"enc.{i}.w"], w[f"enc.{i}.b"] = _conv_weight(rng, c, prev, 4), _bias(c)
        prev = c
    w["enc.proj.w"], w["enc.proj.b"] = _conv_weight(rng, config.code_dim, prev, 1), _bias(config.code_dim)
    m = config.codebook_size
    w["codebook"] = Tensor(rng.uniform(-1.0 / m, 1.0 / m, size=(m, config.code_dim)), requires_grad=True)
    w["dec.proj.w"], w["dec.proj.b"] = _conv_weight(rng, prev, config.code_dim, 1), _bias(prev)
    widths = list(config.channels[::-1][1:]) + [1]
    for i, c in enumerate(widths):
        w[f"dec.{i}.w"], w[f"dec.{i}.b"] = _conv_weight(rng, c, prev, 3), _bias(c)
        prev = c
    c1, c2 = config.disc_channels
    w["disc.0.w"], w["disc.0.b"] = _conv_weight(rng, c1, 1, 4), _bias(c1)
    w["disc.1.w"], w["disc.1.b"] = _conv_weight(rng, c2, c1, 4), _bias(c2)
    w["disc.2.w"], w["disc.2.b"] = _conv_weight(rng, 1, c2, 3), _bias(1)
    return CodecParams(config, w)


# -- networks -------------------------------------------------------------------------

def encoder(params: CodecParams, x: Tensor) -> Tensor:
    """(B, 1, H, W) images -> (B, h, w, n) continuous features."""
    w = params.weights
    h = x
    for i in range(len(params.config.channels)):
        h = T.relu(T.conv2d(h, w[f"enc.{i}.w"], w[f"enc.{i}.b"], stride=2, padding=1))
    z = T.conv2d(h, w["enc.proj.w"], w["enc.proj.b"])
    return T.transpose(z, (0, 2, 3, 1))


def decoder(params: CodecParams, zq: Tensor) -> Tensor:
    """(B, h, w, n) quantised features -> (B, 1, H, W) reconstruction (unclamped)."""
    w = params.weights
    h = T.relu(T.conv2d(T.transpose(zq, (0, 3, 1, 2)), w["dec.proj.w"], w["dec.proj.b"]))
    n = len(params.config.channels)
    for i in range(n):
        h = T.conv2d(T.upsample2x(h), w[f"dec.{i}.w"], w[f"dec.{i}.b"], padding=1)
        if i < n - 1:
            h = T.relu(h)
    return h


def discriminator(params: CodecParams, x: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Patch classifier; returns per-patch probabilities and hidden activations."""
    w = params.weights
    f1 = T.leaky_relu(T.conv2d(x, w["disc.0.w"], w["disc.0.b"], stride=2, padding=1))
    f2 = T.leaky_relu(T.conv2d(f1, w["disc.1.w"], w["disc.1.b"], stride=2, padding=1))
    logits = T.conv2d(f2, w["disc.2.w"], w["disc.2.b"], padding=1)
    return T.sigmoid(logits), [f1, f2]


# -- quantisation and losses -----------------------------------------------------------

def nearest_codes(z: np.ndarray, codebook: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """argmin_k ||z - e_k||^2 per row, ties to the lowest index."""
    flat = z.reshape(-1, z.shape[-1])
    out = np.empty(flat.shape[0], dtype=np.int64)
    for start in range(0, flat.shape[0], chunk):
        block = flat[start:start + chunk]
        dist = ((block[:, None, :] - codebook[None, :, :]) ** 2).sum(-1)
        out[start:start + chunk] = dist.argmin(axis=1)
    return out.reshape(z.shape[:-1])


def quantize(z: Tensor, codebook: Tensor) -> Quantized:
    """Snap each feature vector to its nearest codebook entry."""
    if z.shape[-1] != codebook.shape[1]:
        raise ValueError(f"feature dim {z.shape[-1]} != codebook dim {codebook.shape[1]}")
    if not np.all(np.isfinite(z.data)):
        raise NumericalError("non-finite features passed to quantize")
    codes = nearest_codes(z.data, codebook.data)
    zq = T.embedding_lookup(codebook, codes)
    st = z + T.detach(zq - z)
    return Quantized(st, zq, codes)


def _sq(a: Tensor, reduction: str) -> Tensor:
    sq = a * a
    if reduction == "sum":
        return T.tsum(sq)
    if reduction == "batch":
        return T.tsum(sq) * (1.0 / a.shape[0])
    if reduction == "mean":
        return T.mean(sq)
    raise ValueError(f"unknown reduction {reduction!r}")


def vq_loss_terms(x, x_hat, z, zq, beta: float, reduction: str = "sum") -> dict[str, Tensor]:
    """The three L_VQ terms.

    ``reduction`` is ``"sum"`` (plain squared norms), ``"batch"`` (squared
    norms per image averaged over the leading axis) or ``"mean"``.
    """
    x, x_hat, z, zq = (T._as_tensor(a) for a in (x, x_hat, z, zq))
    if x.shape != x_hat.shape or z.shape != zq.shape:
        raise T.ShapeError(f"vq_loss: shapes {x.shape}/{x_hat.shape} and {z.shape}/{zq.shape}")
    return {
        "reconstruction": _sq(x - x_hat, reduction),
        "codebook": _sq(T.detach(z) - zq, reduction),
        "commitment": _sq(T.detach(zq) - z, reduction) * beta,
    }


def vq_loss(x, x_hat, z, zq, beta: float = 0.25, reduction: str = "sum") -> Tensor:
    """||x - x_hat||^2 + ||sg[z] - z_q||^2 + beta ||sg[z_q] - z||^2."""
    terms = vq_loss_terms(x, x_hat, z, zq, beta, reduction)
    return terms["reconstruction"] + terms["codebook"] + terms["commitment"]


def gan_loss_from_probs(p_real: Tensor, p_fake: Tensor) -> tuple[Tensor, Tensor]:
    pr = T.clip(p_real, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pf = T.clip(p_fake, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss_d = -(T.mean(T.log(pr)) + T.mean(T.log(1.0 - pf)))
    loss_g = -T.mean(T.log(pf))
    return loss_d, loss_g


def gan_loss(x, x_hat, d: Callable[[Tensor], Tensor]) -> tuple[Tensor, Tensor]:
    """(discriminator loss, generator loss) for a probability-valued ``d``."""
    return gan_loss_from_probs(d(T._as_tensor(x)), d(T._as_tensor(x_hat)))


# -- forward pass and training ------------------------------------------------------------

def _as_batch(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 3 and arr.shape[-1] == 3 and arr.shape[0] != 3:
        arr = arr.mean(-1)[None]
    elif arr.ndim == 4 and arr.shape[-1] == 3:
        arr = arr.mean(-1)
    return arr[:, None]


def _check_side(params: CodecParams, batch: np.ndarray) -> None:
    side = params.config.image_side
    if batch.shape[-2:] != (side, side):
        raise ValueError(f"codec expects {side}x{side} images, got {batch.shape[-2:]}")


def generator_loss(params: CodecParams, x: Tensor, step: int | None = None
                   ) -> tuple[Tensor, dict[str, float], Tensor]:
    """Per-image L_VQ plus the weighted adversarial and feature terms, batch averaged.

    Keeping L_VQ as per-image squared norms (rather than per-pixel means)
    holds it on the same scale as the O(1) adversarial loss, so a fixed
    weight does not let the discriminator swamp reconstruction.
    """
    cfg = params.config
    z = encoder(params, x)
    q = quantize(z, params.codebook)
    x_hat = decoder(params, q.straight_through)
    terms = vq_loss_terms(x, x_hat, z, q.quantized, cfg.beta, reduction="batch")
    total = terms["reconstruction"] + terms["codebook"] + terms["commitment"]
    info = {k: v.item() for k, v in terms.items()}
    info["mse"] = info["reconstruction"] / x.data[0].size
    use_gan = cfg.gan_weight > 0 and (step is None or step >= cfg.disc_start)
    if use_gan:
        p_fake, feats_fake = discriminator(params, x_hat)
        with no_grad():
            _, feats_real = discriminator(params, x)
        loss_g = -T.mean(T.log(T.clip(p_fake, PROB_CLAMP, 1.0 - PROB_CLAMP)))
        feat = sum((T.mean((a - b) ** 2) for a, b in zip(feats_fake, feats_real)), Tensor(0.0))
        total = total + (loss_g + feat * cfg.feature_weight) * cfg.gan_weight
        info.update(gan_g=loss_g.item(), feature=feat.item())
    info["total"] = total.item()
    return total, info, x_hat


def train_codec(images: np.ndarray, config: CodecConfig,
                progress: Callable[[dict], None] | None = None) -> CodecParams:
    """Alternating generator/discriminator Adam steps over the image set."""
    data = _as_batch(images)
    if data.shape[-1] != data.shape[-2]:
        raise ValueError("codec training needs square images")
    if data.shape[-1] != config.image_side:
        raise ValueError(f"images are {data.shape[-1]} px but config says {config.image_side}")
    params = init_codec(config)
    g_opt = AdamW(params.generator_params, config.lr, lazy=[params.codebook])
    d_opt = AdamW(params.disc_params, config.lr)
    rng = np.random.default_rng([config.seed, 23])
    n = data.shape[0]
    bs = min(config.batch_size, n)
    per_epoch = max(1, n // bs)
    order = rng.permutation(n)
    epoch_sums: dict[str, float] = {}
    batches = 0
    for step in range(config.steps):
        slot = step % per_epoch
        if slot == 0 and step:
            order = rng.permutation(n)
        x = Tensor(data[order[slot * bs:(slot + 1) * bs]])

        g_opt.zero_grad()
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                total, info, x_hat = generator_loss(params, x, step)
        except NumericalError as exc:
            raise DivergenceError(f"codec diverged at step {step}: {exc}", params) from exc
        if not np.isfinite(info["total"]):
            raise DivergenceError(f"codec diverged at step {step}: {info}", params)
        total.backward()
        g_opt.step()

        if config.gan_weight > 0 and step >= config.disc_start:
            d_opt.zero_grad()
            p_real, _ = discriminator(params, x)
            p_fake, _ = discriminator(params, T.detach(x_hat))
            loss_d, _ = gan_loss_from_probs(p_real, p_fake)
            if not np.isfinite(loss_d.item()):
                raise DivergenceError(f"discriminator diverged at step {step}", params)
            loss_d.backward()
            d_opt.step()
            info["gan_d"] = loss_d.item()

        for k, v in info.items():
            epoch_sums[k] = epoch_sums.get(k, 0.0) + v
        batches += 1
        if slot == per_epoch - 1 or step == config.steps - 1:
            record = {k: v / batches for k, v in epoch_sums.items()}
            record.update(epoch=len(params.history), step=step + 1)
            params.history.append(record)
            if progress is not None:
                progress(record)
            epoch_sums, batches = {}, 0
    for t in params.weights.values():
        t.grad = None
    return params


def reconstruct(params: CodecParams, images) -> np.ndarray:
    batch = _as_batch(images)
    _check_side(params, batch)
    with no_grad():
        z = encoder(params, Tensor(batch))
        q = quantize(z, params.codebook)
        return np.clip(decoder(params, q.quantized).data[:, 0], 0.0, 1.0)


def encode_images(params: CodecParams, images) -> np.ndarray:
    """(N, H, W) images -> (N, h, w) integer code grids."""
    batch = _as_batch(images)
    _check_side(params, batch)
    if batch.size and (batch.min() < 0.0 or batch.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    with no_grad():
        z = encoder(params, Tensor(batch))
    return nearest_codes(z.data, params.codebook.data)


def encode_image(params: CodecParams, image) -> np.ndarray:
    return encode_images(params, image)[0]


def decode_grids(params: CodecParams, grids) -> np.ndarray:
    codes = np.asarray(grids, dtype=np.int64)
    if codes.ndim == 2:
        codes = codes[None]
    g = params.config.grid_side
    if codes.shape[1:] != (g, g):
        raise ValueError(f"codec expects {g}x{g} grids, got {codes.shape[1:]}")
    validate_grid(codes, params.config.codebook_size)
    with no_grad():
        zq = T.embedding_lookup(params.codebook, codes)
        return np.clip(decoder(params, zq).data[:, 0], 0.0, 1.0)


def decode_tokens(params: CodecParams, grid) -> np.ndarray:
    return decode_grids(params, grid)[0]


# -- token grids ------------------------------------------------------------------------------

def validate_grid(codes: np.ndarray, codebook_size: int) -> None:
    if codes.size and (codes.min() < 0 or codes.max() >= codebook_size):
        raise IndexError(f"grid code outside [0, {codebook_size})")


def format_grid(codes: np.ndarray) -> str:
    codes = np.asarray(codes, dtype=np.int64)
    h, w = codes.shape
    rows = [" ".join(str(int(c)) for c in row) for row in codes]
    return f"{h} {w}\n" + "\n".join(rows) + "\n"


def parse_grid(text: str) -> np.ndarray:
    tokens = text.split()
    if len(tokens) < 2:
        raise ValueError("grid text needs an 'h w' header")
    h, w = int(tokens[0]), int(tokens[1])
    body = [int(t) for t in tokens[2:]]
    if len(body) != h * w:
        raise ValueError(f"grid header says {h}x{w} but holds {len(body)} codes")
    return np.array(body, dtype=np.int64).reshape(h, w)


# -- checkpoints --------------------------------------------------------------------------------

def save_codec(params: CodecParams, path: str | Path) -> None:
    """``VQC1``; u32 dims; f64 beta, lambda; f64 weights in ``params.weights`` order.

    Dims: M, n, f, image_side, len(channels), channels..., disc widths (2).
    """
    cfg = params.config
    dims = [cfg.codebook_size, cfg.code_dim, cfg.downsample, cfg.image_side,
            len(cfg.channels), *cfg.channels, *cfg.disc_channels]
    parts = [MAGIC, struct.pack(f"<{len(dims)}I", *dims),
             struct.pack("<2d", cfg.beta, cfg.gan_weight)]
    parts += [np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in params.weights.values()]
    Path(path).write_bytes(b"".join(parts))


def load_codec(path: str | Path) -> CodecParams:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a VQC1 codec checkpoint")
    pos = 4
    m, n, f, side, n_ch = struct.unpack_from("<5I", raw, pos)
    pos += 20
    channels = struct.unpack_from(f"<{n_ch}I", raw, pos)
    pos += 4 * n_ch
    disc = struct.unpack_from("<2I", raw, pos)
    pos += 8
    beta, lam = struct.unpack_from("<2d", raw, pos)
    pos += 16
    cfg = CodecConfig(codebook_size=m, code_dim=n, downsample=f, channels=channels,
                      disc_channels=disc, image_side=side, beta=beta, gan_weight=lam)
    params = init_codec(cfg)
    for t in params.weights.values():
        count = t.data.size
        t.data = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(t.shape).astype(np.float64)
        pos += 8 * count
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes in codec checkpoint")
    return params


def token_round_trip_rate(params: CodecParams, images: Sequence[np.ndarray]) -> float:
    """Fraction of cells where encode(decode(encode(x))) reproduces encode(x)."""
    codes = encode_images(params, np.asarray(images))
    again = encode_images(params, decode_grids(params, codes))
    return float(np.mean(codes == again))
