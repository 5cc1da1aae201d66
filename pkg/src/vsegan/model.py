"""VSEGAN generator, conditional discriminator and least-squares losses.

The generator has an audio encoder over the 80x20 log-mel segment and a
video encoder over five stacked 80x80 frames. Both run five two-layer
stages whose output sizes match exactly:

    (64, 40, 10), (128, 20, 5), (256, 10, 5), (512, 5, 5), (1024, 5, 1)

Each stage's audio and video maps are fused (concat, 3x3 conv, BN,
leaky-ReLU) into a skip tensor for the decoder. The deepest maps also pass
through a fully connected bottleneck. Five transposed-conv decoder stages
then rebuild the 80x20 output behind a tanh head. ``width_scale`` divides
every channel count by ``2**width_scale`` (minimum 1) for small models.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsp import FRAME_SIZE, N_MELS, SEGMENT_FRAMES, VIDEO_FRAMES_PER_SEGMENT
from .errors import ContractViolation, NonFiniteError
from .nn import LEAKY_SLOPE, BatchNorm2d, Conv2d, ConvTranspose2d, Linear, Module

# Encoder layers Conv1..Conv10
FILTERS = (64, 64, 128, 128, 256, 256, 512, 512, 1024, 1024)
KERNELS = ((5, 5), (4, 4), (4, 4), (4, 4), (2, 2), (2, 2), (2, 2), (2, 2), (2, 2), (2, 2))
AUDIO_STRIDES = ((2, 2), (1, 1), (2, 2), (1, 1), (2, 1), (1, 1), (2, 1), (1, 1), (1, 5), (1, 1))
VIDEO_POOLS = ((2, 4), (1, 2), (2, 2), (1, 1), (2, 1), (1, 1), (2, 1), (1, 1), (1, 5), (1, 1))
N_STAGES = 5

DISC_FILTERS = (64, 128, 256, 512)
DISC_KERNEL = (4, 4)
DISC_STRIDE = (2, 2)
FUSION_KERNEL = (3, 3)


@dataclass
class ModelConfig:
    width_scale: int = 0
    latent_channels: int = 0
    dtype: str = "float32"

    def channels(self, n: int) -> int:
        return max(1, n >> self.width_scale)

    @property
    def filters(self) -> tuple:
        return tuple(self.channels(f) for f in FILTERS)

    def to_dict(self) -> dict:
        return asdict(self)


def _ceil(a: int, b: int) -> int:
    return -(-a // b)


def stage_shapes(config: ModelConfig | None = None) -> list[tuple[int, int, int]]:
    """Per-stage (channels, height, width) of the audio encoder by ceil division of the strides."""
    config = config or ModelConfig()
    h, w = N_MELS, SEGMENT_FRAMES
    shapes = []
    for k in range(N_STAGES):
        for layer in (2 * k, 2 * k + 1):
            h, w = _ceil(h, AUDIO_STRIDES[layer][0]), _ceil(w, AUDIO_STRIDES[layer][1])
        shapes.append((config.filters[2 * k + 1], h, w))
    return shapes


def video_stage_shapes(config: ModelConfig | None = None) -> list[tuple[int, int, int]]:
    config = config or ModelConfig()
    h = w = FRAME_SIZE
    shapes = []
    for k in range(N_STAGES):
        for layer in (2 * k, 2 * k + 1):
            h, w = _ceil(h, VIDEO_POOLS[layer][0]), _ceil(w, VIDEO_POOLS[layer][1])
        shapes.append((config.filters[2 * k + 1], h, w))
    return shapes


def _act(x: Tensor) -> Tensor:
    return ad.leaky_relu(x, LEAKY_SLOPE)


class AudioEncoderStage(Module):
    def __init__(self, k, in_ch, config, rng, dtype):
        a, b = 2 * k, 2 * k + 1
        f = config.filters
        self.stage = k + 1
        self.in_ch = in_ch
        self.conv_a = Conv2d(in_ch, f[a], KERNELS[a], AUDIO_STRIDES[a], rng, dtype)
        self.bn_a = BatchNorm2d(f[a], dtype)
        self.conv_b = Conv2d(f[a], f[b], KERNELS[b], AUDIO_STRIDES[b], rng, dtype)
        self.bn_b = BatchNorm2d(f[b], dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = _act(self.bn_a(self.conv_a(x)))
        return _act(self.bn_b(self.conv_b(x)))


class VideoEncoderStage(Module):
    def __init__(self, k, in_ch, config, rng, dtype):
        a, b = 2 * k, 2 * k + 1
        f = config.filters
        self.stage = k + 1
        self.in_ch = in_ch
        self.pools = (VIDEO_POOLS[a], VIDEO_POOLS[b])
        self.conv_a = Conv2d(in_ch, f[a], KERNELS[a], (1, 1), rng, dtype)
        self.bn_a = BatchNorm2d(f[a], dtype)
        self.conv_b = Conv2d(f[a], f[b], KERNELS[b], (1, 1), rng, dtype)
        self.bn_b = BatchNorm2d(f[b], dtype)

    def __call__(self, v: Tensor) -> Tensor:
        v = ad.maxpool2d(_act(self.bn_a(self.conv_a(v))), self.pools[0])
        return ad.maxpool2d(_act(self.bn_b(self.conv_b(v))), self.pools[1])


class FusionBlock(Module):
    def __init__(self, channels, rng, dtype):
        self.conv = Conv2d(2 * channels, channels, FUSION_KERNEL, (1, 1), rng, dtype)
        self.bn = BatchNorm2d(channels, dtype)

    def __call__(self, a: Tensor, v: Tensor) -> Tensor:
        if a.dims != v.dims:
            raise ContractViolation(f"fusion needs equal audio/video dims, got {a.dims} and {v.dims}")
        return _act(self.bn(self.conv(ad.concat([a, v], axis=1))))


class EmbeddingBottleneck(Module):
    """Flatten both deepest streams, concatenate, two fully connected layers."""

    def __init__(self, channels, height, width, rng, dtype):
        self.shape = (channels, height, width)
        size = channels * height * width
        self.fc1 = Linear(2 * size, size, rng, dtype)
        self.fc2 = Linear(size, size, rng, dtype)

    def __call__(self, a5: Tensor, v5: Tensor) -> Tensor:
        if a5.dims != v5.dims or a5.dims[1:] != self.shape:
            raise ContractViolation(
                f"bottleneck expects two [N, {', '.join(map(str, self.shape))}] inputs, got {a5.dims} and {v5.dims}")
        h = ad.concat([ad.flatten(a5), ad.flatten(v5)], axis=1)
        h = _act(self.fc1(h))
        h = _act(self.fc2(h))
        return ad.reshape(h, (a5.dims[0],) + self.shape)


class DecoderStage(Module):
    """Concat with the skip, then two transposed convs undoing encoder stage ``6 - k``."""

    def __init__(self, k, config, rng, dtype):
        j = N_STAGES - k  # zero-based encoder stage being inverted
        a, b = 2 * j + 1, 2 * j  # undo the unit-stride layer first, then the strided one
        f = config.filters
        out_ch = f[2 * j - 1] if j > 0 else 1
        self.stage = k
        self.final = j == 0
        self.deconv_a = ConvTranspose2d(2 * f[a], f[b], KERNELS[a], AUDIO_STRIDES[a], rng, dtype)
        self.bn_a = BatchNorm2d(f[b], dtype)
        self.deconv_b = ConvTranspose2d(f[b], out_ch, KERNELS[b], AUDIO_STRIDES[b], rng, dtype)
        self.bn_b = None if self.final else BatchNorm2d(out_ch, dtype)

    def __call__(self, h: Tensor, skip: Tensor) -> Tensor:
        if h.dims != skip.dims:
            raise ContractViolation(f"decoder stage {self.stage}: input {h.dims} does not match skip {skip.dims}")
        x = _act(self.bn_a(self.deconv_a(ad.concat([h, skip], axis=1))))
        x = self.deconv_b(x)
        if self.final:
            return ad.tanh(x)
        return _act(self.bn_b(x))


class Generator(Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        dtype = np.dtype(self.config.dtype)
        rng = np.random.default_rng([seed, 1])
        f = self.config.filters
        audio_in = 1 + self.config.latent_channels
        self.audio = [AudioEncoderStage(k, audio_in if k == 0 else f[2 * k - 1], self.config, rng, dtype)
                      for k in range(N_STAGES)]
        self.video = [VideoEncoderStage(k, VIDEO_FRAMES_PER_SEGMENT if k == 0 else f[2 * k - 1],
                                        self.config, rng, dtype) for k in range(N_STAGES)]
        self.fusion = [FusionBlock(f[2 * k + 1], rng, dtype) for k in range(N_STAGES)]
        c5, h5, w5 = stage_shapes(self.config)[-1]
        self.embedding = EmbeddingBottleneck(c5, h5, w5, rng, dtype)
        self.decoder = [DecoderStage(k, self.config, rng, dtype) for k in range(1, N_STAGES + 1)]
        self._audio_shapes = [(audio_in, N_MELS, SEGMENT_FRAMES)] + stage_shapes(self.config)
        self._video_shapes = [(VIDEO_FRAMES_PER_SEGMENT, FRAME_SIZE, FRAME_SIZE)] + video_stage_shapes(self.config)

    # -- individual stages --------------------------------------------------
    def encoder_stage_audio(self, x: Tensor, k: int) -> Tensor:
        if not 1 <= k <= N_STAGES:
            raise ContractViolation(f"stage must be in 1..{N_STAGES}, got {k}")
        if x.ndim != 4 or x.dims[1:] != self._audio_shapes[k - 1]:
            raise ContractViolation(
                f"audio encoder stage {k} expects [N, {self._audio_shapes[k - 1]}] input, got {x.dims}")
        return self.audio[k - 1](x)

    def encoder_stage_video(self, v: Tensor, k: int) -> Tensor:
        if not 1 <= k <= N_STAGES:
            raise ContractViolation(f"stage must be in 1..{N_STAGES}, got {k}")
        if v.ndim != 4 or v.dims[1:] != self._video_shapes[k - 1]:
            raise ContractViolation(
                f"video encoder stage {k} expects [N, {self._video_shapes[k - 1]}] input, got {v.dims}")
        return self.video[k - 1](v)

    def fusion_block(self, a: Tensor, v: Tensor, k: int) -> Tensor:
        return self.fusion[k - 1](a, v)

    def embedding_bottleneck(self, a5: Tensor, v5: Tensor) -> Tensor:
        return self.embedding(a5, v5)

    def decoder_stage(self, h: Tensor, skip: Tensor, k: int) -> Tensor:
        return self.decoder[k - 1](h, skip)

    # -- full pass ----------------------------------------------------------
    def __call__(self, noisy: Tensor, video: Tensor, latent: Optional[np.ndarray] = None) -> Tensor:
        """``noisy`` [N, 1, 80, 20] and ``video`` [N, 5, 80, 80], both normalised."""
        if self.config.latent_channels:
            if latent is None:
                raise ContractViolation("this generator expects a latent noise array")
            noisy = ad.concat([noisy, Tensor(latent, dtype=noisy.dtype)], axis=1)
        if noisy.ndim != 4 or video.ndim != 4 or noisy.dims[0] != video.dims[0]:
            raise ContractViolation(f"batch mismatch between audio {noisy.dims} and video {video.dims}")
        a, v = noisy, video
        skips = []
        for k in range(1, N_STAGES + 1):
            a = self.encoder_stage_audio(a, k)
            v = self.encoder_stage_video(v, k)
            skips.append(self.fusion_block(a, v, k))
        h = self.embedding_bottleneck(a, v)
        for k in range(1, N_STAGES + 1):
            h = self.decoder_stage(h, skips[N_STAGES - k], k)
        return h


class Discriminator(Module):
    """Strided conv ladder over (candidate, condition) stacked as two channels."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        dtype = np.dtype(self.config.dtype)
        rng = np.random.default_rng([seed, 2])
        chans = [2] + [self.config.channels(c) for c in DISC_FILTERS]
        self.convs = [Conv2d(chans[i], chans[i + 1], DISC_KERNEL, DISC_STRIDE, rng, dtype)
                      for i in range(len(DISC_FILTERS))]
        h, w = N_MELS, SEGMENT_FRAMES
        for _ in DISC_FILTERS:
            h, w = _ceil(h, DISC_STRIDE[0]), _ceil(w, DISC_STRIDE[1])
        self.head = Linear(chans[-1] * h * w, 1, rng, dtype)

    def __call__(self, candidate: Tensor, condition: Tensor) -> Tensor:
        if candidate.dims != condition.dims or candidate.dims[1:] != (1, N_MELS, SEGMENT_FRAMES):
            raise ContractViolation(
                f"discriminator expects two [N, 1, {N_MELS}, {SEGMENT_FRAMES}] inputs, got {candidate.dims} and {condition.dims}")
        x = ad.concat([candidate, condition], axis=1)
        for conv in self.convs:
            x = _act(conv(x))
        return ad.reshape(self.head(ad.flatten(x)), (candidate.dims[0],))


def build_models(config: ModelConfig | None = None, seed: int = 0) -> tuple[Generator, Discriminator]:
    config = config or ModelConfig()
    return Generator(config, seed), Discriminator(config, seed)


# ------------------------------------------------------------------ losses

@dataclass
class LossValues:
    d_loss: float
    g_adv_loss: float
    g_l1_loss: float
    lam: float
    g_total: float = float("nan")

    def __post_init__(self):
        # reported total is recomputed from the parts so the decomposition is exact
        self.g_total = self.g_adv_loss + self.lam * self.g_l1_loss
        for name in ("d_loss", "g_adv_loss", "g_l1_loss", "g_total"):
            if not np.isfinite(getattr(self, name)):
                raise NonFiniteError(f"{name} is not finite", name=name)


@dataclass
class GeneratorLoss:
    total: Tensor
    adversarial: Tensor
    l1: Tensor
    lam: float


def lsgan_d_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    """``0.5*mean((D_real - 1)^2) + 0.5*mean(D_fake^2)``."""
    return ad.mean(ad.square(real_scores - 1.0)) * 0.5 + ad.mean(ad.square(fake_scores)) * 0.5


def lsgan_g_adv_loss(fake_scores: Tensor) -> Tensor:
    return ad.mean(ad.square(fake_scores - 1.0)) * 0.5


def d_loss(D: Discriminator, clean: Tensor, enhanced: Tensor, noisy: Tensor) -> Tensor:
    return lsgan_d_loss(D(clean, noisy), D(enhanced, noisy))


def g_loss(D: Discriminator, enhanced: Tensor, noisy: Tensor, clean: Tensor, lam: float) -> GeneratorLoss:
    """Least-squares adversarial term plus ``lam`` times the mean absolute error."""
    if lam < 0:
        raise ContractViolation(f"lambda must be non-negative, got {lam}")
    adv = lsgan_g_adv_loss(D(enhanced, noisy))
    l1 = ad.mean(ad.absolute(enhanced - clean))
    return GeneratorLoss(adv + l1 * lam, adv, l1, lam)
