"""Adversarial training loop, checkpoint plumbing and the enhancement path.

One :func:`train_step` runs three phases on a batch of aligned
(clean, noisy, video) segments:

1. the discriminator back-propagates the real pairs ``(y, y~)``;
2. it back-propagates the generated pairs ``(G(y~, v), y~)`` with the
   generator output detached, then takes one Adam step on the sum;
3. the generator takes one Adam step on the least-squares adversarial loss
   plus ``lambda`` times the L1 distance, with the discriminator frozen.

Parameter hashes taken around each phase enforce the freezing contract.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import dsp
from .autodiff import Adam, AdamState, Tensor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import read_manifest, load_row
from .data import Batch, SegmentDataset
from .errors import ContractViolation, IntegrityError, NonFiniteError
from .metrics import si_sdr, stoi
from .model import (Discriminator, Generator, LossValues, ModelConfig, build_models, g_loss,
                    lsgan_d_loss)

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "step", "d_loss", "g_adv", "g_l1", "g_total", "val_stoi", "val_sisdr"]


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 70
    batch_size: int = 8
    lam: float = 100.0
    seed: int = 0
    aug_low_db: float = -15.0
    aug_high_db: float = 0.0
    width_scale: int = 0
    precision: str = "float32"
    latent_channels: int = 0
    train_manifest: str = ""
    val_manifest: str = ""
    out_dir: str = "run"
    val_limit: Optional[int] = None

    # ``lambda`` is a keyword, so it is stored as ``lam`` and serialised under its own name
    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["lambda"] = out.pop("lam")
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ContractViolation(f"unknown config keys: {', '.join(unknown)}")
        config = cls(**data)
        config.validate()
        return config

    def validate(self) -> None:
        if not self.lam >= 0:
            raise ContractViolation(f"lambda must be >= 0, got {self.lam}")
        for name in ("lr", "epochs", "batch_size"):
            if not getattr(self, name) > 0:
                raise ContractViolation(f"{name} must be positive, got {getattr(self, name)}")
        if self.aug_low_db > self.aug_high_db:
            raise ContractViolation("augmentation range is inverted")
        if self.width_scale < 0 or self.latent_channels < 0:
            raise ContractViolation("width_scale and latent_channels must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ContractViolation(f"precision must be float32 or float64, got {self.precision}")
        if self.val_limit is not None and self.val_limit < 0:
            raise ContractViolation("val_limit must be >= 0")

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(self.width_scale, self.latent_channels, self.precision)


class FreezingViolation(RuntimeError):
    """A frozen network's parameters moved during a training phase."""


class TrainingAborted(RuntimeError):
    pass


def param_hash(module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters().items()):
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


def _set_trainable(params, flag: bool) -> None:
    for p in params:
        p.requires_grad = flag


def latent_noise(config: TrainConfig, key, batch: int) -> Optional[np.ndarray]:
    if not config.latent_channels:
        return None
    rng = np.random.default_rng([config.seed, 0x1A7E, *np.atleast_1d(key).tolist()])
    shape = (batch, config.latent_channels, dsp.N_MELS, dsp.SEGMENT_FRAMES)
    return rng.standard_normal(shape).astype(config.precision)


def train_step(batch: Batch, G: Generator, D: Discriminator, opt_g: Adam, opt_d: Adam,
               lam: float, latent: Optional[np.ndarray] = None,
               verify_freezing: bool = True) -> LossValues:
    """One discriminator update followed by one generator update."""
    dtype = np.dtype(G.config.dtype)
    clean = Tensor(batch.clean, dtype=dtype)
    noisy = Tensor(batch.noisy, dtype=dtype)
    video = Tensor(batch.video, dtype=dtype)
    G.train()
    D.train()
    g_hash = param_hash(G) if verify_freezing else None

    # the generator graph is built once; G cannot move before phase 3, so reusing it is exact
    enhanced = G(noisy, video, latent)

    # phases 1 and 2: gradients of the real and fake halves accumulate into one D update
    opt_d.zero_grad()
    real_part = ad.mean(ad.square(D(clean, noisy) - 1.0)) * 0.5
    real_part.backward()
    fake_part = ad.mean(ad.square(D(enhanced.detach(), noisy))) * 0.5
    fake_part.backward()
    opt_d.step()
    d_value = real_part.item() + fake_part.item()

    if verify_freezing:
        if param_hash(G) != g_hash:
            raise FreezingViolation("generator parameters changed during the discriminator update")
        d_hash = param_hash(D)

    # phase 3: D is frozen so only G accumulates gradients
    d_params = list(D.named_parameters().values())
    _set_trainable(d_params, False)
    try:
        opt_g.zero_grad()
        loss = g_loss(D, enhanced, noisy, clean, lam)
        loss.total.backward()
        opt_g.step()
    finally:
        _set_trainable(d_params, True)
    if verify_freezing and param_hash(D) != d_hash:
        raise FreezingViolation("discriminator parameters changed during the generator update")
    return LossValues(d_value, loss.adversarial.item(), loss.l1.item(), lam)


def d_optimum_loss(D: Discriminator, batch: Batch, enhanced: np.ndarray) -> float:
    """Current discriminator loss on ``batch`` against fixed generator output."""
    dtype = np.dtype(D.config.dtype)
    noisy = Tensor(batch.noisy, dtype=dtype)
    real = D(Tensor(batch.clean, dtype=dtype), noisy)
    fake = D(Tensor(enhanced, dtype=dtype), noisy)
    return lsgan_d_loss(real, fake).item()


# --------------------------------------------------------------- session

@dataclass
class Session:
    """Everything a checkpoint captures."""

    config: TrainConfig
    G: Generator
    D: Discriminator
    opt_g: Adam
    opt_d: Adam
    stats: dsp.NormStats
    epoch: int = 0
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def fresh(cls, config: TrainConfig, stats: dsp.NormStats) -> "Session":
        G, D = build_models(config.model_config, config.seed)
        return cls(config, G, D,
                   Adam(G.named_parameters(), lr=config.lr),
                   Adam(D.named_parameters(), lr=config.lr),
                   stats, rng=np.random.default_rng([config.seed, 0x5EED]))

    def to_checkpoint(self) -> Checkpoint:
        arrays = {}
        for tag, net, opt in (("G", self.G, self.opt_g), ("D", self.D, self.opt_d)):
            for name, value in net.state_arrays().items():
                arrays[f"{tag}/{name}"] = value
            for name in opt.state.first_moment:
                arrays[f"adam.{tag}.m/{name}"] = opt.state.first_moment[name]
                arrays[f"adam.{tag}.v/{name}"] = opt.state.second_moment[name]
        meta = {
            "config": self.config.to_dict(),
            "model": self.config.model_config.to_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "adam_steps": {"G": self.opt_g.state.step_count, "D": self.opt_d.state.step_count},
            "norm_stats": self.stats.to_dict(),
        }
        return Checkpoint(meta, arrays, self.rng.bit_generator.state)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: TrainConfig | None = None) -> "Session":
        try:
            saved = TrainConfig.from_dict(ckpt.meta["config"])
            stats = dsp.NormStats(**ckpt.meta["norm_stats"])
            epoch, step = int(ckpt.meta["epoch"]), int(ckpt.meta["step"])
            adam_steps = ckpt.meta["adam_steps"]
        except (KeyError, TypeError) as exc:
            raise IntegrityError(f"checkpoint metadata incomplete: {exc}") from exc
        config = config or saved
        session = cls.fresh(config, stats)
        session.epoch, session.step = epoch, step
        for tag, net, opt in (("G", session.G, session.opt_g), ("D", session.D, session.opt_d)):
            net.load_arrays({k[2:]: v for k, v in ckpt.arrays.items() if k.startswith(f"{tag}/")})
            m_prefix, v_prefix = f"adam.{tag}.m/", f"adam.{tag}.v/"
            m = {k[len(m_prefix):]: v for k, v in ckpt.arrays.items() if k.startswith(m_prefix)}
            v = {k[len(v_prefix):]: v for k, v in ckpt.arrays.items() if k.startswith(v_prefix)}
            if set(m) != set(opt.params) or set(v) != set(opt.params):
                raise IntegrityError(f"optimizer state for {tag} does not match its parameters")
            opt.state = AdamState(int(adam_steps[tag]), m, v)
        session.rng = np.random.default_rng()
        session.rng.bit_generator.state = ckpt.rng_state
        return session

    def save(self, path) -> Path:
        return save_checkpoint(path, self.to_checkpoint())


def load_session(path, config: TrainConfig | None = None) -> Session:
    return Session.from_checkpoint(load_checkpoint(path), config)


# ------------------------------------------------------------ enhancement

def enhance_arrays(G: Generator, stats: dsp.NormStats, noisy, frames: np.ndarray,
                   latent: Optional[np.ndarray] = None, batch_size: int = 16) -> dsp.Waveform:
    """Enhance a waveform given its aligned 80x80 mouth frames.

    The output covers the whole segments only: ``segments * 3200`` samples.
    """
    samples = noisy.samples if isinstance(noisy, dsp.Waveform) else np.asarray(noisy, dtype=np.float64)
    frames = np.asarray(frames)
    audio_s = len(samples) / dsp.SAMPLE_RATE
    video_s = len(frames) / dsp.VIDEO_FPS
    if abs(audio_s - video_s) > dsp.SEGMENT_SAMPLES / dsp.SAMPLE_RATE:
        raise ContractViolation(
            f"audio lasts {audio_s:.3f} s but the {len(frames)} frames cover {video_s:.3f} s")
    count = dsp.segment_count(len(samples), len(frames))
    if count == 0:
        raise ContractViolation("input is shorter than one 200 ms segment")
    spec = dsp.segment_spectrogram(samples, count)
    values = dsp.slice_segments(dsp.log_mel_spectrogram(np.abs(spec)), count)
    video = dsp.video_segments(frames, count).astype(np.float64)
    if frames.dtype == np.uint8:
        video /= 255.0

    dtype = np.dtype(G.config.dtype)
    G.eval()
    outputs = []
    for start in range(0, count, batch_size):
        sl = slice(start, start + batch_size)
        x = Tensor(dsp.normalize(values[sl], stats)[:, None], dtype=dtype)
        v = Tensor(video[sl], dtype=dtype)
        lat = None if latent is None else latent[sl]
        outputs.append(G(x, v, lat).data[:, 0])
    enhanced = dsp.denormalize(np.concatenate(outputs), stats)
    return dsp.mel_pseudo_inverse(enhanced, spec, length=count * dsp.SEGMENT_SAMPLES)


def session_enhance(session: Session, noisy, frames) -> dsp.Waveform:
    count = dsp.segment_count(len(noisy), len(frames))
    latent = latent_noise(session.config, [-1], max(count, 1))
    return enhance_arrays(session.G, session.stats, noisy, frames, latent)


def enhance(checkpoint_path, noisy, frames) -> dsp.Waveform:
    """Load a checkpoint and enhance one utterance."""
    return session_enhance(load_session(checkpoint_path), noisy, frames)


def validate(session: Session, manifest: dict, limit: Optional[int] = None) -> tuple[float, float]:
    """Median STOI and SI-SDR of enhanced validation utterances (eval-mode batch norm)."""
    rows = manifest["rows"] if limit is None else manifest["rows"][:limit]
    stoi_values, sdr_values = [], []
    for row in rows:
        utt = load_row(row, manifest.get("_root"))
        noisy = dsp.mix_at_snr(utt.clean, utt.noise, utt.snr_db)
        out = session_enhance(session, noisy, utt.frames)
        ref = utt.clean[:len(out)]
        stoi_values.append(stoi(ref, out.samples))
        sdr_values.append(si_sdr(ref, out.samples))
    if not rows:
        return float("nan"), float("nan")
    return float(np.median(stoi_values)), float(np.median(sdr_values))


# ------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    history: list


def epoch_batches(session: Session, n_items: int) -> list[np.ndarray]:
    order = session.rng.permutation(n_items)
    bs = session.config.batch_size
    return [order[i:i + bs] for i in range(0, n_items, bs)]


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.8g}"


def _read_rows(path: Path, up_to_epoch: int) -> list[list[str]]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [r for r in rows if r and int(r[0]) <= up_to_epoch]


def _dump_batch(out_dir: Path, batch: Batch, epoch: int, index: int, step: int, err: Exception) -> Path:
    path = out_dir / f"nonfinite_epoch{epoch:03d}_batch{index:05d}.npz"
    np.savez(path, clean=batch.clean, noisy=batch.noisy, video=batch.video,
             items=np.asarray(batch.items), step=step, message=str(err))
    return path


def run_epoch(session: Session, data: SegmentDataset, out_dir: Path) -> list[LossValues]:
    cfg = session.config
    dtype = np.dtype(cfg.precision)
    epoch = session.epoch + 1
    losses = []
    for index, idx in enumerate(epoch_batches(session, len(data))):
        items = [data.items[i] for i in idx]
        atts = [dsp.attenuation_db(cfg.seed, session.step, j, cfg.aug_low_db, cfg.aug_high_db)
                for j in range(len(items))]
        batch = data.batch(items, session.stats, atts, dtype)
        try:
            values = train_step(batch, session.G, session.D, session.opt_g, session.opt_d, cfg.lam,
                                latent_noise(cfg, session.step, len(items)))
        except NonFiniteError as err:
            dump = _dump_batch(out_dir, batch, epoch, index, session.step, err)
            raise TrainingAborted(
                f"non-finite value in epoch {epoch}, batch {index} (step {session.step}): {err}; "
                f"batch saved to {dump}") from err
        losses.append(values)
        session.step += 1
    session.epoch = epoch
    return losses


def train(config: TrainConfig, resume=None, max_steps_per_epoch: Optional[int] = None,
          figures: bool = True) -> TrainResult:
    """Run (or resume) training, writing a checkpoint per epoch and ``metrics.csv``."""
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_manifest = read_manifest(config.train_manifest)
    data = SegmentDataset(train_manifest)
    if len(data) == 0:
        raise ContractViolation("training manifest yields no segments")
    if max_steps_per_epoch is not None:
        data.items = data.items[:max_steps_per_epoch * config.batch_size]
    val_manifest = read_manifest(config.val_manifest) if config.val_manifest else None

    if resume is not None:
        session = load_session(resume, config)
        log.info("resumed from %s at epoch %d, step %d", resume, session.epoch, session.step)
    else:
        session = Session.fresh(config, data.norm_stats())

    metrics_path = out_dir / "metrics.csv"
    rows = _read_rows(metrics_path, session.epoch) if resume is not None else []
    last = None
    while session.epoch < config.epochs:
        losses = run_epoch(session, data, out_dir)
        if val_manifest is not None and config.val_limit != 0:
            val_stoi, val_sdr = validate(session, val_manifest, config.val_limit)
        else:
            val_stoi, val_sdr = float("nan"), float("nan")
        mean = {k: float(np.mean([getattr(v, k) for v in losses]))
                for k in ("d_loss", "g_adv_loss", "g_l1_loss", "g_total")}
        rows.append([str(session.epoch), str(session.step), _fmt(mean["d_loss"]), _fmt(mean["g_adv_loss"]),
                     _fmt(mean["g_l1_loss"]), _fmt(mean["g_total"]), _fmt(val_stoi), _fmt(val_sdr)])
        with open(metrics_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            writer.writerows(rows)
        last = session.save(out_dir / f"epoch_{session.epoch:03d}.vsgn")
        log.info("epoch %d: d=%.4f g_adv=%.4f g_l1=%.4f val_stoi=%.3f val_sisdr=%.2f", session.epoch,
                 mean["d_loss"], mean["g_adv_loss"], mean["g_l1_loss"], val_stoi, val_sdr)
    if last is None:
        last = session.save(out_dir / f"epoch_{session.epoch:03d}.vsgn")
    final = out_dir / "final.vsgn"
    final.write_bytes(Path(last).read_bytes())
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    if figures:
        from .plotting import plot_training_curves
        plot_training_curves(metrics_path, out_dir / "training_curves.png")
    return TrainResult(final, metrics_path, rows)
