import csv

import numpy as np
import pytest

from vsegan import data as data_module
from vsegan import dsp, io
from vsegan.autodiff import Adam, Tensor
from vsegan.checkpoint import load_checkpoint
from vsegan.corpus import CorpusConfig, load_row, read_manifest, write_corpus
from vsegan.data import SegmentDataset
from vsegan.errors import ContractViolation, IntegrityError
from vsegan.model import d_loss
from vsegan.trainer import (METRICS_HEADER, FreezingViolation, Session, TrainConfig, TrainingAborted,
                            d_optimum_loss, enhance, param_hash, train, train_step)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return write_corpus(root, CorpusConfig(train=4, val=2, test=2, duration_s=1.0))


@pytest.fixture(scope="module")
def dataset(corpus):
    return SegmentDataset(read_manifest(corpus["train"]))


def tiny(corpus, out_dir, **kw):
    base = dict(width_scale=5, epochs=2, batch_size=4, lr=1e-3, train_manifest=str(corpus["train"]),
                val_manifest=str(corpus["val"]), val_limit=1, out_dir=str(out_dir))
    base.update(kw)
    return TrainConfig(**base)


def session_and_batch(dataset, seed=0, n=4):
    config = TrainConfig(width_scale=5, batch_size=n, lr=1e-3, seed=seed)
    session = Session.fresh(config, dataset.norm_stats())
    return session, dataset.batch(dataset.items[:n], session.stats)


# ---------------------------------------------------------------- train_step

def test_step_updates_both_networks(dataset):
    s, batch = session_and_batch(dataset)
    g0, d0 = param_hash(s.G), param_hash(s.D)
    values = train_step(batch, s.G, s.D, s.opt_g, s.opt_d, 100.0)
    assert param_hash(s.G) != g0 and param_hash(s.D) != d0
    assert values.d_loss >= 0
    assert values.g_total == values.g_adv_loss + 100.0 * values.g_l1_loss


class Tamper:
    """Optimizer wrapper that also nudges a parameter of the other network."""

    def __init__(self, opt, victim):
        self.opt, self.victim = opt, victim

    def zero_grad(self):
        self.opt.zero_grad()

    def step(self):
        self.opt.step()
        self.victim.data += 1e-3


def test_freezing_violation_detected_in_generator_phase(dataset):
    s, batch = session_and_batch(dataset)
    with pytest.raises(FreezingViolation, match="discriminator"):
        train_step(batch, s.G, s.D, Tamper(s.opt_g, s.D.convs[0].weight), s.opt_d, 100.0)


def test_freezing_violation_detected_in_discriminator_phase(dataset):
    s, batch = session_and_batch(dataset)
    with pytest.raises(FreezingViolation, match="generator"):
        train_step(batch, s.G, s.D, s.opt_g, Tamper(s.opt_d, s.G.audio[0].conv_a.weight), 100.0)


def test_generator_phase_adds_no_discriminator_gradient(dataset):
    s, batch = session_and_batch(dataset)
    train_step(batch, s.G, s.D, s.opt_g, s.opt_d, 100.0)
    left = {k: p.grad.copy() for k, p in s.D.named_parameters().items()}
    # replay the D phase alone on fresh copies: its gradients must equal what train_step left behind
    s2, _ = session_and_batch(dataset)
    dtype = np.float32
    clean, noisy, video = (Tensor(a, dtype=dtype) for a in (batch.clean, batch.noisy, batch.video))
    s2.G.train()
    fake = s2.G(noisy, video).detach()
    s2.opt_d.zero_grad()
    d_loss(s2.D, clean, fake, noisy).backward()
    for k, p in s2.D.named_parameters().items():
        np.testing.assert_allclose(left[k], p.grad, rtol=1e-5, atol=1e-7)


def test_identical_seeds_give_identical_losses(dataset):
    runs = []
    for _ in range(2):
        s, _ = session_and_batch(dataset, seed=5)
        losses = []
        for step in range(10):
            items = dataset.items[(step * 4) % len(dataset):][:4]
            batch = dataset.batch(items, s.stats, [-3.0 * (step % 4)] * len(items))
            losses.append(train_step(batch, s.G, s.D, s.opt_g, s.opt_d, 100.0))
        runs.append(losses)
    assert runs[0] == runs[1]


def test_d_loss_nonnegative_and_below_half_at_optimum(dataset):
    s, batch = session_and_batch(dataset, n=8)
    s.G.eval()
    enhanced = s.G(Tensor(batch.noisy), Tensor(batch.video)).data
    opt = Adam(s.D.named_parameters(), lr=1e-3)
    clean, noisy, fake = Tensor(batch.clean), Tensor(batch.noisy), Tensor(enhanced)
    start = d_optimum_loss(s.D, batch, enhanced)
    for _ in range(150):
        opt.zero_grad()
        loss = d_loss(s.D, clean, fake, noisy)
        assert loss.item() >= 0
        loss.backward()
        opt.step()
    final = d_optimum_loss(s.D, batch, enhanced)
    assert final <= 0.5
    assert final < start


# --------------------------------------------------------------------- train

@pytest.fixture(scope="module")
def full_run(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return train(tiny(corpus, out), figures=False), out


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_metrics_log(full_run):
    result, out = full_run
    rows = read_metrics(result.metrics)
    assert rows[0] == METRICS_HEADER
    assert len(rows) - 1 == 2
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert all(np.isfinite(float(v)) for v in rows[1][2:])
    assert (out / "epoch_001.vsgn").exists() and (out / "epoch_002.vsgn").exists()
    assert (out / "final.vsgn").read_bytes() == (out / "epoch_002.vsgn").read_bytes()
    assert (out / "config.json").exists()


def test_checkpoint_holds_config_verbatim(full_run):
    result, _ = full_run
    meta = load_checkpoint(result.checkpoint).meta
    assert meta["config"]["lambda"] == 100.0
    assert meta["config"]["width_scale"] == 5
    assert meta["epoch"] == 2


def test_full_run_is_deterministic(full_run, corpus, tmp_path):
    result, _ = full_run
    again = train(tiny(corpus, tmp_path), figures=False)
    assert read_metrics(again.metrics) == read_metrics(result.metrics)


def test_resume_reproduces_next_epoch(full_run, corpus, tmp_path):
    result, out = full_run
    resumed = train(tiny(corpus, tmp_path), resume=out / "epoch_001.vsgn", figures=False)
    # a fresh output directory has no earlier rows, so the log holds epoch 2 only
    assert read_metrics(resumed.metrics)[1:] == read_metrics(result.metrics)[2:]
    a, b = load_checkpoint(resumed.checkpoint), load_checkpoint(result.checkpoint)
    assert a.arrays.keys() == b.arrays.keys()
    for k in a.arrays:
        np.testing.assert_array_equal(a.arrays[k], b.arrays[k])
    assert a.rng_state == b.rng_state


def test_resume_refuses_corrupt_checkpoint(full_run, corpus, tmp_path):
    _, out = full_run
    bad = tmp_path / "bad.vsgn"
    raw = bytearray((out / "epoch_001.vsgn").read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    bad.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        train(tiny(corpus, tmp_path / "r"), resume=bad, figures=False)


def test_nonfinite_batch_aborts_with_index(corpus, tmp_path, monkeypatch):
    original = data_module.SegmentDataset.batch
    calls = {"n": 0}

    def poisoned(self, *args, **kwargs):
        b = original(self, *args, **kwargs)
        calls["n"] += 1
        if calls["n"] == 3:
            b.noisy[0, 0, 0, 0] = np.nan
        return b

    monkeypatch.setattr(data_module.SegmentDataset, "batch", poisoned)
    with pytest.raises(TrainingAborted, match="batch 2"):
        train(tiny(corpus, tmp_path, epochs=1, val_limit=0), figures=False)
    dumps = list(tmp_path.glob("nonfinite_*.npz"))
    assert [p.name for p in dumps] == ["nonfinite_epoch001_batch00002.npz"]
    assert np.isnan(np.load(dumps[0])["noisy"]).any()


def test_config_validation():
    defaults = TrainConfig()
    assert (defaults.lr, defaults.epochs, defaults.batch_size, defaults.lam) == (1e-4, 70, 8, 100.0)
    assert (defaults.aug_low_db, defaults.aug_high_db) == (-15.0, 0.0)
    with pytest.raises(ContractViolation, match="lambda"):
        TrainConfig.from_dict({"lambda": -1})
    with pytest.raises(ContractViolation, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 1e-3})
    for bad in ({"lr": 0}, {"epochs": 0}, {"batch_size": -2}, {"precision": "float16"}):
        with pytest.raises(ContractViolation):
            TrainConfig.from_dict(bad)
    assert TrainConfig.from_dict(defaults.to_dict()) == defaults


# ------------------------------------------------------------------- enhance

def test_enhance_untrained_model(corpus, tmp_path):
    config = TrainConfig(width_scale=5)
    Session.fresh(config, dsp.NormStats(-12.0, 2.0)).save(tmp_path / "init.vsgn")
    manifest = read_manifest(corpus["test"])
    utt = load_row(manifest["rows"][0], manifest["_root"])
    noisy = dsp.mix_at_snr(utt.clean, utt.noise, 0.0)
    # 1.1 s of audio and 27 frames: truncated to five whole segments
    extra = np.concatenate([noisy.samples, noisy.samples[:1600]])
    frames = np.concatenate([utt.frames, utt.frames[:2]])
    out = enhance(tmp_path / "init.vsgn", extra, frames)
    assert len(out) == 5 * dsp.SEGMENT_SAMPLES
    assert np.all(np.isfinite(out.samples))
    io.write_wav(tmp_path / "out.wav", out)
    assert len(io.read_wav(tmp_path / "out.wav")) == 16000


def test_enhance_rejects_length_mismatch(corpus, tmp_path):
    Session.fresh(TrainConfig(width_scale=5), dsp.NormStats(-12.0, 2.0)).save(tmp_path / "init.vsgn")
    manifest = read_manifest(corpus["test"])
    utt = load_row(manifest["rows"][0], manifest["_root"])
    with pytest.raises(ContractViolation, match="frames"):
        enhance(tmp_path / "init.vsgn", utt.clean, utt.frames[:15])
    with pytest.raises(ContractViolation):
        enhance(tmp_path / "init.vsgn", utt.clean[:1000], utt.frames[:1])
