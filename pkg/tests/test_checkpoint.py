import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vsegan import dsp
from vsegan.checkpoint import Checkpoint, decode, encode, load_checkpoint, save_checkpoint
from vsegan.errors import ContractViolation, IntegrityError
from vsegan.trainer import Session, TrainConfig, load_session


@pytest.fixture(scope="module")
def session():
    return Session.fresh(TrainConfig(width_scale=5, seed=3), dsp.NormStats(-11.0, 1.5))


def test_layout_header_and_trailer(tmp_path):
    ckpt = Checkpoint({"a": 1}, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"s": 2})
    raw = encode(ckpt)
    magic, version, length = struct.unpack_from("<4sIQ", raw)
    assert (magic, version) == (b"VSGN", 1)
    assert len(raw) == 16 + length + 4
    assert struct.unpack_from("<I", raw, len(raw) - 4)[0] == zlib.crc32(raw[:-4])
    # first payload block is the length-prefixed JSON metadata
    (n,) = struct.unpack_from("<I", raw, 16)
    assert raw[20:20 + n] == b'{"a":1}'


def test_session_round_trip_is_byte_identical(session, tmp_path):
    session.save(tmp_path / "a.vsgn")
    load_session(tmp_path / "a.vsgn").save(tmp_path / "b.vsgn")
    assert (tmp_path / "a.vsgn").read_bytes() == (tmp_path / "b.vsgn").read_bytes()


def test_loaded_session_matches(session, tmp_path):
    session.save(tmp_path / "a.vsgn")
    loaded = load_session(tmp_path / "a.vsgn")
    assert loaded.config == session.config
    assert loaded.stats == session.stats
    for name, value in session.G.state_arrays().items():
        np.testing.assert_array_equal(loaded.G.state_arrays()[name], value)
    assert loaded.rng.bit_generator.state == session.rng.bit_generator.state


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(
    st.text("abcdefgh./", min_size=1, max_size=12),
    hnp.arrays(st.sampled_from([np.float32, np.float64, np.int64, np.uint8]),
               hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)),
    max_size=5))
def test_encode_decode_round_trip(arrays):
    ckpt = Checkpoint({"k": [1, 2]}, arrays, {"state": 7})
    back = decode(encode(ckpt))
    assert back.meta == ckpt.meta and back.rng_state == ckpt.rng_state
    assert back.arrays.keys() == arrays.keys()
    for k, v in arrays.items():
        assert back.arrays[k].dtype == v.dtype
        np.testing.assert_array_equal(back.arrays[k], v)
    assert encode(back) == encode(ckpt)


def test_flipped_byte_fails_checksum(session, tmp_path):
    raw = bytearray(encode(session.to_checkpoint()))
    for pos in (20, len(raw) // 2, len(raw) - 10):
        bad = bytearray(raw)
        bad[pos] ^= 0x01
        with pytest.raises(IntegrityError, match="CRC"):
            decode(bytes(bad))


def test_truncation_rejected(session):
    raw = encode(session.to_checkpoint())
    for cut in (3, 16, len(raw) // 2, len(raw) - 1):
        with pytest.raises(IntegrityError):
            decode(raw[:cut])


def test_bad_magic_and_version(session):
    raw = bytearray(encode(session.to_checkpoint()))
    with pytest.raises(IntegrityError, match="magic"):
        decode(b"XXXX" + bytes(raw[4:]))
    raw[4:8] = struct.pack("<I", 2)
    with pytest.raises(IntegrityError, match="version"):
        decode(bytes(raw))


def test_missing_file(tmp_path):
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "nope.vsgn")


def test_width_mismatch_names_parameter(session, tmp_path):
    session.save(tmp_path / "a.vsgn")
    with pytest.raises(ContractViolation, match=r"parameter \S+ has shape"):
        load_session(tmp_path / "a.vsgn", TrainConfig(width_scale=4))


def test_save_is_atomic(session, tmp_path):
    path = save_checkpoint(tmp_path / "x.vsgn", session.to_checkpoint())
    assert [p.name for p in tmp_path.iterdir()] == ["x.vsgn"]
    assert load_checkpoint(path).meta["config"]["seed"] == 3
