import struct

import numpy as np
import pytest

from weakqa.checkpoint import (CHECKPOINT_VERSION, Checkpoint, CheckpointError, load_checkpoint,
                               save_checkpoint)
from weakqa.encoder import init_encoder, init_opt_state
from weakqa.reader import init_reader


@pytest.fixture
def cp(toy_vocab, rng):
    enc = init_encoder(len(toy_vocab), 4, rng, scale=1.0)
    rd = init_reader(len(toy_vocab), 4, rng)
    eopt, ropt = init_opt_state(enc, 1e-3), init_opt_state(rd, 1e-2)
    eopt.step = 7
    for k in eopt.m:
        eopt.m[k] = rng.normal(size=eopt.m[k].shape)
    return Checkpoint(toy_vocab, enc, eopt, rd, ropt, {"dim": 4}, rng.bit_generator.state,
                      iteration=3, params_version=5, stats=[{"iteration": 0}])


def test_round_trip_is_bitwise(tmp_path, cp):
    save_checkpoint(tmp_path / "c.ckpt", cp)
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.vocab.tokens == cp.vocab.tokens
    for a, b in ((back.encoder, cp.encoder), (back.reader, cp.reader)):
        for k, v in a.blocks().items():
            assert v.dtype == b.blocks()[k].dtype and v.tobytes() == b.blocks()[k].tobytes()
    for k in cp.encoder_opt.m:
        assert np.array_equal(back.encoder_opt.m[k], cp.encoder_opt.m[k])
    assert back.encoder_opt.step == 7 and back.reader_opt.lr == 1e-2
    assert (back.iteration, back.params_version, back.config, back.stats) == (3, 5, {"dim": 4}, [{"iteration": 0}])
    r1, r2 = np.random.default_rng(), np.random.default_rng()
    r1.bit_generator.state, r2.bit_generator.state = cp.rng_state, back.rng_state
    assert r1.random() == r2.random()


def test_encoder_only_checkpoint(tmp_path, cp):
    cp.reader = cp.reader_opt = None
    save_checkpoint(tmp_path / "e.ckpt", cp)
    assert load_checkpoint(tmp_path / "e.ckpt").reader is None


def test_truncated_and_corrupt(tmp_path, cp):
    save_checkpoint(tmp_path / "c.ckpt", cp)
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-100])
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "t.ckpt")
    flipped = bytearray(raw)
    flipped[-5] ^= 0xFF
    (tmp_path / "f.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "f.ckpt")
    (tmp_path / "h.ckpt").write_bytes(raw[:10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "h.ckpt")


def test_wrong_magic_and_version(tmp_path, cp):
    save_checkpoint(tmp_path / "c.ckpt", cp)
    raw = bytearray((tmp_path / "c.ckpt").read_bytes())
    (tmp_path / "m.ckpt").write_bytes(b"NOPE" + bytes(raw[4:]))
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "m.ckpt")
    struct.pack_into("<I", raw, 4, CHECKPOINT_VERSION + 1)
    (tmp_path / "v.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")


def test_save_leaves_no_temp_files(tmp_path, cp):
    save_checkpoint(tmp_path / "c.ckpt", cp)
    save_checkpoint(tmp_path / "c.ckpt", cp)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["c.ckpt"]
