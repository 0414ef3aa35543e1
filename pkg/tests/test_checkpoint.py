import struct

import numpy as np
import pytest

from simpa.checkpoint import (
    MAGIC,
    VERSION,
    CheckpointError,
    decode_checkpoint,
    describe,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from simpa.environments import sample_regression_task
from simpa.maml import MamlConfig, maml_train
from simpa.meta import MetaState, TrainConfig, init_state, train
from simpa.networks import Architecture, MlpSpec

ARCH = Architecture.build(1, 1, 3, (4,), (5,), (6,), (4,))
CFG = TrainConfig(T=2, K=2, L_t=4, L_v=4, L_D=8, eta=2, iterations=20, seed=1)
SAMPLER = lambda s: sample_regression_task(s)


def assert_same_state(a, b):
    assert type(a) is type(b) and a.iteration == b.iteration
    aa, bb = a.arrays(), b.arrays()
    assert list(aa) == list(bb)
    for k in aa:
        assert aa[k].dtype == bb[k].dtype and aa[k].shape == bb[k].shape
        assert aa[k].tobytes() == bb[k].tobytes(), k
    if isinstance(a, MetaState):
        assert (a.adam_psi.t, a.adam_enc.t, a.adam_omega.t) == (b.adam_psi.t, b.adam_enc.t, b.adam_omega.t)
    else:
        assert a.adam.t == b.adam.t


def test_fresh_state_round_trip_bit_exact(tmp_path):
    state = init_state(ARCH, 0)
    path = tmp_path / "c.bin"
    save_checkpoint(path, state, {"name": "x"})
    back, config, header = load_checkpoint(path)
    assert_same_state(state, back)
    assert config == {"name": "x"} and header["kind"] == "simpa"
    assert path.read_bytes()[:8] == MAGIC
    assert encode_checkpoint(back, config) == path.read_bytes()


def test_special_values_survive():
    state = init_state(ARCH, 0)
    state.psi[:3] = [-0.0, 5e-324, 1.7976931348623157e308]
    back, _, _ = decode_checkpoint(encode_checkpoint(state))
    assert back.psi[:3].tobytes() == state.psi[:3].tobytes()


def test_maml_state_round_trip():
    spec = MlpSpec((1, 8, 1))
    state, _ = maml_train(spec, MamlConfig(iterations=3), SAMPLER)
    back, _, header = decode_checkpoint(encode_checkpoint(state))
    assert header["kind"] == "maml"
    assert_same_state(state, back)


def test_corrupted_header_byte_gives_versioned_error():
    data = bytearray(encode_checkpoint(init_state(ARCH, 0), {"name": "x"}))
    for offset in (16, 20, 40):
        bad = bytearray(data)
        bad[offset] ^= 0xFF
        with pytest.raises(CheckpointError, match=f"version {VERSION}"):
            decode_checkpoint(bytes(bad))


def test_version_mismatch():
    data = bytearray(encode_checkpoint(init_state(ARCH, 0)))
    data[8:12] = struct.pack("<I", VERSION + 1)
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(bytes(data))


def test_bad_magic_and_truncation():
    data = encode_checkpoint(init_state(ARCH, 0))
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"NOTACKPT" + data[8:])
    for cut in (0, 10, 20, len(data) // 2, len(data) - 1):
        with pytest.raises(CheckpointError):
            decode_checkpoint(data[:cut])
    with pytest.raises(CheckpointError):
        decode_checkpoint(data + b"\0")


def test_payload_corruption_detected():
    data = bytearray(encode_checkpoint(init_state(ARCH, 0)))
    data[-100] ^= 0x01
    with pytest.raises(CheckpointError, match="checksum"):
        decode_checkpoint(bytes(data))


def test_failed_save_leaves_previous_file(tmp_path, monkeypatch):
    path = tmp_path / "c.bin"
    save_checkpoint(path, init_state(ARCH, 0))
    before = path.read_bytes()

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr("simpa.checkpoint.os.replace", boom)
    with pytest.raises(OSError):
        save_checkpoint(path, init_state(ARCH, 1))
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["c.bin"]


def test_trained_state_round_trips_and_continues_deterministically(tmp_path):
    mid, _ = train(ARCH, CFG, SAMPLER, iterations=10)
    save_checkpoint(tmp_path / "mid.bin", mid)
    resumed, _, _ = load_checkpoint(tmp_path / "mid.bin")
    assert_same_state(mid, resumed)
    a, ra = train(ARCH, CFG, SAMPLER, state=resumed, iterations=20)
    b, rb = train(ARCH, CFG, SAMPLER, iterations=20)
    assert_same_state(a, b)
    assert [r.to_json() for r in ra] == [r.to_json() for r in rb[10:]]


def test_describe(tmp_path):
    path = tmp_path / "c.bin"
    state = init_state(ARCH, 0)
    save_checkpoint(path, state, {"name": "demo"})
    d = describe(path)
    assert d["kind"] == "simpa" and d["iteration"] == 0 and d["config_name"] == "demo"
    assert d["n_params"] == state.psi.size + state.enc.size + state.omega0.size
    assert d["blocks"]["psi"] == [ARCH.generator.n_params]


def test_unknown_state_type_rejected():
    with pytest.raises(TypeError):
        encode_checkpoint(np.zeros(3))
