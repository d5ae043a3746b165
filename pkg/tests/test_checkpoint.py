import os
import struct

import pytest
import torch

from swimvg.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    ConfigMismatch,
    CorruptFile,
    VersionMismatch,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from swimvg.config import profile
from swimvg.model import SwimVG
from swimvg.trainer import collate, evaluate, init_state, train_step

from conftest import tensor_digest


@pytest.fixture
def trained(small_split, toy_cfg):
    model = SwimVG(toy_cfg)
    state = init_state(model, toy_cfg)
    for i in range(3):
        train_step(model, collate(small_split["train"][8 * i:8 * i + 8]), state)
    state.best_eval = 0.25
    return model, state


def test_round_trip_is_bit_exact(tmp_path, trained, small_split):
    model, state = trained
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(model, state, path)
    m2, s2 = load_checkpoint(path)
    assert m2.cfg == model.cfg
    assert tensor_digest(model.parameters()) == tensor_digest(m2.parameters())
    assert (s2.step, s2.best_eval) == (3, 0.25)
    assert torch.equal(s2.generator.get_state(), state.generator.get_state())
    for (n, p), (_, q) in zip(model.named_parameters(), m2.named_parameters()):
        if p.requires_grad:
            a, b = state.optimizer.state[p], s2.optimizer.state[q]
            assert set(a) == set(b)
            assert all(torch.equal(a[k], b[k]) for k in a)
    assert evaluate(model, small_split["eval"]).to_json() == evaluate(m2, small_split["eval"]).to_json()
    # continued training stays in lock-step
    batch = collate(small_split["train"][40:48])
    assert train_step(model, batch, state) == train_step(m2, batch, s2)


def test_encoding_is_deterministic(trained):
    model, state = trained
    assert encode_checkpoint(model, state) == encode_checkpoint(model, state)


def test_layout_header(trained):
    data = encode_checkpoint(*trained)
    assert data[:8] == MAGIC
    assert struct.unpack_from("<I", data, 8)[0] == FORMAT_VERSION
    cfg, meta, arrays = decode_checkpoint(data)
    assert cfg == trained[0].cfg.to_dict()
    assert meta["step"] == 3
    assert "param/vision.reg" in arrays and "rng/torch" in arrays
    assert not any(k.startswith("optim/text.layers") for k in arrays)


def test_truncated_file(tmp_path, trained):
    path = tmp_path / "m.ckpt"
    save_checkpoint(*trained, str(path))
    data = path.read_bytes()
    for cut in (len(data) // 2, 20, 5):
        path.write_bytes(data[:cut])
        with pytest.raises(CorruptFile):
            load_checkpoint(str(path))


def test_flipped_byte(tmp_path, trained):
    path = tmp_path / "m.ckpt"
    save_checkpoint(*trained, str(path))
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptFile):
        load_checkpoint(str(path))


def test_version_and_config_mismatch(tmp_path, trained):
    model, state = trained
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(model, state, path)
    with pytest.raises(VersionMismatch) as exc:
        load_checkpoint(path, expected=model.cfg.replace(swip_enabled=False))
    assert isinstance(exc.value, ConfigMismatch) and exc.value.keys == ["swip_enabled"]
    load_checkpoint(path, expected=model.cfg)

    import hashlib
    data = bytearray(encode_checkpoint(model, state))
    struct.pack_into("<I", data, 8, FORMAT_VERSION + 1)
    body = bytes(data[:-32])
    with pytest.raises(VersionMismatch):
        decode_checkpoint(body + hashlib.sha256(body).digest())


def test_model_only_checkpoint(tmp_path, toy_cfg):
    model = SwimVG(toy_cfg)
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(model, None, path)
    m2, state = load_checkpoint(path)
    assert state is None
    assert tensor_digest(model.parameters()) == tensor_digest(m2.parameters())


def test_atomic_write_leaves_no_temp(tmp_path, trained):
    save_checkpoint(*trained, str(tmp_path / "a.ckpt"))
    save_checkpoint(*trained, str(tmp_path / "a.ckpt"))
    assert os.listdir(tmp_path) == ["a.ckpt"]


def test_float64_model_round_trip(tmp_path):
    cfg = profile("toy", dtype="float64")
    model = SwimVG(cfg)
    save_checkpoint(model, None, str(tmp_path / "d.ckpt"))
    m2, _ = load_checkpoint(str(tmp_path / "d.ckpt"))
    assert m2.head.fc1.weight.dtype == torch.float64
    assert tensor_digest(model.parameters()) == tensor_digest(m2.parameters())
