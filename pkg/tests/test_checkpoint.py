import io
import re
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssdca.checkpoint import (
    MAGIC,
    ArchiveFormatError,
    CheckpointMismatchError,
    load_checkpoint,
    parameter_checksum,
    read_archive,
    save_checkpoint,
    translate_public_names,
    write_archive,
)
from ssdca.config import ModelConfig, toy_profile
from ssdca.fusion import build_model
from ssdca.swin import SwinEncoder, init_weights


def _roundtrip(tensors):
    buf = io.BytesIO()
    write_archive(tensors, buf)
    return read_archive(buf.getvalue()), buf.getvalue()


def test_layout_by_hand():
    _, raw = _roundtrip({"w": np.array([1.5, -2.0], dtype=np.float32)})
    expected = (
        MAGIC
        + struct.pack("<BQ", 1, 1)
        + struct.pack("<I", 1) + b"w"
        + struct.pack("<B", 3) + b"f32"
        + struct.pack("<B", 1) + struct.pack("<Q", 2)
        + np.array([1.5, -2.0], dtype="<f4").tobytes()
    )
    assert raw == expected


@settings(max_examples=50, deadline=None)
@given(
    st.dictionaries(
        st.text(min_size=1, max_size=12),
        st.one_of(
            arrays(np.float32, st.lists(st.integers(0, 4), max_size=3).map(tuple)),
            arrays(np.float64, st.lists(st.integers(0, 4), max_size=3).map(tuple)),
        ),
        max_size=5,
    )
)
def test_roundtrip_property(tensors):
    back, _ = _roundtrip(tensors)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and back[k].shape == tensors[k].shape
        assert np.array_equal(back[k], tensors[k], equal_nan=True)


def test_truncated_and_corrupt():
    _, raw = _roundtrip({"a": np.ones((3, 4), np.float32), "b": np.zeros(2, np.float64)})
    for cut in (3, 12, 20, len(raw) - 1):
        with pytest.raises(ArchiveFormatError):
            read_archive(raw[:cut])
    with pytest.raises(ArchiveFormatError, match="magic"):
        read_archive(b"NOTATNS!" + raw[8:])
    with pytest.raises(ArchiveFormatError, match="trailing"):
        read_archive(raw + b"\x00")
    bad_tag = raw.replace(b"f32", b"i32", 1)
    with pytest.raises(ArchiveFormatError, match="dtype"):
        read_archive(bad_tag)


def test_model_roundtrip_and_checksum(tmp_path):
    model = build_model(ModelConfig(encoder=toy_profile()), seed=3)
    path = tmp_path / "m.tns"
    save_checkpoint(model, path)
    other = build_model(ModelConfig(encoder=toy_profile()), seed=4)
    assert parameter_checksum(other) != parameter_checksum(model)
    rep = load_checkpoint(path, other)
    assert not rep.missing and not rep.unexpected
    assert parameter_checksum(other) == parameter_checksum(model)


def test_seeded_init_reproducible():
    a = init_weights(SwinEncoder(toy_profile()), 11)
    b = init_weights(SwinEncoder(toy_profile()), 11)
    c = init_weights(SwinEncoder(toy_profile()), 12)
    assert parameter_checksum(a) == parameter_checksum(b) != parameter_checksum(c)


def test_init_statistics():
    enc = init_weights(SwinEncoder(toy_profile()), 0)
    w = torch.cat([m.weight.detach().flatten() for m in enc.modules() if isinstance(m, torch.nn.Linear)])
    assert abs(float(w.std()) - 0.0176) < 0.002  # std of N(0, 0.02) truncated at +-2 sigma
    assert float(w.abs().max()) <= 0.04
    for m in enc.modules():
        if isinstance(m, torch.nn.Linear) and m.bias is not None:
            assert torch.all(m.bias == 0)
        if isinstance(m, torch.nn.LayerNorm):
            assert torch.all(m.weight == 1) and torch.all(m.bias == 0)


def test_missing_tensor_named():
    enc = SwinEncoder(toy_profile())
    tensors = {k: v.numpy() for k, v in enc.state_dict().items()}
    del tensors["layers.2.blocks.0.mlp.fc1.weight"]
    with pytest.raises(CheckpointMismatchError) as info:
        load_checkpoint(tensors, SwinEncoder(toy_profile()))
    assert "layers.2.blocks.0.mlp.fc1.weight" in str(info.value)
    assert info.value.missing == ["layers.2.blocks.0.mlp.fc1.weight"]
    rep = load_checkpoint(tensors, SwinEncoder(toy_profile()), strict=False)
    assert rep.missing == ["layers.2.blocks.0.mlp.fc1.weight"]


def test_shape_mismatch_lists_expected_and_found():
    a = SwinEncoder(toy_profile())
    tensors = {k: v.numpy() for k, v in a.state_dict().items()}
    tensors["norm.weight"] = np.ones(7, np.float32)
    with pytest.raises(CheckpointMismatchError) as info:
        load_checkpoint(tensors, SwinEncoder(toy_profile()), strict=False)
    msg = str(info.value)
    assert "norm.weight" in msg and "(192,)" in msg and "(7,)" in msg


def test_unexpected_logged_not_dropped(caplog):
    enc = SwinEncoder(toy_profile())
    tensors = {k: v.numpy() for k, v in enc.state_dict().items()}
    tensors["head.weight"] = np.zeros((2, 2), np.float32)
    with caplog.at_level("WARNING"):
        rep = load_checkpoint(tensors, SwinEncoder(toy_profile()))
    assert rep.unexpected == ["head.weight"]
    assert "head.weight" in caplog.text


def test_prefix_selects_encoder(tmp_path):
    model = build_model(ModelConfig(encoder=toy_profile()), seed=1)
    path = tmp_path / "full.tns"
    save_checkpoint(model, path)
    enc = SwinEncoder(toy_profile())
    load_checkpoint(path, enc, prefix="encoder.")
    assert parameter_checksum(enc) == parameter_checksum(model.encoder)


def test_public_name_translation():
    enc = SwinEncoder(toy_profile())
    ours = {k: v.numpy() for k, v in enc.state_dict().items()}
    public = dict(ours)
    public["layers.0.blocks.0.attn.relative_position_index"] = np.zeros((49, 49))
    public["layers.0.blocks.1.attn_mask"] = np.zeros((64, 49, 49))
    public["head.weight"] = np.zeros((1000, 192))
    public["head.bias"] = np.zeros(1000)
    out = translate_public_names(public)
    assert set(out) == {f"encoder.{k}" for k in ours}
    load_checkpoint(out, SwinEncoder(toy_profile()), prefix="encoder.")

    # timm keeps patch merging at the start of the following stage
    timm = {re.sub(r"^layers\.(\d)\.downsample", lambda m: f"layers.{int(m[1]) + 1}.downsample", k): v
            for k, v in ours.items()}
    assert "layers.1.downsample.reduction.weight" in timm and "layers.0.downsample.norm.weight" not in timm
    assert set(translate_public_names(timm, layout="timm")) == {f"encoder.{k}" for k in ours}
    with pytest.raises(ValueError):
        translate_public_names(ours, layout="other")
