import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from docprune.ctp import CTPDecision, Criterion
from docprune.errors import BadMagicError, CorruptDataError, GeometryError, UnsupportedFormatError
from docprune.masks import Stage, TokenMask
from docprune.synthgen import gen_trace
from docprune.traceio import (
    decision_to_dict,
    decode_blob,
    encode_blob,
    load_manifest,
    mask_from_dict,
    read_blob,
    read_mask,
    write_blob,
    write_mask,
    write_trace,
)


def test_hand_built_28_byte_blob(tmp_path):
    raw = b"DPLT" + struct.pack("<I", 1) + struct.pack("<I", 1) + struct.pack("<I", 1) + struct.pack("<Q", 4) + struct.pack("<f", 1.0)
    assert len(raw) == 28
    p = tmp_path / "one.dplt"
    p.write_bytes(raw)
    b = read_blob(p, "DPLT")
    assert b.dims == (1,) and b.data.tolist() == [1.0] and b.magic == "DPLT"
    assert encode_blob("DPLT", np.array([1.0], dtype=np.float32)) == raw


def test_embedding_roundtrip(tmp_path, rng):
    x = rng.standard_normal((2, 3)).astype(np.float32)
    p = tmp_path / "e.dpem"
    write_blob(p, "DPEM", x)
    got = read_blob(p, "DPEM").data
    assert got.dtype == np.float32 and got.tobytes() == x.tobytes()


def test_bad_magic_and_corruption(tmp_path):
    raw = encode_blob("DPEM", np.zeros((2, 2), np.float32))
    with pytest.raises(BadMagicError):
        decode_blob(raw, "DPAT")
    with pytest.raises(BadMagicError):
        decode_blob(b"XXXX" + raw[4:])
    with pytest.raises(CorruptDataError):
        decode_blob(raw[:-1])
    with pytest.raises(CorruptDataError):
        decode_blob(raw + b"\x00")
    with pytest.raises(CorruptDataError):
        decode_blob(raw[:10])
    with pytest.raises(UnsupportedFormatError):
        decode_blob(raw[:4] + struct.pack("<I", 2) + raw[8:])
    # huge declared dims must fail on the size cross-check, not on allocation
    huge = b"DPEM" + struct.pack("<III", 1, 2, 2**31) + struct.pack("<I", 2**31) + struct.pack("<Q", 2**64 - 4) + b"\x00" * 4
    with pytest.raises(CorruptDataError):
        decode_blob(huge)


def test_non_finite_rejected_at_write(tmp_path):
    for bad in (np.nan, np.inf):
        with pytest.raises(ValueError):
            encode_blob("DPLT", np.array([1.0, bad], dtype=np.float32))
    with pytest.raises(ValueError):
        write_blob(tmp_path / "x.dplt", "DPLT", np.array([np.nan], np.float32))
    assert not (tmp_path / "x.dplt").exists()
    assert list(tmp_path.iterdir()) == []


@settings(max_examples=60)
@given(arrays(np.float32, st.tuples(st.integers(0, 5), st.integers(0, 5)), elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_blob_roundtrip_bit_exact(x):
    got = decode_blob(encode_blob("DPRM", x), "DPRM").data
    assert got.shape == x.shape and got.tobytes() == x.tobytes()


def test_mask_roundtrip_examples(tmp_path, rng):
    for m in (TokenMask.full(3, 4, Stage.BTP, value=False), TokenMask.full(3, 4, Stage.QTP), TokenMask.from_array(rng.random((5, 7)) < 0.5, Stage.COMBINED)):
        p = tmp_path / "m.json"
        write_mask(p, m, patch_size=28)
        back = read_mask(p)
        assert back == m
        obj = json.loads(p.read_text())
        assert obj["kept"] == sorted(obj["kept"]) and obj["patch_size"] == 28


@pytest.mark.parametrize("kept", [[1, 1], [12], [-1], [True]])
def test_mask_bad_indices(kept):
    with pytest.raises(GeometryError):
        mask_from_dict({"schema_version": 1, "stage": "BTP", "rows": 3, "cols": 4, "patch_size": 28, "kept": kept})


def test_mask_bad_schema():
    with pytest.raises(UnsupportedFormatError):
        mask_from_dict({"schema_version": 2, "stage": "BTP", "rows": 1, "cols": 1, "kept": []})
    with pytest.raises(CorruptDataError):
        mask_from_dict({"schema_version": 1, "stage": "nope", "rows": 1, "cols": 1, "kept": []})


def test_manifest_roundtrip(tmp_path):
    t = gen_trace(2, 4, 1, 6, [2], seed=3, visual_start=5)
    path = write_trace(tmp_path, t, grid=(2, 3))
    manifest, back = load_manifest(path)
    assert back.last_token_hidden.shape == (2, 4) and manifest.grid == (2, 3)
    assert back.visual_range == (5, 11)
    assert back.attention.tobytes() == t.attention.tobytes()
    assert back.logits.tobytes() == t.logits.tobytes()
    assert back.last_token_hidden.tobytes() == t.last_token_hidden.tobytes()


def test_manifest_missing_attention_file(tmp_path):
    path = write_trace(tmp_path, gen_trace(2, 4, 1, 6, [2]), grid=(2, 3))
    (tmp_path / "trace.attention.dpat").unlink()
    with pytest.raises(FileNotFoundError):
        load_manifest(path)


def _edit(path, **changes):
    obj = json.loads(path.read_text())
    obj.update(changes)
    path.write_text(json.dumps(obj))


def test_manifest_geometry_errors(tmp_path):
    path = write_trace(tmp_path, gen_trace(2, 4, 1, 6, [2]), grid=(2, 3))
    _edit(path, visual_range=[1, 7], grid={"rows": 2, "cols": 3})
    with pytest.raises(GeometryError):
        load_manifest(path)
    _edit(path, visual_range=[0, 6], grid={"rows": 2, "cols": 2})
    with pytest.raises(GeometryError):
        load_manifest(path)
    _edit(path, grid={"rows": 2, "cols": 3}, hidden_dim=5)
    with pytest.raises(GeometryError):
        load_manifest(path)
    _edit(path, hidden_dim=4, schema_version=9)
    with pytest.raises(UnsupportedFormatError):
        load_manifest(path)
    _edit(path, schema_version=1, norm_point="mid")
    with pytest.raises(CorruptDataError):
        load_manifest(path)


def test_manifest_wrong_blob_kind(tmp_path):
    path = write_trace(tmp_path, gen_trace(2, 4, 1, 6, [2]), grid=(2, 3))
    obj = json.loads(path.read_text())
    obj["files"]["hidden"] = obj["files"]["logits"]
    path.write_text(json.dumps(obj))
    with pytest.raises(BadMagicError):
        load_manifest(path)


def test_decision_dict():
    mask = TokenMask.from_array(np.array([True, False, True, False]), Stage.CTP)
    d = decision_to_dict(CTPDecision(Criterion.L2_NORM, None, mask, 28))
    assert d["l_star"] == "no_prune" and d["drop_rate_progressive"] == 0.0
    d = decision_to_dict(CTPDecision(Criterion.L2_NORM, 0, mask, 28))
    assert d["l_star"] == 0 and d["kept"] == 2 and d["kept_indices"] == [0, 2]
    assert d["drop_rate_progressive"] == 0.5
