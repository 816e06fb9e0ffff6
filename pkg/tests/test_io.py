import filecmp
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from eseg import graph as G
from eseg.errors import FormatError
from eseg.io import (HEADER_SIZE, MAGIC, SyntheticDatasetSpec, decode_tensor, encode_tensor, gen_synthetic,
                     load_checkpoint, load_dataset, load_model_checkpoint, load_tensor, pad_to_multiple,
                     read_pgm, read_ppm, render_scene, save_checkpoint, save_model_checkpoint, save_tensor,
                     write_pgm, write_ppm)
from eseg.model import build_model, desk_config


def test_unit_tensor_layout():
    buf = encode_tensor(np.ones((1, 1, 1, 1), np.float32))
    assert HEADER_SIZE == 23
    assert len(buf) == HEADER_SIZE + 4
    assert buf[:5] == MAGIC
    assert buf[5] == 1 and buf[6] == 4
    assert struct.unpack_from("<4I", buf, 7) == (1, 1, 1, 1)
    assert struct.unpack_from("<f", buf, HEADER_SIZE) == (1.0,)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(min_dims=4, max_dims=4, max_side=4)))
def test_tensor_roundtrip_is_bitwise(a):
    b, end = decode_tensor(encode_tensor(a))
    assert end == HEADER_SIZE + a.nbytes
    assert b.dtype == a.dtype and b.shape == a.shape
    assert b.tobytes() == a.tobytes()


def test_tensor_file_roundtrip_and_errors(tmp_path):
    a = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
    p = tmp_path / "t.bin"
    save_tensor(p, a)
    assert np.array_equal(load_tensor(p), a)
    buf = p.read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XSEG1" + buf[5:])
    with pytest.raises(FormatError, match="magic"):
        load_tensor(bad)
    bad.write_bytes(buf[:-1])
    with pytest.raises(FormatError, match="truncated"):
        load_tensor(bad)
    bad.write_bytes(buf[:10])
    with pytest.raises(FormatError, match="truncated"):
        load_tensor(bad)
    bad.write_bytes(buf + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_tensor(bad)


def test_encode_rejects_bad_input():
    with pytest.raises(FormatError, match="overflow"):
        encode_tensor(np.empty((0, 2 ** 32, 1, 1), np.float32))
    with pytest.raises(FormatError):
        encode_tensor(np.zeros((2, 2), np.float32))
    with pytest.raises(FormatError):
        encode_tensor(np.zeros((1, 1, 1, 1), np.int32))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.standard_normal((3,)), "b/c": rng.standard_normal((2, 3, 4, 5)).astype(np.float32)}
    save_checkpoint(tmp_path / "c.ck", tensors, {"step": 7}, {"note": "x"})
    ck = load_checkpoint(tmp_path / "c.ck")
    assert ck.state == {"step": 7} and ck.extra == {"note": "x"}
    for k, v in tensors.items():
        assert ck.tensors[k].dtype == v.dtype and np.array_equal(ck.tensors[k], v)
    (tmp_path / "bad.ck").write_bytes(b"nonsense")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ck")


def test_model_checkpoint_restores_outputs(tmp_path):
    g = build_model(desk_config(), "random", 5)
    save_model_checkpoint(tmp_path / "m.ck", g, state={"step": 3})
    h, state = load_model_checkpoint(tmp_path / "m.ck")
    assert state == {"step": 3}
    x = np.random.default_rng(0).uniform(size=(1, 3, 64, 64)).astype(np.float32)
    assert np.array_equal(G.forward(g, x)["logits"], G.forward(h, x)["logits"])


def test_netpbm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    lab = rng.integers(0, 256, (5, 7)).astype(np.uint8)
    img = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
    write_pgm(tmp_path / "l.pgm", lab)
    write_ppm(tmp_path / "i.ppm", img)
    assert np.array_equal(read_pgm(tmp_path / "l.pgm"), lab)
    assert np.array_equal(read_ppm(tmp_path / "i.ppm"), img)
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "l.pgm")


def test_pad_to_multiple():
    x = np.ones((3, 30, 64))
    p, hw = pad_to_multiple(x, 16)
    assert p.shape == (3, 32, 64) and hw == (30, 64)
    assert p[:, 30:].sum() == 0
    same, _ = pad_to_multiple(x[:, :16], 16)
    assert same.shape == (3, 16, 64)


def test_gen_synthetic_empty_and_deterministic(tmp_path):
    mf = gen_synthetic(SyntheticDatasetSpec(count=0), tmp_path / "e")
    assert mf["items"] == []
    assert load_dataset(tmp_path / "e")[0] == []
    spec = SyntheticDatasetSpec(height=32, width=48, count=3, seed=9)
    gen_synthetic(spec, tmp_path / "a")
    gen_synthetic(spec, tmp_path / "b")
    for rel in ["manifest.json", "images/00001.ppm", "labels/00002.pgm"]:
        assert filecmp.cmp(tmp_path / "a" / rel, tmp_path / "b" / rel, shallow=False)
    ids, images, labels = load_dataset(tmp_path / "a")
    assert ids == ["00000", "00001", "00002"]
    assert images.shape == (3, 3, 32, 48) and labels.shape == (3, 32, 48)
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["spec"]["seed"] == 9


def test_scenes_show_every_class():
    spec = SyntheticDatasetSpec()
    for i in range(20):
        _, lab = render_scene(spec, i)
        assert set(np.unique(lab)) == set(range(spec.num_classes))
