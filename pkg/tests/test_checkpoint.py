import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from wisernet.autodiff import load_checkpoint, save_checkpoint
from wisernet.exceptions import LoadError


def test_roundtrip_preserves_order_meta_and_values(tmp_path):
    rng = np.random.default_rng(0)
    tensors = [("b.weight", rng.standard_normal((2, 3, 3, 3))), ("a.bias", rng.standard_normal(4))]
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tensors, {"depth": 4, "name": "x y"})
    meta, loaded = load_checkpoint(path)
    assert meta == {"depth": "4", "name": "x y"}
    assert list(loaded) == ["b.weight", "a.bias"]
    for name, arr in tensors:
        np.testing.assert_array_equal(loaded[name], arr.astype(np.float32))
        assert loaded[name].dtype == np.float32


def test_layout_is_little_endian_float32(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, [("w", np.array([1.5, -2.0]))], {"k": "v"})
    raw = path.read_bytes()
    assert raw[:8] == b"WSDGCKPT"
    version, meta_len = struct.unpack_from("<II", raw, 8)
    assert version == 1 and raw[16 : 16 + meta_len] == b"k=v"
    assert raw[-8:] == np.array([1.5, -2.0], dtype="<f4").tobytes()


def test_rejects_bad_magic_truncation_and_trailing_bytes(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, [("w", np.ones((3, 3)))])
    raw = path.read_bytes()
    for bad in (b"NOTACKPT" + raw[8:], raw[:-5], raw + b"\0"):
        path.write_bytes(bad)
        with pytest.raises(LoadError):
            load_checkpoint(path)
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_meta_with_newline_is_refused(tmp_path):
    with pytest.raises(ValueError):
        save_checkpoint(tmp_path / "m.ckpt", [], {"k": "a\nb"})


@settings(max_examples=30, deadline=None)
@given(arr=hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5),
                      elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_property(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("ck") / "x.ckpt"
    save_checkpoint(path, [("t", arr)])
    _, loaded = load_checkpoint(path)
    assert loaded["t"].tobytes() == arr.tobytes()
