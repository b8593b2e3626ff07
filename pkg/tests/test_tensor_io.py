import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rgbtfuse.autodiff import Tensor
from rgbtfuse.tensor_io import MAGIC, ParseError, decode_array, encode_array, load_tensor, save_tensor


def test_header_layout():
    buf = encode_array(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == MAGIC
    assert struct.unpack_from("<II", buf, 4) == (1, 2)
    assert struct.unpack_from("<2Q", buf, 12) == (1, 3)
    assert struct.unpack_from("<3d", buf, 28) == (1.0, 2.0, 3.0)
    assert len(buf) == 28 + 24


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4), elements=st.floats(allow_nan=False)))
def test_round_trip_is_bit_exact(arr):
    out, end = decode_array(encode_array(arr))
    assert end == len(encode_array(arr))
    assert out.shape == arr.shape
    assert out.tobytes() == np.asarray(arr, order="C").tobytes()


def test_file_round_trip(tmp_path, rng):
    t = Tensor(rng.normal(size=(3, 2)))
    save_tensor(tmp_path / "t.tnsr", t)
    assert np.array_equal(load_tensor(tmp_path / "t.tnsr").data, t.data)


@pytest.mark.parametrize("cut", [3, 10, 20, 30])
def test_truncation_reports_offset(cut):
    buf = encode_array(np.ones((2, 2)))[:cut]
    with pytest.raises(ParseError) as exc:
        decode_array(buf)
    assert "offset" in str(exc.value)


def test_bad_magic_and_version():
    buf = bytearray(encode_array(np.ones(2)))
    with pytest.raises(ParseError, match="magic"):
        decode_array(b"XXXX" + bytes(buf[4:]))
    buf[4] = 9
    with pytest.raises(ParseError, match="version"):
        decode_array(bytes(buf))


def test_trailing_bytes_rejected(tmp_path):
    (tmp_path / "t.tnsr").write_bytes(encode_array(np.ones(2)) + b"\0")
    with pytest.raises(ParseError, match="trailing"):
        load_tensor(tmp_path / "t.tnsr")
