import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from tgi.calibration import EtaEstimate, MeanImage, PeakWindow
from tgi.frameio import (FormatError, decode_frame, decode_profile, encode_frame,
                         encode_profile, read_frame, read_profile, write_frame, write_profile)
from tgi.reconstruction import CalibrationProfile
from tgi.source import PhotonFrame


def sample_frame():
    rng = np.random.default_rng(0)
    return PhotonFrame((rng.random((5, 7)) < 0.3).astype(np.uint8))


def sample_profile():
    rng = np.random.default_rng(1)
    return CalibrationProfile(
        MeanImage(rng.random((4, 6)) * 0.2, 900), MeanImage(rng.random((4, 6)) * 0.05, 900),
        PeakWindow(1, -1, 16, 5), EtaEstimate(0.302, 0.302, 900, 1e-4, 768),
        EtaEstimate(0.23, 0.23, 900, 1e-4, 80))


def test_frame_layout():
    f = PhotonFrame(np.array([[1, 0, 1], [0, 0, 1]]))
    data = encode_frame(f)
    assert data[:4] == b"TGIF" and data[4] == 1
    assert struct.unpack_from("<II", data, 5) == (3, 2)
    assert data[13:] == bytes([1, 0, 1, 0, 0, 1])


def test_frame_round_trip(tmp_path):
    f = sample_frame()
    assert decode_frame(encode_frame(f)) == f
    write_frame(tmp_path / "a.tgif", f)
    assert read_frame(tmp_path / "a.tgif") == f


@pytest.mark.parametrize("mutate", [
    lambda d: d[:8],                      # header cut short
    lambda d: b"TGIX" + d[4:],            # magic
    lambda d: d[:4] + b"\x02" + d[5:],    # version
    lambda d: d[:-1],                     # raster cut short
    lambda d: d + b"\x00",                # trailing byte
    lambda d: d[:-1] + b"\x02",           # non-binary pixel
])
def test_frame_corruption_rejected(mutate):
    with pytest.raises(FormatError):
        decode_frame(mutate(encode_frame(sample_frame())))


def test_profile_round_trip(tmp_path):
    p = sample_profile()
    write_profile(tmp_path / "c.tgim", p)
    q = read_profile(tmp_path / "c.tgim")
    assert_array_equal(q.mean_signal.values, p.mean_signal.values)
    assert_array_equal(q.mean_idler.values, p.mean_idler.values)
    assert q.window == p.window
    assert q.eta == p.eta and q.eta_window == p.eta_window
    assert q.mean_signal.sample_count == 900
    assert encode_profile(q) == encode_profile(p)


def test_profile_corruption_rejected():
    data = encode_profile(sample_profile())
    for bad in (data[:10], b"TGIF" + data[4:], data[:-8], data + b"\0" * 8):
        with pytest.raises(FormatError):
            decode_profile(bad)
    hlen = struct.unpack_from("<I", data, 13)[0]
    broken = data[:17] + b"{" * hlen + data[17 + hlen:]
    with pytest.raises(FormatError):
        decode_profile(broken)
