"""Binary file formats for photon frames and calibration profiles.

TGIF v1 (one photon frame)::

    b"TGIF" | 0x01 | width u32le | height u32le | width*height bytes, row-major, 0x00/0x01

TGIM v1 (calibration profile)::

    b"TGIM" | 0x01 | width u32le | height u32le | header_len u32le
    | header: UTF-8 JSON, header_len bytes
    | one float64le raster (width*height, row-major) per name in header["images"]

The JSON header carries the peak window, both efficiency estimates and the
sample count of each mean image.
"""
from __future__ import annotations

import json
import os
import struct
from typing import Union

import numpy as np

from .calibration import EtaEstimate, MeanImage, PeakWindow
from .reconstruction import CalibrationProfile
from .source import PhotonFrame

FRAME_MAGIC = b"TGIF"
PROFILE_MAGIC = b"TGIM"
VERSION = 1
_HEAD = struct.Struct("<4sBII")
_PROFILE_IMAGES = ("mean_signal", "mean_idler")

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def encode_frame(frame: PhotonFrame) -> bytes:
    h, w = frame.detections.shape
    return _HEAD.pack(FRAME_MAGIC, VERSION, w, h) + frame.detections.tobytes(order="C")


def decode_frame(data: bytes) -> PhotonFrame:
    if len(data) < _HEAD.size:
        raise FormatError("truncated TGIF header")
    magic, version, w, h = _HEAD.unpack_from(data)
    if magic != FRAME_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FRAME_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported TGIF version {version}")
    body = data[_HEAD.size:]
    if len(body) < w * h:
        raise FormatError(f"truncated TGIF raster: {len(body)} of {w * h} bytes")
    if len(body) > w * h:
        raise FormatError("trailing bytes after TGIF raster")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    if pix.size and pix.max() > 1:
        raise FormatError("TGIF pixel values must be 0x00 or 0x01")
    return PhotonFrame(pix.copy())


def write_frame(path: PathLike, frame: PhotonFrame) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_frame(frame))


def read_frame(path: PathLike) -> PhotonFrame:
    with open(path, "rb") as fh:
        return decode_frame(fh.read())


def _eta_dict(e: EtaEstimate):
    return {"eta": e.eta, "peak_integral": e.peak_integral, "frames_used": e.frames_used,
            "background_std": e.background_std, "support_size": e.support_size}


def encode_profile(profile: CalibrationProfile) -> bytes:
    h, w = profile.mean_idler.values.shape
    if profile.mean_signal.values.shape != (h, w):
        raise ValueError("signal and idler mean images differ in size")
    win = profile.window
    header = {
        "format": "TGIM", "version": VERSION,
        "images": list(_PROFILE_IMAGES),
        "sample_count": {"mean_signal": profile.mean_signal.sample_count,
                         "mean_idler": profile.mean_idler.sample_count},
        "window": {"center_dx": win.center_dx, "center_dy": win.center_dy,
                   "extent_x": win.extent_x, "extent_y": win.extent_y},
        "eta": _eta_dict(profile.eta),
        "eta_window": _eta_dict(profile.eta_window),
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [_HEAD.pack(PROFILE_MAGIC, VERSION, w, h), struct.pack("<I", len(text)), text]
    for img in (profile.mean_signal, profile.mean_idler):
        parts.append(img.values.astype("<f8").tobytes(order="C"))
    return b"".join(parts)


def decode_profile(data: bytes) -> CalibrationProfile:
    if len(data) < _HEAD.size + 4:
        raise FormatError("truncated TGIM header")
    magic, version, w, h = _HEAD.unpack_from(data)
    if magic != PROFILE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {PROFILE_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported TGIM version {version}")
    (hlen,) = struct.unpack_from("<I", data, _HEAD.size)
    start = _HEAD.size + 4
    if len(data) < start + hlen:
        raise FormatError("truncated TGIM text header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
        names = header["images"]
        counts = header["sample_count"]
        win = PeakWindow(**header["window"])
        eta = EtaEstimate(**header["eta"])
        eta_window = EtaEstimate(**header["eta_window"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed TGIM header: {exc}") from None
    if tuple(names) != _PROFILE_IMAGES:
        raise FormatError(f"unexpected TGIM image list {names}")
    raster = w * h * 8
    pos = start + hlen
    if len(data) != pos + raster * len(names):
        raise FormatError("TGIM raster size does not match the header")
    imgs = {}
    for name in names:
        vals = np.frombuffer(data, dtype="<f8", count=w * h, offset=pos).reshape(h, w)
        imgs[name] = MeanImage(vals.astype(np.float64), int(counts[name]))
        pos += raster
    return CalibrationProfile(imgs["mean_signal"], imgs["mean_idler"], win, eta, eta_window)


def write_profile(path: PathLike, profile: CalibrationProfile) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_profile(profile))


def read_profile(path: PathLike) -> CalibrationProfile:
    with open(path, "rb") as fh:
        return decode_profile(fh.read())
