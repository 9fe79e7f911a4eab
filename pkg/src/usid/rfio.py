"""Binary containers for RF channel data and beamformed images.

Both formats are little-endian: a fixed header followed by float32 samples,
row-major (element-major for RF, line-major for images).

RF frame (``USRF``)::

    magic 4s | version u16 | n_elements u32 | n_samples u32 | fs f64 | polarity i8 | frame_index u32

Beamformed image (``USBF``)::

    magic 4s | version u16 | n_lines u32 | n_samples u32 | fs f64 | polarity i8 | frame_index u32
    | source_kind u8 | sound_speed f64 | pitch f64

``source_kind`` codes are 0 single, 1 summed, 2 subtracted; polarity is 0 for
combined data. Samples written as float32 read back bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .beamform import SOURCE_KINDS, BeamformedImage
from .phantom import RfFrame

VERSION = 1
_RF = struct.Struct("<4sHIIdbI")
_BF_EXTRA = struct.Struct("<Bdd")
_F32 = np.dtype("<f4")


class RfFormatError(ValueError):
    pass


def _payload(samples: np.ndarray) -> bytes:
    return np.ascontiguousarray(samples, dtype=_F32).tobytes()


def _read_payload(buf: bytes, offset: int, rows: int, cols: int) -> np.ndarray:
    need = rows * cols * _F32.itemsize
    if len(buf) - offset != need:
        raise RfFormatError(f"payload is {len(buf) - offset} bytes, expected {need}")
    return np.frombuffer(buf, dtype=_F32, count=rows * cols, offset=offset).reshape(rows, cols).astype(np.float64)


def _header(buf: bytes, magic: bytes):
    if len(buf) < _RF.size:
        raise RfFormatError("file shorter than header")
    got, version, rows, cols, fs, polarity, frame_index = _RF.unpack_from(buf, 0)
    if got != magic:
        raise RfFormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise RfFormatError(f"unsupported version {version}")
    return rows, cols, fs, polarity, frame_index


def dumps_rf(frame: RfFrame) -> bytes:
    n_el, n_s = frame.samples.shape
    head = _RF.pack(b"USRF", VERSION, n_el, n_s, float(frame.fs), int(frame.polarity), int(frame.frame_index))
    return head + _payload(frame.samples)


def loads_rf(buf: bytes) -> RfFrame:
    rows, cols, fs, polarity, frame_index = _header(buf, b"USRF")
    samples = _read_payload(buf, _RF.size, rows, cols)
    return RfFrame(polarity=polarity, fs=fs, samples=samples, frame_index=frame_index)


def dumps_image(img: BeamformedImage, pitch: float | None = None) -> bytes:
    """Serialize an image; ``pitch`` defaults to the spacing of its line positions."""
    n_l, n_s = img.values.shape
    if pitch is None:
        pitch = float(img.line_positions[-1] - img.line_positions[0]) / (n_l - 1) if n_l > 1 else 0.0
    head = _RF.pack(b"USBF", VERSION, n_l, n_s, float(img.fs), 0, int(img.frame_index))
    extra = _BF_EXTRA.pack(SOURCE_KINDS.index(img.source_kind), float(img.sound_speed), float(pitch))
    return head + extra + _payload(img.values)


def loads_image(buf: bytes) -> BeamformedImage:
    rows, cols, fs, _, frame_index = _header(buf, b"USBF")
    if len(buf) < _RF.size + _BF_EXTRA.size:
        raise RfFormatError("file shorter than header")
    kind, c, pitch = _BF_EXTRA.unpack_from(buf, _RF.size)
    if kind >= len(SOURCE_KINDS):
        raise RfFormatError(f"unknown source_kind code {kind}")
    values = _read_payload(buf, _RF.size + _BF_EXTRA.size, rows, cols)
    positions = (np.arange(rows) - (rows - 1) / 2.0) * pitch
    return BeamformedImage(values=values, fs=fs, sound_speed=c, line_positions=positions,
                           source_kind=SOURCE_KINDS[kind], frame_index=frame_index)


def save_rf(frame: RfFrame, path) -> None:
    Path(path).write_bytes(dumps_rf(frame))


def load_rf(path) -> RfFrame:
    return loads_rf(Path(path).read_bytes())


def save_image(img: BeamformedImage, path) -> None:
    Path(path).write_bytes(dumps_image(img))


def load_image(path) -> BeamformedImage:
    return loads_image(Path(path).read_bytes())


__all__ = [
    "RfFormatError",
    "dumps_image",
    "dumps_rf",
    "load_image",
    "load_rf",
    "loads_image",
    "loads_rf",
    "save_image",
    "save_rf",
]
