"""Binary window prediction container.

Layout (little-endian): header ``"LASR"``, version u32 (=1), window index u32, start
frame u32, frame count u32, H u32, W u32; then per frame rotation 9×f64 (row-major),
translation 3×f64, points H·W·3×f32, confidence H·W×f32, validity H·W×u8; then a
trailing CRC32 (u32) of every preceding byte.

Follows Single Responsibility Principle (SRP) - handles only container encoding.
"""

import logging
import struct
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from src.geometry import ConfidenceMap, PointMap, RigidPose
from src.models import FramePrediction, WindowPrediction, WindowSpec

logger = logging.getLogger(__name__)

MAGIC = b"LASR"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIIIII")
CRC = struct.Struct("<I")


class ContainerError(Exception):
    """Base class for container read/write failures."""


class HeaderError(ContainerError):
    """Wrong magic, unsupported version or a short header."""


class DimensionError(ContainerError):
    """Declared dimensions are unusable or disagree with the request."""


class WindowMismatchError(DimensionError):
    """The file holds a different window than the one requested."""


class TruncationError(ContainerError):
    """Payload ends before the declared frames are complete."""

    def __init__(self, message: str, frame: Optional[int], offset: int):
        super().__init__(message)
        self.frame = frame
        self.offset = offset


class ChecksumError(ContainerError):
    """Trailing CRC32 does not match the payload."""


@dataclass(frozen=True)
class ContainerHeader:
    """Decoded container header."""

    version: int
    window_index: int
    start: int
    frame_count: int
    height: int
    width: int

    @property
    def frame_bytes(self) -> int:
        """Encoded size of one frame record."""
        pixels = self.height * self.width
        return 9 * 8 + 3 * 8 + pixels * 3 * 4 + pixels * 4 + pixels

    @property
    def expected_size(self) -> int:
        """Total file size implied by the header."""
        return HEADER.size + self.frame_count * self.frame_bytes + CRC.size

    def window(self) -> WindowSpec:
        """WindowSpec declared by the header."""
        return WindowSpec(self.window_index, self.start, self.frame_count)

    def to_dict(self) -> Dict:
        """Convert to dictionary representation."""
        return {
            "version": self.version,
            "window": self.window_index,
            "start": self.start,
            "frames": self.frame_count,
            "height": self.height,
            "width": self.width,
            "bytes": self.expected_size,
        }


def encode_window(pred: WindowPrediction) -> bytes:
    """Serialize a prediction to container bytes."""
    spec = pred.window
    chunks: List[bytes] = [
        HEADER.pack(
            MAGIC, FORMAT_VERSION, spec.index, spec.start, spec.length, pred.height, pred.width
        )
    ]
    for frame in pred.frames:
        chunks.append(np.ascontiguousarray(frame.pose.rotation, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(frame.pose.translation, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(frame.pointmap.points, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(frame.confidence.values, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(frame.pointmap.valid, dtype="u1").tobytes())
    payload = b"".join(chunks)
    return payload + CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF)


def decode_header(data: bytes) -> ContainerHeader:
    """
    Decode and validate the fixed-size header.

    Raises:
        HeaderError: On short input, wrong magic or unsupported version
        DimensionError: On zero frame count or image size
    """
    if len(data) < HEADER.size:
        raise HeaderError(f"File too short for header: {len(data)} < {HEADER.size} bytes")
    magic, version, index, start, count, height, width = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise HeaderError(f"Bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise HeaderError(f"Unsupported container version {version}")
    if index < 1 or start < 1:
        raise DimensionError(f"Window index and start must be >= 1, got {index}, {start}")
    if count < 1 or height < 1 or width < 1:
        raise DimensionError(f"Degenerate dimensions: frames={count} H={height} W={width}")
    return ContainerHeader(version, index, start, count, height, width)


def decode_window(data: bytes, window: Optional[WindowSpec] = None) -> WindowPrediction:
    """
    Decode container bytes into a prediction.

    Args:
        data: Complete file contents
        window: Expected window; None accepts whatever the header declares

    Raises:
        HeaderError, DimensionError, TruncationError, ChecksumError, WindowMismatchError
    """
    header = decode_header(data)
    pixels = header.height * header.width
    payload_end = HEADER.size + header.frame_count * header.frame_bytes
    offset = HEADER.size
    records = []
    for k in range(header.frame_count):
        if offset + header.frame_bytes > len(data):
            frame = header.start + k
            raise TruncationError(
                f"Truncated payload in frame {frame} (record {k}) at offset {offset}: "
                f"need {header.frame_bytes} bytes, have {len(data) - offset}",
                frame=frame,
                offset=offset,
            )
        records.append(offset)
        offset += header.frame_bytes
    if len(data) < payload_end + CRC.size:
        raise TruncationError(
            f"Missing checksum at offset {payload_end}", frame=None, offset=payload_end
        )
    if len(data) > payload_end + CRC.size:
        raise DimensionError(
            f"Trailing bytes: file is {len(data)} bytes, header implies {header.expected_size}"
        )
    (stored,) = CRC.unpack_from(data, payload_end)
    actual = zlib.crc32(data[:payload_end]) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(f"CRC32 mismatch: stored {stored:#010x}, computed {actual:#010x}")

    declared = header.window()
    if window is not None and window != declared:
        raise WindowMismatchError(
            f"Requested window {window.index} (start {window.start}, {window.length} frames) "
            f"but file holds window {declared.index} (start {declared.start}, "
            f"{declared.length} frames)"
        )

    frames = []
    for k, base in enumerate(records):
        cursor = base
        rotation = np.frombuffer(data, "<f8", 9, cursor).reshape(3, 3)
        cursor += 72
        translation = np.frombuffer(data, "<f8", 3, cursor)
        cursor += 24
        points = np.frombuffer(data, "<f4", pixels * 3, cursor).reshape(
            header.height, header.width, 3
        )
        cursor += pixels * 12
        conf = np.frombuffer(data, "<f4", pixels, cursor).reshape(header.height, header.width)
        cursor += pixels * 4
        valid = np.frombuffer(data, "u1", pixels, cursor).reshape(header.height, header.width)
        if np.any(valid > 1):
            raise DimensionError(f"Validity mask of frame {header.start + k} is not 0/1")
        try:
            frames.append(
                FramePrediction(
                    header.start + k,
                    PointMap(points, valid.astype(bool)),
                    RigidPose(rotation, translation),
                    ConfidenceMap(conf),
                )
            )
        except ValueError as exc:
            raise DimensionError(f"Frame {header.start + k}: {exc}") from exc
    return WindowPrediction(declared, tuple(frames))


def write_window_predictions(pred: WindowPrediction, path: str) -> None:
    """Write a prediction to a container file."""
    data = encode_window(pred)
    with open(path, "wb") as handle:
        handle.write(data)
    logger.debug("Wrote window %d (%d bytes) to %s", pred.window.index, len(data), path)


def read_window_predictions(path: str, window: Optional[WindowSpec] = None) -> WindowPrediction:
    """Read a container file, verifying it holds the requested window."""
    with open(path, "rb") as handle:
        data = handle.read()
    return decode_window(data, window)


def inspect_container(path: str) -> ContainerHeader:
    """
    Validate a container fully and return its header.

    Raises:
        ContainerError: Any structural problem, including truncation with its offset
    """
    with open(path, "rb") as handle:
        data = handle.read()
    decode_window(data)
    return decode_header(data)
