"""Length-prefixed binary wire format between vehicle processes and the world server.

Every frame is ``u32 payload length | u8 tag | payload``, little-endian throughout.
"""
from __future__ import annotations

import enum
import math
import os
import struct
from dataclasses import dataclass
from typing import Iterator, Optional, Union

import numpy as np

PROTOCOL_VERSION = 1
DEFAULT_PORT = 7784
HEADER = struct.Struct("<IB")
MAX_PAYLOAD = 64 * 1024 * 1024
QUAT_TOLERANCE = 1e-6


def default_port() -> int:
    raw = os.environ.get("SIM_PORT")
    if raw is None or raw == "":
        return DEFAULT_PORT
    port = int(raw)
    if not 0 < port < 65536:
        raise ValueError(f"SIM_PORT out of range: {raw}")
    return port


class Tag(enum.IntEnum):
    HELLO = 1
    HELLO_ACK = 2
    POSE = 3
    FRAME_HEADER = 4
    FRAME_PAYLOAD = 5
    TICK_DONE = 6
    ERROR = 7


class Encoding(enum.IntEnum):
    RGB8 = 0
    RGB8_DEPTH_F32 = 1


class ErrorCode(enum.IntEnum):
    VERSION_MISMATCH = 1
    HANDSHAKE_VIOLATION = 2
    DUPLICATE_BODY = 3
    UNKNOWN_BODY = 4
    BAD_POSE = 5
    DECODE_ERROR = 6
    SHUTDOWN = 7


class EncodeError(ValueError):
    pass


class DecodeError(Exception):
    code = "decode_error"


class NeedMoreData(DecodeError):
    code = "need_more_data"


class UnknownMessageType(DecodeError):
    code = "unknown_message_type"


class LengthMismatch(DecodeError):
    code = "length_mismatch"


class NonFiniteFloat(DecodeError):
    code = "non_finite_float"


class NonNormalizedQuaternion(DecodeError):
    code = "non_normalized_quaternion"


class InvalidText(DecodeError):
    code = "invalid_text"


class PayloadTooLarge(DecodeError):
    code = "payload_too_large"


class InvalidField(DecodeError):
    code = "invalid_field"


@dataclass(frozen=True)
class CameraInfo:
    camera_id: int
    width: int
    height: int
    hfov: float
    near: float
    far: float
    mount: tuple[float, float, float, float, float, float, float] = (0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Hello:
    protocol_version: int
    body_id: int
    camera: Optional[CameraInfo] = None
    visual: int = 1


@dataclass(frozen=True)
class HelloAck:
    assigned: int


@dataclass(frozen=True)
class Pose:
    body_id: int
    tick: int
    x: float
    y: float
    z: float
    qw: float
    qx: float
    qy: float
    qz: float


@dataclass(frozen=True)
class FrameHeader:
    camera_id: int
    tick: int
    sim_time: float
    width: int
    height: int
    encoding: int


@dataclass(frozen=True)
class FramePayload:
    data: bytes


@dataclass(frozen=True)
class TickDone:
    tick: int


@dataclass(frozen=True)
class Error:
    code: int
    text: str = ""


Message = Union[Hello, HelloAck, Pose, FrameHeader, FramePayload, TickDone, Error]

_HELLO = struct.Struct("<HIBB")
_CAMERA = struct.Struct("<IHHddd7d")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
# body id, reserved (zero), tick, position, quaternion
_POSE = struct.Struct("<IIQ7d")
_FRAME_HEADER = struct.Struct("<IQdHHB")
_ERROR = struct.Struct("<HH")

_U8, _U16, _U32_MAX, _U64_MAX = 0xFF, 0xFFFF, 0xFFFFFFFF, 0xFFFFFFFFFFFFFFFF


def _check_int(name: str, value: int, hi: int) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value <= hi:
        raise EncodeError(f"{name}={value!r} out of range [0, {hi}]")


def _check_floats(name: str, values) -> None:
    for v in values:
        if not math.isfinite(v):
            raise EncodeError(f"{name} must be finite")


def _quat_ok(qw, qx, qy, qz) -> bool:
    return abs(math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz) - 1.0) <= QUAT_TOLERANCE


def _payload(msg: Message) -> tuple[int, bytes]:
    if isinstance(msg, Hello):
        _check_int("protocol_version", msg.protocol_version, _U16)
        _check_int("body_id", msg.body_id, _U32_MAX)
        _check_int("visual", msg.visual, _U8)
        head = _HELLO.pack(msg.protocol_version, msg.body_id, msg.visual, msg.camera is not None)
        if msg.camera is None:
            return Tag.HELLO, head
        c = msg.camera
        _check_int("camera_id", c.camera_id, _U32_MAX)
        _check_int("width", c.width, _U16)
        _check_int("height", c.height, _U16)
        if len(c.mount) != 7:
            raise EncodeError("camera mount must have 7 components")
        _check_floats("camera", (c.hfov, c.near, c.far, *c.mount))
        if not _quat_ok(*c.mount[3:]):
            raise EncodeError("camera mount quaternion not normalized")
        return Tag.HELLO, head + _CAMERA.pack(c.camera_id, c.width, c.height, c.hfov, c.near, c.far, *c.mount)
    if isinstance(msg, HelloAck):
        _check_int("assigned", msg.assigned, _U32_MAX)
        return Tag.HELLO_ACK, _U32.pack(msg.assigned)
    if isinstance(msg, Pose):
        _check_int("body_id", msg.body_id, _U32_MAX)
        _check_int("tick", msg.tick, _U64_MAX)
        vals = (msg.x, msg.y, msg.z, msg.qw, msg.qx, msg.qy, msg.qz)
        _check_floats("pose", vals)
        if not _quat_ok(*vals[3:]):
            raise EncodeError("pose quaternion not normalized")
        return Tag.POSE, _POSE.pack(msg.body_id, 0, msg.tick, *vals)
    if isinstance(msg, FrameHeader):
        _check_int("camera_id", msg.camera_id, _U32_MAX)
        _check_int("tick", msg.tick, _U64_MAX)
        _check_int("width", msg.width, _U16)
        _check_int("height", msg.height, _U16)
        _check_int("encoding", msg.encoding, _U8)
        _check_floats("sim_time", (msg.sim_time,))
        return Tag.FRAME_HEADER, _FRAME_HEADER.pack(msg.camera_id, msg.tick, msg.sim_time, msg.width, msg.height, msg.encoding)
    if isinstance(msg, FramePayload):
        return Tag.FRAME_PAYLOAD, bytes(msg.data)
    if isinstance(msg, TickDone):
        _check_int("tick", msg.tick, _U64_MAX)
        return Tag.TICK_DONE, _U64.pack(msg.tick)
    if isinstance(msg, Error):
        _check_int("code", msg.code, _U16)
        try:
            text = msg.text.encode("utf-8")
        except UnicodeEncodeError as exc:
            raise EncodeError(str(exc)) from None
        if len(text) > _U16:
            raise EncodeError("error text longer than 65535 bytes")
        return Tag.ERROR, _ERROR.pack(msg.code, len(text)) + text
    raise EncodeError(f"not a message: {type(msg).__name__}")


def encode(msg: Message) -> bytes:
    tag, body = _payload(msg)
    if len(body) > MAX_PAYLOAD:
        raise EncodeError("payload too large")
    return HEADER.pack(len(body), tag) + body


def _finite(values) -> None:
    for v in values:
        if not math.isfinite(v):
            raise NonFiniteFloat("non-finite float field")


def _exact(payload: bytes, size: int, what: str) -> None:
    if len(payload) != size:
        raise LengthMismatch(f"{what} payload is {len(payload)} bytes, expected {size}")


def decode_payload(tag: int, payload: bytes) -> Message:
    if tag == Tag.HELLO:
        if len(payload) < _HELLO.size:
            raise LengthMismatch("HELLO payload too short")
        version, body, visual, has_cam = _HELLO.unpack_from(payload)
        if has_cam not in (0, 1):
            raise InvalidField("HELLO has_camera flag must be 0 or 1")
        if not has_cam:
            _exact(payload, _HELLO.size, "HELLO")
            return Hello(version, body, None, visual)
        _exact(payload, _HELLO.size + _CAMERA.size, "HELLO")
        cid, w, h, hfov, near, far, *mount = _CAMERA.unpack_from(payload, _HELLO.size)
        _finite((hfov, near, far, *mount))
        if not _quat_ok(*mount[3:]):
            raise NonNormalizedQuaternion("camera mount quaternion not normalized")
        return Hello(version, body, CameraInfo(cid, w, h, hfov, near, far, tuple(mount)), visual)
    if tag == Tag.HELLO_ACK:
        _exact(payload, _U32.size, "HELLO_ACK")
        return HelloAck(_U32.unpack(payload)[0])
    if tag == Tag.POSE:
        _exact(payload, _POSE.size, "POSE")
        body, reserved, tick, *vals = _POSE.unpack(payload)
        if reserved != 0:
            raise InvalidField("POSE reserved field must be zero")
        _finite(vals)
        if not _quat_ok(*vals[3:]):
            raise NonNormalizedQuaternion("pose quaternion not normalized")
        return Pose(body, tick, *vals)
    if tag == Tag.FRAME_HEADER:
        _exact(payload, _FRAME_HEADER.size, "FRAME_HEADER")
        cid, tick, sim_time, w, h, enc = _FRAME_HEADER.unpack(payload)
        _finite((sim_time,))
        return FrameHeader(cid, tick, sim_time, w, h, enc)
    if tag == Tag.FRAME_PAYLOAD:
        return FramePayload(bytes(payload))
    if tag == Tag.TICK_DONE:
        _exact(payload, _U64.size, "TICK_DONE")
        return TickDone(_U64.unpack(payload)[0])
    if tag == Tag.ERROR:
        if len(payload) < _ERROR.size:
            raise LengthMismatch("ERROR payload too short")
        code, n = _ERROR.unpack_from(payload)
        _exact(payload, _ERROR.size + n, "ERROR")
        try:
            text = bytes(payload[_ERROR.size:]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InvalidText(str(exc)) from None
        return Error(code, text)
    raise UnknownMessageType(f"unknown message tag 0x{tag:02X}")


def decode_frame(buf: bytes, offset: int = 0) -> tuple[Message, int]:
    """Decode one frame starting at ``offset``; returns (message, bytes consumed)."""
    avail = len(buf) - offset
    if avail < HEADER.size:
        raise NeedMoreData(f"need {HEADER.size} header bytes, have {avail}")
    length, tag = HEADER.unpack_from(buf, offset)
    if length > MAX_PAYLOAD:
        raise PayloadTooLarge(f"declared payload {length} exceeds limit")
    if tag not in Tag._value2member_map_:
        raise UnknownMessageType(f"unknown message tag 0x{tag:02X}")
    total = HEADER.size + length
    if avail < total:
        raise NeedMoreData(f"need {total} bytes, have {avail}")
    start = offset + HEADER.size
    return decode_payload(tag, bytes(buf[start:start + length])), total


def decode(data: bytes) -> Message:
    """Decode exactly one frame; trailing bytes are a length mismatch."""
    msg, used = decode_frame(data)
    if used != len(data):
        raise LengthMismatch(f"{len(data) - used} trailing bytes after frame")
    return msg


class StreamDecoder:
    """Reassembles frames from arbitrarily split reads.

    After a non-``NeedMoreData`` error the stream is unrecoverable (framing is
    lost) and ``feed`` keeps raising it.
    """

    def __init__(self):
        self._buf = bytearray()
        self._error: Optional[DecodeError] = None

    def feed(self, data: bytes) -> list[Message]:
        if self._error is not None:
            raise self._error
        self._buf += data
        out: list[Message] = []
        pos = 0
        try:
            while True:
                try:
                    msg, used = decode_frame(self._buf, pos)
                except NeedMoreData:
                    break
                out.append(msg)
                pos += used
        except DecodeError as exc:
            self._error = exc
            del self._buf[:pos]
            raise
        del self._buf[:pos]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def iter_messages(data: bytes) -> Iterator[Message]:
    pos = 0
    while pos < len(data):
        msg, used = decode_frame(data, pos)
        pos += used
        yield msg


# ---------------------------------------------------------------------------
# frame payload packing

def pack_frame(rgb: np.ndarray, depth: Optional[np.ndarray], encoding: int) -> bytes:
    if encoding == Encoding.RGB8:
        return np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()
    if encoding == Encoding.RGB8_DEPTH_F32:
        if depth is None:
            raise EncodeError("encoding 1 needs a depth map")
        return np.ascontiguousarray(rgb, dtype=np.uint8).tobytes() + np.ascontiguousarray(depth, dtype="<f4").tobytes()
    raise EncodeError(f"unknown frame encoding {encoding}")


def unpack_frame(header: FrameHeader, data: bytes) -> tuple[np.ndarray, Optional[np.ndarray]]:
    w, h = header.width, header.height
    n_rgb = w * h * 3
    if header.encoding == Encoding.RGB8:
        if len(data) != n_rgb:
            raise LengthMismatch("frame payload size does not match header")
        return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3), None
    if header.encoding == Encoding.RGB8_DEPTH_F32:
        if len(data) != n_rgb + 4 * w * h:
            raise LengthMismatch("frame payload size does not match header")
        rgb = np.frombuffer(data, dtype=np.uint8, count=n_rgb).reshape(h, w, 3)
        depth = np.frombuffer(data, dtype="<f4", offset=n_rgb).reshape(h, w).astype(np.float32)
        return rgb, depth
    raise InvalidField(f"unknown frame encoding {header.encoding}")
