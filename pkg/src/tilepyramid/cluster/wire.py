"""Length-prefixed JSON messages exchanged between cluster workers.

Frame: 4-byte big-endian body length, then a UTF-8 JSON object with a
``type`` and a ``from`` field.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Union

from ..engine import Decision, ExecutionTree
from ..errors import TransportError
from ..pyramid import PyramidGeometry, TileId

HEADER = struct.Struct("!I")
MAX_FRAME = 256 * 1024 * 1024


@dataclass(frozen=True)
class Hello:
    """First frame on every connection; identifies the connecting worker."""

    sender: int


@dataclass(frozen=True)
class StealRequest:
    sender: int


@dataclass(frozen=True)
class TaskGrant:
    sender: int
    tile: TileId


@dataclass(frozen=True)
class Empty:
    sender: int


@dataclass(frozen=True)
class SubtreeUpload:
    sender: int
    nodes: tuple  # of (level, col, row, p, decision code)


@dataclass(frozen=True)
class Shutdown:
    sender: int


Message = Union[Hello, StealRequest, TaskGrant, Empty, SubtreeUpload, Shutdown]

_TYPES = {
    Hello: "hello",
    StealRequest: "steal_req",
    TaskGrant: "task",
    Empty: "empty",
    SubtreeUpload: "subtree",
    Shutdown: "shutdown",
}
_CLASSES = {v: k for k, v in _TYPES.items()}


def _tile_json(t: TileId) -> dict:
    return {"level": t.level, "col": t.col, "row": t.row}


def to_json(msg: Message) -> dict:
    body = {"type": _TYPES[type(msg)], "from": msg.sender}
    if isinstance(msg, TaskGrant):
        body["tile"] = _tile_json(msg.tile)
    elif isinstance(msg, SubtreeUpload):
        body["nodes"] = [
            {"level": lv, "col": c, "row": r, "p": p, "decision": d} for lv, c, r, p, d in msg.nodes
        ]
    return body


def from_json(body: dict) -> Message:
    try:
        cls = _CLASSES[body["type"]]
        sender = int(body["from"])
        if cls is TaskGrant:
            t = body["tile"]
            return TaskGrant(sender, TileId(int(t["level"]), int(t["col"]), int(t["row"])))
        if cls is SubtreeUpload:
            nodes = tuple(
                (int(n["level"]), int(n["col"]), int(n["row"]), float(n["p"]), str(n["decision"]))
                for n in body["nodes"]
            )
            return SubtreeUpload(sender, nodes)
        return cls(sender)
    except (KeyError, TypeError, ValueError) as e:
        raise TransportError(f"malformed message: {e!r}") from None


def encode(msg: Message) -> bytes:
    """Full frame: length header plus JSON body."""
    raw = json.dumps(to_json(msg), separators=(",", ":"), allow_nan=False).encode("utf-8")
    return HEADER.pack(len(raw)) + raw


def decode_body(raw: bytes) -> Message:
    try:
        return from_json(json.loads(raw.decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TransportError(f"undecodable frame: {e}") from None


def decode(frame: bytes) -> Message:
    if len(frame) < HEADER.size:
        raise TransportError("truncated frame header")
    (n,) = HEADER.unpack_from(frame)
    if len(frame) != HEADER.size + n:
        raise TransportError(f"frame length {len(frame) - HEADER.size} != header {n}")
    return decode_body(frame[HEADER.size :])


class FrameDecoder:
    """Incremental decoder for a byte stream of frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf += data
        out = []
        while len(self._buf) >= HEADER.size:
            (n,) = HEADER.unpack_from(self._buf)
            if n > MAX_FRAME:
                raise TransportError(f"frame of {n} bytes exceeds limit")
            if len(self._buf) < HEADER.size + n:
                break
            raw = bytes(self._buf[HEADER.size : HEADER.size + n])
            del self._buf[: HEADER.size + n]
            out.append(decode_body(raw))
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def tree_nodes(tree: ExecutionTree) -> tuple:
    return tuple((t.level, t.col, t.row, p, d.code) for t, p, d in tree.nodes())


def tree_from_nodes(geometry: PyramidGeometry, nodes) -> ExecutionTree:
    tree = ExecutionTree(geometry)
    for level, col, row, p, code in nodes:
        tree.add(TileId(level, col, row), p, Decision.from_code(code))
    return tree
