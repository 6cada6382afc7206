"""Messages that may cross the boundary between the platform agents and the
federated server, plus the channel that carries them.

The vocabulary is closed: five tags, each with a fixed payload type. Nothing
else (states, rewards, parameters) has a representation on the wire, and the
in-process channel encodes every message to bytes and decodes it on the other
side so that the boundary is exercised exactly as a remote one would be.

Record layout: ``<B tag><I count><payload>`` where the payload is ``count``
little-endian float64 values (Q vectors, shared targets) or uint32 indices
(batch ids). ``QueryQ`` has count 0.
"""
from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractViolation

TAG_QUERY_Q = 1
TAG_Q_VECTOR = 2
TAG_FED_Q_VECTOR = 3
TAG_BATCH_IDS = 4
TAG_SHARED_TARGET = 5

TAG_NAMES = {
    TAG_QUERY_Q: "QueryQ",
    TAG_Q_VECTOR: "QVector",
    TAG_FED_Q_VECTOR: "FedQVector",
    TAG_BATCH_IDS: "BatchIDs",
    TAG_SHARED_TARGET: "SharedTarget",
}
_RECORD = struct.Struct("<BI")


@dataclass(frozen=True)
class QueryQ:
    tag = TAG_QUERY_Q


@dataclass(frozen=True)
class _FloatPayload:
    values: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ContractViolation(f"{type(self).__name__} carries non-finite values")
        object.__setattr__(self, "values", arr)

    def __eq__(self, other):
        return type(self) is type(other) and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class QVector(_FloatPayload):
    """Output of a platform's local Q network (one row per state)."""
    tag = TAG_Q_VECTOR


@dataclass(frozen=True, eq=False)
class FedQVector(_FloatPayload):
    """Output of the federated Q network, sent back to one platform."""
    tag = TAG_FED_Q_VECTOR


@dataclass(frozen=True, eq=False)
class SharedTarget(_FloatPayload):
    """TD targets computed by platform A; the only reward-derived payload."""
    tag = TAG_SHARED_TARGET


@dataclass(frozen=True)
class BatchIDs:
    ids: np.ndarray
    tag = TAG_BATCH_IDS

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.size and (ids.min() < 0 or ids.max() > np.iinfo(np.uint32).max):
            raise ContractViolation("batch ids must fit in uint32")
        object.__setattr__(self, "ids", np.ascontiguousarray(ids, dtype=np.uint32))

    def __eq__(self, other):
        return isinstance(other, BatchIDs) and np.array_equal(self.ids, other.ids)


FedMessage = Union[QueryQ, QVector, FedQVector, BatchIDs, SharedTarget]
_FLOAT_TYPES = {TAG_Q_VECTOR: QVector, TAG_FED_Q_VECTOR: FedQVector,
                TAG_SHARED_TARGET: SharedTarget}


def payload_length(msg) -> int:
    if isinstance(msg, QueryQ):
        return 0
    if isinstance(msg, BatchIDs):
        return int(msg.ids.size)
    return int(msg.values.size)


def encode(msg) -> bytes:
    if isinstance(msg, QueryQ):
        return _RECORD.pack(TAG_QUERY_Q, 0)
    if isinstance(msg, BatchIDs):
        return _RECORD.pack(TAG_BATCH_IDS, msg.ids.size) + msg.ids.astype("<u4").tobytes()
    if isinstance(msg, (QVector, FedQVector, SharedTarget)):
        return _RECORD.pack(msg.tag, msg.values.size) + msg.values.astype("<f8").tobytes()
    raise ContractViolation(f"{type(msg).__name__} is not part of the message vocabulary")


def decode(blob: bytes, offset: int = 0) -> Tuple[object, int]:
    """Decode one record starting at ``offset``; returns (message, next offset)."""
    if len(blob) - offset < _RECORD.size:
        raise ContractViolation("truncated message record")
    tag, count = _RECORD.unpack_from(blob, offset)
    start = offset + _RECORD.size
    if tag == TAG_QUERY_Q:
        if count:
            raise ContractViolation("QueryQ carries no payload")
        return QueryQ(), start
    if tag == TAG_BATCH_IDS:
        end = start + 4 * count
        if end > len(blob):
            raise ContractViolation("truncated BatchIDs payload")
        return BatchIDs(np.frombuffer(blob[start:end], dtype="<u4").astype(np.uint32)), end
    if tag in _FLOAT_TYPES:
        end = start + 8 * count
        if end > len(blob):
            raise ContractViolation("truncated float payload")
        values = np.frombuffer(blob[start:end], dtype="<f8").astype(np.float64)
        return _FLOAT_TYPES[tag](values), end
    raise ContractViolation(f"unknown message tag {tag}")


def encode_many(msgs: Sequence) -> bytes:
    return b"".join(encode(m) for m in msgs)


def decode_many(blob: bytes) -> List[object]:
    out, pos = [], 0
    while pos < len(blob):
        msg, pos = decode(blob, pos)
        out.append(msg)
    return out


@dataclass
class LogEntry:
    round: int
    direction: str
    tag: int
    length: int

    def line(self):
        return f"{self.round}\t{self.direction}\t{TAG_NAMES[self.tag]}\t{self.length}"


@dataclass
class MessageLog:
    """Counts every message; keeps full entries when ``keep`` is set."""

    keep: bool = False
    round: int = 0
    counts: Counter = field(default_factory=Counter)
    entries: List[LogEntry] = field(default_factory=list)
    # optional audit hook, called with (direction, message)
    inspect: Optional[Callable] = None

    def record(self, direction: str, msg):
        self.counts[msg.tag] += 1
        if self.keep:
            self.entries.append(LogEntry(self.round, direction, msg.tag, payload_length(msg)))
        if self.inspect is not None:
            self.inspect(direction, msg)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write("round\tdirection\ttag\tlength\n")
            for e in self.entries:
                fh.write(e.line() + "\n")


class Channel:
    """Request/reply contract between the server and one platform agent."""

    def request(self, msgs: Sequence) -> List[object]:
        raise NotImplementedError


class InProcessChannel(Channel):
    """Delivers to a local endpoint through the wire encoding.

    ``endpoint`` exposes ``handle(list_of_messages) -> list_of_messages``.
    """

    def __init__(self, endpoint, name: str, log: Optional[MessageLog] = None):
        self.endpoint = endpoint
        self.name = name
        self.log = log if log is not None else MessageLog()

    def request(self, msgs):
        inbound = decode_many(encode_many(msgs))
        for m in inbound:
            self.log.record(f"fed->{self.name}", m)
        replies = self.endpoint.handle(inbound)
        outbound = decode_many(encode_many(replies))
        for m in outbound:
            self.log.record(f"{self.name}->fed", m)
        return outbound
