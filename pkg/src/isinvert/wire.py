"""Internal-states frames, IS container files and the split-inference protocol.

ISFrame layout (little-endian)::

    "ISF1" | version u16 | layer u16 | n_tokens u32 | d_in u32 | dtype u8
    | row-major payload | CRC32(payload) u32

Split inference runs over one TCP stream of length-prefixed messages
(``type u8 | length u32 | body``). The client sends HELLO with its split
layer and width, then one IS message per input. The server answers each IS
with ACK (plus the next-token id it computed from the remaining layers) or
NACK on checksum failure. A curious server keeps every accepted frame.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import ISRecord, InternalStates, TransformerWeights, embed, forward_prefix, run_layers
from . import autodiff as ad

log = logging.getLogger(__name__)

FRAME_MAGIC = b"ISF1"
FRAME_VERSION = 1
CONTAINER_MAGIC = b"ISC1"
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
DTYPE_TAGS = {"f32": 1, "f64": 2}
_HEADER = struct.Struct("<4sHHIIB")

MSG_HELLO, MSG_HELLO_OK, MSG_HELLO_FAIL, MSG_IS, MSG_ACK, MSG_NACK, MSG_BYE = range(1, 8)


class FrameError(ValueError):
    pass


class ChecksumError(FrameError):
    pass


class HandshakeError(ConnectionError):
    pass


class ISImportError(ValueError):
    def __init__(self, message: str, frame_index: int):
        super().__init__(f"frame {frame_index}: {message}")
        self.frame_index = frame_index


# -- frames ------------------------------------------------------------

def encode_frame(h: np.ndarray, layer: int, dtype: str = "f32") -> bytes:
    h = np.asarray(h)
    if h.ndim != 2:
        raise FrameError(f"IS payload must be 2-D, got shape {h.shape}")
    tag = DTYPE_TAGS[dtype]
    payload = np.ascontiguousarray(h, dtype=DTYPES[tag]).tobytes()
    header = _HEADER.pack(FRAME_MAGIC, FRAME_VERSION, layer, h.shape[0], h.shape[1], tag)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


@dataclass
class ISFrame:
    layer: int
    h: np.ndarray
    dtype: str
    version: int = FRAME_VERSION

    @property
    def n_tokens(self) -> int:
        return self.h.shape[0]

    @property
    def d_in(self) -> int:
        return self.h.shape[1]


def frame_size(data: bytes, offset: int = 0) -> int:
    """Total byte length of the frame starting at ``offset`` (header must be present)."""
    if len(data) - offset < _HEADER.size:
        raise FrameError("truncated frame header")
    magic, _, _, n, d, tag = _HEADER.unpack_from(data, offset)
    if magic != FRAME_MAGIC:
        raise FrameError(f"bad frame magic {magic!r}")
    if tag not in DTYPES:
        raise FrameError(f"unknown dtype tag {tag}")
    return _HEADER.size + n * d * DTYPES[tag].itemsize + 4


def decode_frame(data: bytes) -> ISFrame:
    size = frame_size(data)
    if len(data) < size:
        raise FrameError("truncated frame payload")
    if len(data) > size:
        raise FrameError("trailing bytes after frame")
    _, version, layer, n, d, tag = _HEADER.unpack_from(data)
    if version != FRAME_VERSION:
        raise FrameError(f"unsupported frame version {version}")
    payload = data[_HEADER.size:size - 4]
    (crc,) = struct.unpack_from("<I", data, size - 4)
    if zlib.crc32(payload) != crc:
        raise ChecksumError("payload checksum mismatch")
    h = np.frombuffer(payload, dtype=DTYPES[tag]).reshape(n, d).astype(np.float64)
    return ISFrame(layer, h, "f32" if tag == 1 else "f64", version)


# -- containers --------------------------------------------------------

@dataclass
class ISEntry:
    frame: bytes
    meta: dict = field(default_factory=dict)

    def decode(self) -> ISFrame:
        return decode_frame(self.frame)


def record_entry(rec: ISRecord, dtype: str = "f64") -> ISEntry:
    meta = {"text": rec.text, "ids": list(rec.ids), "truncated": rec.truncated,
            "fingerprint": rec.states.model_fingerprint}
    return ISEntry(encode_frame(rec.states.h, rec.states.layer, dtype), meta)


def container_bytes(entries: Iterable[ISEntry]) -> bytes:
    entries = list(entries)
    parts = [CONTAINER_MAGIC, struct.pack("<I", len(entries))]
    for e in entries:
        meta = json.dumps(e.meta, sort_keys=True).encode("utf-8")
        parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(e.frame)), e.frame]
    return b"".join(parts)


def parse_container(data: bytes) -> list[ISEntry]:
    if data[:4] != CONTAINER_MAGIC:
        raise ISImportError("bad container magic", 0)
    if len(data) < 8:
        raise ISImportError("truncated container header", 0)
    (count,) = struct.unpack_from("<I", data, 4)
    off = 8
    out = []
    for i in range(count):
        try:
            if off + 4 > len(data):
                raise FrameError("truncated entry")
            (mlen,) = struct.unpack_from("<I", data, off)
            off += 4
            if off + mlen + 4 > len(data):
                raise FrameError("truncated entry metadata")
            meta = json.loads(data[off:off + mlen].decode("utf-8"))
            off += mlen
            (flen,) = struct.unpack_from("<I", data, off)
            off += 4
            frame = data[off:off + flen]
            if len(frame) < flen:
                raise FrameError("truncated frame")
            decode_frame(frame)
        except (FrameError, ValueError) as exc:
            raise ISImportError(str(exc), i) from exc
        off += flen
        out.append(ISEntry(frame, meta))
    return out


def export_is(entries: Iterable[ISEntry | ISRecord], path: str | Path, dtype: str = "f64") -> None:
    items = [e if isinstance(e, ISEntry) else record_entry(e, dtype) for e in entries]
    Path(path).write_bytes(container_bytes(items))


def import_is(path: str | Path) -> list[ISEntry]:
    return parse_container(Path(path).read_bytes())


def entries_to_records(entries: Sequence[ISEntry]) -> list[ISRecord]:
    out = []
    for e in entries:
        f = e.decode()
        states = InternalStates(f.h, f.layer, e.meta.get("fingerprint", ""))
        out.append(ISRecord(e.meta.get("text", ""), list(e.meta.get("ids", [])), states,
                            bool(e.meta.get("truncated", False))))
    return out


# -- message transport --------------------------------------------------

def send_msg(sock: socket.socket, kind: int, body: bytes = b"") -> None:
    sock.sendall(struct.pack("<BI", kind, len(body)) + body)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed mid-message")
        buf += chunk
    return bytes(buf)


def recv_msg(sock: socket.socket) -> tuple[int, bytes]:
    kind, length = struct.unpack("<BI", _recv_exact(sock, 5))
    return kind, _recv_exact(sock, length)


_HELLO = struct.Struct("<HHI")


class SplitServer:
    """Runs layers after ``l_split``; in curious mode keeps every accepted frame."""

    def __init__(self, weights: TransformerWeights, l_split: int, curious: bool = True,
                 store_path: str | Path | None = None):
        self.weights = weights
        self.l_split = l_split
        self.curious = curious
        self.store_path = store_path
        self.persisted: list[bytes] = []
        self._lock = threading.Lock()
        self._server: socketserver.ThreadingTCPServer | None = None

    def _continue(self, h: np.ndarray) -> int:
        cfg = self.weights.config
        out = run_layers(self.weights.tensors, cfg, h, self.l_split, cfg.n_layers)
        logits = ad.rmsnorm_row(out, self.weights.tensors["final_norm"], cfg.norm_eps) @ self.weights.tensors["lm_head"]
        return int(np.argmax(logits.data[-1]))

    def handle(self, sock: socket.socket) -> None:
        kind, body = recv_msg(sock)
        if kind != MSG_HELLO or len(body) != _HELLO.size:
            send_msg(sock, MSG_HELLO_FAIL, b"expected HELLO")
            return
        version, layer, d_in = _HELLO.unpack(body)
        if version != FRAME_VERSION or layer != self.l_split or d_in != self.weights.config.d_model:
            send_msg(sock, MSG_HELLO_FAIL, f"server speaks v{FRAME_VERSION} l={self.l_split}".encode())
            return
        send_msg(sock, MSG_HELLO_OK)
        while True:
            try:
                kind, body = recv_msg(sock)
            except ConnectionError:
                return
            if kind == MSG_BYE:
                return
            if kind != MSG_IS:
                send_msg(sock, MSG_NACK, b"unexpected message")
                continue
            try:
                frame = decode_frame(body)
                if frame.layer != self.l_split:
                    raise FrameError("layer mismatch")
            except FrameError as exc:
                log.warning("rejecting frame: %s", exc)
                send_msg(sock, MSG_NACK, str(exc).encode())
                continue
            if self.curious:
                with self._lock:
                    self.persisted.append(body)
            send_msg(sock, MSG_ACK, struct.pack("<I", self._continue(frame.h)))

    def entries(self) -> list[ISEntry]:
        with self._lock:
            return [ISEntry(f) for f in self.persisted]

    def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                outer.handle(self.request)

        socketserver.ThreadingTCPServer.allow_reuse_address = True
        self._server = socketserver.ThreadingTCPServer((host, port), Handler)
        self._server.daemon_threads = True
        threading.Thread(target=self._server.serve_forever, daemon=True).start()
        return self._server.server_address[:2]

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
        if self.store_path is not None:
            export_is(self.entries(), self.store_path)


@dataclass
class ClientReply:
    accepted: bool
    next_token: int | None
    frame: bytes


def split_client(addr: tuple[str, int], texts: Iterable[str], weights_prefix: TransformerWeights,
                 l_split: int, timeout: float = 30.0) -> list[ClientReply]:
    """Compute layer-``l_split`` states locally and stream them to a split server."""
    replies = []
    with socket.create_connection(addr, timeout=timeout) as sock:
        client_handshake(sock, l_split, weights_prefix.config.d_model)
        for text in texts:
            ids = weights_prefix.tokenizer.encode(text)[: weights_prefix.config.max_seq_len]
            h = forward_prefix(weights_prefix, embed(weights_prefix, ids), l_split).data
            frame = encode_frame(h, l_split, "f32")
            replies.append(send_frame(sock, frame))
        send_msg(sock, MSG_BYE)
    return replies


def send_frame(sock: socket.socket, frame: bytes) -> ClientReply:
    send_msg(sock, MSG_IS, frame)
    kind, body = recv_msg(sock)
    if kind == MSG_ACK:
        return ClientReply(True, struct.unpack("<I", body)[0], frame)
    return ClientReply(False, None, frame)


def client_handshake(sock: socket.socket, l_split: int, d_in: int, version: int = FRAME_VERSION) -> None:
    send_msg(sock, MSG_HELLO, _HELLO.pack(version, l_split, d_in))
    kind, body = recv_msg(sock)
    if kind != MSG_HELLO_OK:
        raise HandshakeError(body.decode("utf-8", errors="replace") or "handshake refused")
