"""Replay bank over a local socket.

Frames are ``length (u32, big-endian) | opcode (u8) | payload`` where ``length``
counts the opcode byte plus the payload. Records are ``(id: u64, score: f64)``
packed big-endian.

==========  =====================================  ===================================
opcode      request payload                        reply payload
==========  =====================================  ===================================
INSERT = 1  records                                u64 number inserted
SAMPLE = 2  u32 k, u64 seed, f64 temperature       k records (the sampled entries)
STATS  = 3  empty                                  u64 inserted, sampled, live, unconsumed
ERROR  = 0  (reply only)                           UTF-8 message
==========  =====================================  ===================================
"""

from __future__ import annotations

import os
import socket
import socketserver
import struct
import threading

import numpy as np

from .replay import BankError, MemoryBank, SpiController

INSERT, SAMPLE, STATS, ERROR = 1, 2, 3, 0
RECORD = struct.Struct(">Qd")
SAMPLE_REQ = struct.Struct(">IQd")
STATS_REPLY = struct.Struct(">QQQQ")
MAX_FRAME = 64 << 20


class ProtocolError(RuntimeError):
    pass


class RemoteError(RuntimeError):
    """The server answered with an ERROR frame."""


def pack_records(ids, scores) -> bytes:
    ids = np.asarray(ids, dtype=">u8")
    scores = np.asarray(scores, dtype=">f8")
    if ids.shape != scores.shape:
        raise ValueError(f"{ids.size} ids for {scores.size} scores")
    out = np.empty(ids.size, dtype=[("id", ">u8"), ("score", ">f8")])
    out["id"], out["score"] = ids, scores
    return out.tobytes()


def unpack_records(payload: bytes):
    if len(payload) % RECORD.size:
        raise ProtocolError(f"record payload of {len(payload)} bytes is not a multiple of {RECORD.size}")
    arr = np.frombuffer(payload, dtype=[("id", ">u8"), ("score", ">f8")])
    return arr["id"].astype(np.int64), arr["score"].astype(np.float64)


def encode_frame(opcode: int, payload: bytes = b"") -> bytes:
    return struct.pack(">IB", len(payload) + 1, opcode) + payload


def _recv_exact(sock, n) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf += chunk
    return bytes(buf)


def read_frame(sock):
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    if length < 1 or length > MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    body = _recv_exact(sock, length)
    return body[0], body[1:]


class ReplayService:
    """Request handling independent of the transport, so it can be tested directly."""

    def __init__(self, bank: MemoryBank | None = None, controller: SpiController | None = None):
        self.bank = bank or MemoryBank()
        self.controller = controller

    def handle(self, opcode: int, payload: bytes):
        try:
            if opcode == INSERT:
                ids, scores = unpack_records(payload)
                self.bank.insert(ids, scores)
                return INSERT, struct.pack(">Q", len(ids))
            if opcode == SAMPLE:
                if len(payload) != SAMPLE_REQ.size:
                    raise ProtocolError(f"SAMPLE payload must be {SAMPLE_REQ.size} bytes")
                k, seed, temperature = SAMPLE_REQ.unpack(payload)
                with self.bank.lock:
                    s = self.bank.stats()
                    if self.controller and not self.controller.can_sample(
                            k, s["inserted_total"], s["sampled_total"]):
                        raise BankError("throttled: samples-per-insert limit reached")
                    ids = self.bank.sample(k, np.random.default_rng(seed), temperature)
                    scores = [self.bank.get(int(i)).score for i in ids]
                return SAMPLE, pack_records(ids, scores)
            if opcode == STATS:
                s = self.bank.stats()
                return STATS, STATS_REPLY.pack(s["inserted_total"], s["sampled_total"], s["live"],
                                               s["unconsumed"])
            raise ProtocolError(f"unknown opcode {opcode}")
        except (BankError, ProtocolError, ValueError) as err:
            return ERROR, str(err).encode()


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        while True:
            try:
                opcode, payload = read_frame(self.request)
            except (ConnectionError, OSError):
                return
            except ProtocolError as err:
                self.request.sendall(encode_frame(ERROR, str(err).encode()))
                return
            self.request.sendall(encode_frame(*self.server.service.handle(opcode, payload)))


class _UnixServer(socketserver.ThreadingMixIn, socketserver.UnixStreamServer):
    daemon_threads = True


class _TcpServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    daemon_threads = True
    allow_reuse_address = True


class ReplayServer:
    """Serves a bank on a Unix socket path, or on ``("127.0.0.1", port)``."""

    def __init__(self, address, service: ReplayService | None = None):
        self.service = service or ReplayService()
        if isinstance(address, (str, os.PathLike)):
            self._server = _UnixServer(str(address), _Handler)
        else:
            self._server = _TcpServer(tuple(address), _Handler)
        self._server.service = self.service
        self.address = self._server.server_address
        self._thread = None

    def start(self):
        self._thread = threading.Thread(target=self._server.serve_forever, name="replay-server",
                                        daemon=True)
        self._thread.start()
        return self

    def close(self):
        self._server.shutdown()
        self._server.server_close()
        if isinstance(self.address, str) and os.path.exists(self.address):
            os.unlink(self.address)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


class ReplayClient:
    def __init__(self, address, timeout: float = 10.0):
        family = socket.AF_UNIX if isinstance(address, (str, os.PathLike)) else socket.AF_INET
        self.sock = socket.socket(family, socket.SOCK_STREAM)
        self.sock.settimeout(timeout)
        self.sock.connect(str(address) if family == socket.AF_UNIX else tuple(address))

    def _call(self, opcode, payload=b""):
        self.sock.sendall(encode_frame(opcode, payload))
        op, body = read_frame(self.sock)
        if op == ERROR:
            raise RemoteError(body.decode(errors="replace"))
        if op != opcode:
            raise ProtocolError(f"reply opcode {op} for request {opcode}")
        return body

    def insert(self, ids, scores) -> int:
        return struct.unpack(">Q", self._call(INSERT, pack_records(ids, scores)))[0]

    def sample(self, k: int, seed: int, temperature: float = 1.0):
        return unpack_records(self._call(SAMPLE, SAMPLE_REQ.pack(k, seed, temperature)))

    def stats(self) -> dict:
        vals = STATS_REPLY.unpack(self._call(STATS))
        return dict(zip(("inserted_total", "sampled_total", "live", "unconsumed"), vals))

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
