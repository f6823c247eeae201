import struct

import numpy as np
import pytest

from actsel import service
from actsel.replay import MemoryBank, SpiController
from actsel.service import ReplayClient, ReplayServer, ReplayService


def test_record_encoding():
    raw = service.pack_records([1, 2**40], [0.5, -1.0])
    assert raw[:16] == struct.pack(">Qd", 1, 0.5)
    ids, scores = service.unpack_records(raw)
    assert ids.tolist() == [1, 2**40] and scores.tolist() == [0.5, -1.0]
    with pytest.raises(service.ProtocolError):
        service.unpack_records(raw[:-1])


def test_frame_length_counts_opcode():
    assert service.encode_frame(service.STATS) == b"\x00\x00\x00\x01\x03"


def test_handler_matches_local_bank():
    svc = ReplayService()
    local = MemoryBank()
    ids, scores = np.arange(20), np.linspace(-2, 2, 20)
    svc.handle(service.INSERT, service.pack_records(ids, scores))
    local.insert(ids, scores)
    op, body = svc.handle(service.SAMPLE, service.SAMPLE_REQ.pack(5, 42, 1.0))
    assert op == service.SAMPLE
    got, _ = service.unpack_records(body)
    np.testing.assert_array_equal(got, local.sample(5, np.random.default_rng(42)))


def test_errors_are_replies():
    svc = ReplayService()
    assert svc.handle(99, b"")[0] == service.ERROR
    assert svc.handle(service.SAMPLE, b"\x00")[0] == service.ERROR
    op, msg = svc.handle(service.SAMPLE, service.SAMPLE_REQ.pack(1, 0, 1.0))
    assert op == service.ERROR and msg


def test_throttle():
    svc = ReplayService(controller=SpiController(0.5))
    svc.handle(service.INSERT, service.pack_records(range(10), np.zeros(10)))
    assert svc.handle(service.SAMPLE, service.SAMPLE_REQ.pack(5, 0, 1.0))[0] == service.SAMPLE
    op, msg = svc.handle(service.SAMPLE, service.SAMPLE_REQ.pack(1, 0, 1.0))
    assert op == service.ERROR and b"throttled" in msg


@pytest.mark.parametrize("kind", ["unix", "tcp"])
def test_socket_round_trip(tmp_path, kind):
    address = str(tmp_path / "bank.sock") if kind == "unix" else ("127.0.0.1", 0)
    with ReplayServer(address) as server:
        with ReplayClient(server.address) as client:
            assert client.insert([3, 4, 5], [0.0, 1.0, 2.0]) == 3
            ids, scores = client.sample(2, seed=1)
            assert len(set(ids.tolist())) == 2
            assert client.stats() == {"inserted_total": 3, "sampled_total": 2, "live": 3,
                                      "unconsumed": 1}
            with pytest.raises(service.RemoteError, match="already live"):
                client.insert([3], [0.0])
            # the connection survives an error reply
            assert client.stats()["inserted_total"] == 3
