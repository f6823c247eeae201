import numpy as np
import pytest

from actsel import checkpoint, nn
from actsel.checkpoint import CheckpointError

SPEC = nn.ModelSpec((5, 7), "relu", "classifier", 3)


@pytest.fixture
def params(rng):
    return nn.init_model(SPEC, rng)


def test_round_trip(params, tmp_path):
    path = checkpoint.save(tmp_path / "c" / "p.ckpt", params, {"step": 12})
    back, meta = checkpoint.load(path)
    assert meta == {"step": 12}
    np.testing.assert_array_equal(back.flat(), params.flat())
    assert nn.same_architecture(back, params)


def test_two_tower_round_trip(rng):
    tower = nn.ModelSpec((4, 6), "tanh", "encoder", 3)
    p = nn.init_two_tower(tower, tower, rng)
    back, _ = checkpoint.loads(checkpoint.dumps(p))
    np.testing.assert_array_equal(back.flat(), p.flat())


def test_layout(params):
    raw = checkpoint.dumps(params)
    assert raw[:8] == b"ACTSELCK" and raw[8:12] == b"\x00\x00\x00\x01"
    blob = np.frombuffer(raw[-8 * params.num_params:], dtype="<f8")
    np.testing.assert_array_equal(blob, params.flat())


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"XXXXXXXX" + b[8:], "magic"),
    (lambda b: b[:8] + b"\x00\x00\x00\x02" + b[12:], "version"),
    (lambda b: b[:12] + bytes([b[12] ^ 1]) + b[13:], "digest"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\x00", "trailing"),
])
def test_corruption(params, mutate, match):
    with pytest.raises(CheckpointError, match=match):
        checkpoint.loads(mutate(checkpoint.dumps(params)))


def test_check_compatible(params):
    checkpoint.check_compatible(params, SPEC)
    with pytest.raises(nn.ConfigurationError):
        checkpoint.check_compatible(params, nn.ModelSpec((5, 8), "relu", "classifier", 3))
