import numpy as np
import pytest

from rflscm.checkpoint import load_container, save_container
from rflscm.errors import ConfigError


def test_container_round_trip(tmp_path, rng):
    arrays = [("a", rng.normal(size=(3, 4))), ("b", np.arange(5)), ("s", np.float32(2.5))]
    save_container(tmp_path / "c", {"iteration": 3, "k": [1, 2]}, arrays)
    meta, got = load_container(tmp_path / "c")
    assert meta == {"iteration": 3, "k": [1, 2]}
    assert list(got) == ["a", "b", "s"]
    assert got["a"].dtype == np.float32 and got["s"].shape == ()
    assert np.array_equal(got["a"], arrays[0][1].astype(np.float32))


def test_container_is_byte_deterministic(tmp_path):
    for name in ("x", "y"):
        save_container(tmp_path / name, {"b": 1, "a": 2}, [("w", np.ones(3))])
    assert (tmp_path / "x").read_bytes() == (tmp_path / "y").read_bytes()


def test_corrupt_containers(tmp_path):
    p = tmp_path / "c"
    p.write_bytes(b"NOTMAGIC" + bytes(16))
    with pytest.raises(ConfigError, match="not an rflscm"):
        load_container(p)
    save_container(p, {}, [("w", np.ones(3))])
    p.write_bytes(p.read_bytes() + b"\0")
    with pytest.raises(ConfigError, match="trailing"):
        load_container(p)
    data = bytearray(p.read_bytes()[:-1])
    data[8] = 9
    p.write_bytes(bytes(data))
    with pytest.raises(ConfigError, match="version"):
        load_container(p)
