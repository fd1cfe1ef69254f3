import json
import struct

import numpy as np
import pytest

from netfactory import random_network
from subbyte_har.engine import compile_model, integer_forward
from subbyte_har.errors import FormatError
from subbyte_har.model_space import ArchConfig
from subbyte_har.modelfile import (
    compiled_from_bytes,
    compiled_from_json,
    compiled_to_bytes,
    compiled_to_json,
    dump_json,
    load_compiled,
    load_network,
    save_compiled,
    save_network,
)
from subbyte_har.nas import attach_sites
from subbyte_har.network import Network


@pytest.fixture(scope="module", params=[(8, 8), (4, 2), (1, 1), (2, 1)])
def compiled(request):
    rng = np.random.default_rng(sum(request.param))
    m = random_network(rng, *request.param)
    return m, compile_model(m, (0.25, 0.5, 1.0)), rng.normal(size=(8, 2, 16))


def test_binary_roundtrip(compiled, tmp_path):
    _, cm, x = compiled
    n = save_compiled(cm, tmp_path / "m.sbh", adaptive=(0.5, 0.01, 1.0))
    assert n == (tmp_path / "m.sbh").stat().st_size
    back, adaptive = load_compiled(tmp_path / "m.sbh")
    assert adaptive == (0.5, 0.01, 1.0)
    assert compiled_to_bytes(back, adaptive) == (tmp_path / "m.sbh").read_bytes()
    codes = cm.quantize_input(x)
    for w in cm.widths:
        assert np.array_equal(integer_forward(back, codes, w), integer_forward(cm, codes, w))


def test_json_is_lossless(compiled):
    _, cm, _ = compiled
    raw = compiled_to_bytes(cm)
    doc = json.loads(json.dumps(compiled_to_json(cm)))
    back, adaptive = compiled_from_json(doc)
    assert adaptive is None
    assert compiled_to_bytes(back) == raw


def test_dump_json(compiled, tmp_path):
    _, cm, _ = compiled
    save_compiled(cm, tmp_path / "m.sbh")
    doc = json.loads(dump_json(tmp_path / "m.sbh"))
    assert doc["format"] == "SBH1" and doc["arch_digest"] == cm.arch.digest
    assert len(doc["layers"]) == len(cm.layers)


def _raw():
    return compiled_to_bytes(compile_model(random_network(np.random.default_rng(9), 4, 4)))


def test_bad_magic():
    with pytest.raises(FormatError, match="magic"):
        compiled_from_bytes(b"XXXX" + _raw()[4:])


def test_bad_version():
    raw = _raw()
    with pytest.raises(FormatError, match="version"):
        compiled_from_bytes(raw[:4] + struct.pack("<H", 7) + raw[6:])


def test_truncated():
    raw = _raw()
    for cut in (3, 20, len(raw) // 2, len(raw) - 1):
        with pytest.raises(FormatError):
            compiled_from_bytes(raw[:cut])


def test_trailing_bytes():
    with pytest.raises(FormatError, match="trailing"):
        compiled_from_bytes(_raw() + b"\0")


def test_digest_mismatch():
    raw = bytearray(_raw())
    raw[8] ^= 0xFF
    with pytest.raises(FormatError, match="digest"):
        compiled_from_bytes(bytes(raw))


def test_missing_file(tmp_path):
    with pytest.raises(FormatError):
        load_compiled(tmp_path / "none.sbh")


def test_malformed_json():
    with pytest.raises(FormatError):
        compiled_from_json({"arch": {}})


def test_network_roundtrip(tmp_path):
    m = random_network(np.random.default_rng(3), 4, 2)
    m.history = [{"epoch": 1, "loss": 1.0, "holdout_score": 0.5, "lr": 0.01}]
    save_network(m, tmp_path / "net.npz")
    back = load_network(tmp_path / "net.npz")
    x = np.random.default_rng(4).normal(size=(5, 2, 16))
    for w in (0.25, 0.5, 1.0):
        assert np.array_equal(back.scores(x, w), m.scores(x, w))
    assert back.history == m.history
    assert (tmp_path / "net.history.csv").exists()


def test_network_errors(tmp_path):
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(FormatError):
        load_network(tmp_path / "junk.npz")
    arch = ArchConfig("B", (4, 4), 7, (2, 2), (8,) * 3, (8,) * 2, 3, 2, 16)
    with pytest.raises(FormatError):
        save_network(attach_sites(Network(arch)), tmp_path / "mixed.npz")
