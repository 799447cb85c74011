import struct

import numpy as np
import pytest

from cskn import modelio
from cskn import training as tr
from cskn.features import ConvSpec, DenseSpec, InitSchedule, NetworkArchitecture, Variant


@pytest.fixture(params=list(Variant))
def state(request):
    v = request.param
    if v is Variant.DSKN:
        arch = NetworkArchitecture((4,), (DenseSpec(3), DenseSpec(2)), v, 2)
    else:
        arch = NetworkArchitecture((5, 5, 1), (ConvSpec(2, (2, 2)), ConvSpec(3, (2, 2)), DenseSpec(4)), v, 3)
    s = tr.ModelState.fresh(arch, InitSchedule((1.0,) * arch.depth, 3))
    s.W = np.random.default_rng(0).normal(size=s.W.shape)
    s.step_count = 17
    return s


def test_roundtrip_bitwise(tmp_path, state):
    p = tmp_path / "m.cskn"
    modelio.save_model(p, state, {"note": "x"})
    back, meta = modelio.load_model(p)
    assert meta == {"note": "x"}
    assert back.arch == state.arch
    assert back.step_count == 17
    assert back.W.tobytes() == state.W.tobytes()
    for a, b in zip(state.layer_params, back.layer_params):
        for name in ("omega", "omega_prime", "filters", "filters_prime", "phase"):
            x, y = getattr(a, name, None), getattr(b, name, None)
            assert (x is None) == (y is None)
            if x is not None:
                assert x.tobytes() == y.tobytes()
        assert (a.activation, a.tied) == (b.activation, b.tied)


def test_layout(tmp_path, state):
    p = tmp_path / "m.cskn"
    modelio.save_model(p, state)
    raw = p.read_bytes()
    assert raw[:4] == b"CSKN"
    version, n = struct.unpack("<II", raw[4:12])
    assert version == 1
    payload = raw[12 + n:]
    first = state.layer_params[0]
    bank = first.filters if hasattr(first, "filters") else first.omega
    assert payload[:bank.size * 8] == bank.astype("<f8").tobytes()
    assert payload[-state.W.size * 8:] == state.W.astype("<f8").tobytes()


def test_rejects_bad_files(tmp_path, state):
    p = tmp_path / "m.cskn"
    modelio.save_model(p, state)
    raw = p.read_bytes()
    cases = {
        "magic": b"XXXX" + raw[4:],
        "version": raw[:4] + struct.pack("<I", 2) + raw[8:],
        "truncated": raw[:-8],
        "trailing": raw + b"\0" * 8,
        "short": raw[:6],
    }
    for name, blob in cases.items():
        q = tmp_path / f"{name}.cskn"
        q.write_bytes(blob)
        with pytest.raises(modelio.ModelFormatError):
            modelio.load_model(q)
