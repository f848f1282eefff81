import json
import struct

import numpy as np
import pytest

from bundlemap.geom import FIELDS, PARAM_NAMES, GridSpec
from bundlemap.io import (
    FormatError,
    checkpoint_bytes,
    checkpoint_from_bytes,
    dataset_bytes,
    dataset_from_bytes,
    load_checkpoint,
    load_dataset,
    pack_cases_bytes,
    pack_cases_from_bytes,
    save_checkpoint,
    save_dataset,
)
from bundlemap.model import NbmConfig, NbmModel
from bundlemap.pack import generate_pack_cases
from bundlemap.train import fit_normalization


def _header(data: bytes) -> dict:
    (n,) = struct.unpack_from("<Q", data, 8)
    return json.loads(data[16 : 16 + n])


def _with_header(data: bytes, header: dict) -> bytes:
    (n,) = struct.unpack_from("<Q", data, 8)
    head = json.dumps(header, sort_keys=True).encode()
    return data[:8] + struct.pack("<Q", len(head)) + head + data[16 + n :]


def test_dataset_layout(tiny_dataset):
    data = dataset_bytes(tiny_dataset)
    assert data[:4] == b"NBMD"
    assert struct.unpack_from("<I", data, 4)[0] == 1
    h = _header(data)
    assert h["n_cases"] == len(tiny_dataset.cases)
    assert h["fields"] == list(FIELDS)
    assert h["grid"] == [6, 6]
    # design params then every state, field by field
    per_case = [len(PARAM_NAMES) + c["n_states"] * sum(c["sizes"].values()) for c in h["cases"]]
    (n,) = struct.unpack_from("<Q", data, 8)
    assert len(data) - 16 - n == 8 * sum(per_case)


def test_dataset_round_trip_is_bit_exact(tiny_dataset, tmp_path):
    p = save_dataset(tiny_dataset, tmp_path / "d.nbmd")
    back = load_dataset(p)
    assert dataset_bytes(back) == p.read_bytes()
    assert back.grid == tiny_dataset.grid and back.seed == tiny_dataset.seed
    for a, b in zip(back.cases, tiny_dataset.cases):
        assert a.params == b.params and a.split == b.split and a.cloud_seed == b.cloud_seed
        for sa, sb in zip(a.trajectory.states, b.trajectory.states):
            for f in FIELDS:
                np.testing.assert_array_equal(sa.values[f], sb.values[f])


def test_normalization_reproduces_from_saved_dataset(tiny_dataset):
    back = dataset_from_bytes(dataset_bytes(tiny_dataset))
    assert fit_normalization(back) == fit_normalization(tiny_dataset)


def test_checkpoint_round_trip_is_bit_exact(tiny_model, tmp_path):
    p = save_checkpoint(tiny_model, tmp_path / "m.nbmc", {"note": "x"})
    model, extra = load_checkpoint(p)
    assert extra == {"note": "x"}
    assert model.config == tiny_model.config
    assert model.norm == tiny_model.norm
    assert model.params.names() == tiny_model.params.names()
    for name in model.params.names():
        np.testing.assert_array_equal(model.params[name].value, tiny_model.params[name].value)
    assert checkpoint_bytes(model, extra) == p.read_bytes()
    assert p.read_bytes()[:4] == b"NBMC"


def test_pack_cases_round_trip():
    grid = GridSpec(6, 6)
    cases, _ = generate_pack_cases(2, 2, grid, seed=1)
    data = pack_cases_bytes(cases, grid, 0.01, {"a": 1})
    back, g, dt, meta = pack_cases_from_bytes(data)
    assert (g, dt, meta) == (grid, 0.01, {"a": 1})
    assert pack_cases_bytes(back, g, dt, meta) == data
    assert [c.config for c in back] == [c.config for c in cases]


def test_wrong_magic_and_kind(tiny_dataset, tiny_model):
    d = dataset_bytes(tiny_dataset)
    with pytest.raises(FormatError, match="not a NBMC"):
        checkpoint_from_bytes(d)
    with pytest.raises(FormatError, match="not a NBMD"):
        dataset_from_bytes(checkpoint_bytes(tiny_model))
    with pytest.raises(FormatError, match="pack dataset"):
        pack_cases_from_bytes(d)
    with pytest.raises(FormatError):
        dataset_from_bytes(b"NBM")


def test_version_mismatch_fails_loudly(tiny_dataset, tiny_model):
    for data, load in ((dataset_bytes(tiny_dataset), dataset_from_bytes), (checkpoint_bytes(tiny_model), checkpoint_from_bytes)):
        bad = data[:4] + struct.pack("<I", 2) + data[8:]
        with pytest.raises(FormatError, match="version 2"):
            load(bad)


def test_truncation_and_padding(tiny_dataset, tiny_model):
    d = dataset_bytes(tiny_dataset)
    with pytest.raises(FormatError, match="whole number"):
        dataset_from_bytes(d[:-3])
    with pytest.raises(FormatError, match="shorter"):
        dataset_from_bytes(d[:-8])
    with pytest.raises(FormatError, match="trailing"):
        dataset_from_bytes(d + bytes(8))
    c = checkpoint_bytes(tiny_model)
    with pytest.raises(FormatError):
        checkpoint_from_bytes(c[:-8])
    with pytest.raises(FormatError, match="trailing"):
        checkpoint_from_bytes(c + bytes(8))


def test_header_corruption(tiny_dataset, tiny_model):
    d = dataset_bytes(tiny_dataset)
    with pytest.raises(FormatError, match="exceeds"):
        dataset_from_bytes(d[:8] + struct.pack("<Q", 10**9) + d[16:])
    (n,) = struct.unpack_from("<Q", d, 8)
    with pytest.raises(FormatError, match="corrupt header"):
        dataset_from_bytes(d[:16] + b"{" * n + d[16 + n :])
    h = _header(d)
    h["fields"] = ["phi", "T", "c"]
    with pytest.raises(FormatError):
        dataset_from_bytes(_with_header(d, h))
    h = _header(d)
    h["n_cases"] += 1
    with pytest.raises(FormatError, match="case count"):
        dataset_from_bytes(_with_header(d, h))
    h = _header(d)
    del h["cases"]
    with pytest.raises(FormatError):
        dataset_from_bytes(_with_header(d, h))
    c = checkpoint_bytes(tiny_model)
    h = _header(c)
    h["tensors"][0]["shape"] = [h["tensors"][0]["shape"][0] + 1] + h["tensors"][0]["shape"][1:]
    with pytest.raises(FormatError, match="layout"):
        checkpoint_from_bytes(_with_header(c, h))


def test_save_leaves_no_temp_file(tmp_path):
    model = NbmModel.initialize(NbmConfig(d_geo=4, d_field=4, d_key=4, geo_hidden=4, enc_hidden=4, dec_hidden=4), seed=0)
    p = save_checkpoint(model, tmp_path / "sub" / "m.nbmc")
    assert sorted(x.name for x in p.parent.iterdir()) == ["m.nbmc"]
