"""Binary dataset (NBMD) and checkpoint (NBMC) files.

Layout of both: 4-byte magic, u32 LE format version, u64 LE header length,
UTF-8 JSON header, then a blob of LE float64 values.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .geom import FIELDS, PARAM_NAMES, DesignParams, GridSpec
from .model import NbmConfig, NbmModel, Normalization
from .refsolver import FiberState, Trajectory

DATASET_MAGIC = b"NBMD"
CHECKPOINT_MAGIC = b"NBMC"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1

_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """Malformed, truncated or version-mismatched artifact file."""


def _pack(magic: bytes, version: int, header: dict, blob: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<IQ", version, len(head)) + head + blob


def _unpack(data: bytes, magic: bytes, version: int) -> tuple[dict, memoryview]:
    if len(data) < 16 or data[:4] != magic:
        raise FormatError(f"not a {magic.decode()} file")
    found, n = struct.unpack_from("<IQ", data, 4)
    if found != version:
        raise FormatError(f"{magic.decode()} version {found} is not supported (expected {version})")
    if 16 + n > len(data):
        raise FormatError("header length exceeds file size")
    try:
        header = json.loads(bytes(data[16 : 16 + n]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from exc
    blob = memoryview(data)[16 + n :]
    if len(blob) % 8:
        raise FormatError("payload is not a whole number of float64 values")
    return header, blob


def _floats(blob: memoryview) -> np.ndarray:
    return np.frombuffer(blob, dtype=_F64).astype(np.float64)


class _Reader:
    def __init__(self, values: np.ndarray):
        self.values = values
        self.pos = 0

    def take(self, n: int) -> np.ndarray:
        if self.pos + n > self.values.size:
            raise FormatError("payload shorter than the header declares")
        out = self.values[self.pos : self.pos + n].copy()
        self.pos += n
        return out

    def done(self) -> None:
        if self.pos != self.values.size:
            raise FormatError(f"{self.values.size - self.pos} trailing values after the declared payload")


# --------------------------------------------------------------------------- datasets


def dataset_bytes(ds) -> bytes:
    from .train import Dataset

    assert isinstance(ds, Dataset)
    cases, chunks = [], []
    for c in ds.cases:
        traj = c.trajectory
        sizes = {f: int(traj.states[0].values[f].size) for f in FIELDS}
        cases.append({"split": c.split, "cloud_seed": c.cloud_seed, "n_states": len(traj), "sizes": sizes})
        chunks.append(c.params.to_array())
        for s in traj.states:
            for f in FIELDS:
                chunks.append(s.values[f])
    header = {
        "kind": "cells",
        "grid": [ds.grid.nx, ds.grid.ny],
        "fields": list(FIELDS),
        "params": list(PARAM_NAMES),
        "bounds": {k: list(v) for k, v in ds.bounds.items()},
        "n_cases": len(ds.cases),
        "train_horizon": ds.train_horizon,
        "test_horizon": ds.test_horizon,
        "seed": ds.seed,
        "dt": ds.dt,
        "cloud_size": ds.cloud_size,
        "resampled": ds.resampled,
        "cases": cases,
    }
    blob = np.concatenate(chunks).astype(_F64).tobytes() if chunks else b""
    return _pack(DATASET_MAGIC, DATASET_VERSION, header, blob)


def dataset_from_bytes(data: bytes):
    try:
        return _dataset_from_bytes(data)
    except (KeyError, TypeError, IndexError) as exc:
        raise FormatError(f"header is missing or mistypes {exc}") from exc


def _dataset_from_bytes(data: bytes):
    from .train import Case, Dataset

    header, blob = _unpack(data, DATASET_MAGIC, DATASET_VERSION)
    if header.get("kind") != "cells":
        raise FormatError(f"expected a cell dataset, found kind {header.get('kind')!r}")
    _check_fields(header)
    grid = GridSpec(*header["grid"])
    rd = _Reader(_floats(blob))
    cases = []
    if len(header["cases"]) != header["n_cases"]:
        raise FormatError("case count does not match case table")
    for meta in header["cases"]:
        params = DesignParams.from_array(rd.take(len(PARAM_NAMES)))
        states = []
        for t in range(meta["n_states"]):
            states.append(FiberState({f: rd.take(meta["sizes"][f]) for f in FIELDS}, t))
        cases.append(Case(params, int(meta["cloud_seed"]), Trajectory(params, grid, header["dt"], states), meta["split"]))
    rd.done()
    return Dataset(
        cases, grid, header["dt"], header["train_horizon"], header["test_horizon"], header["seed"],
        header["cloud_size"], {k: tuple(v) for k, v in header["bounds"].items()}, header["resampled"],
    )


def _check_fields(header: dict) -> None:
    if tuple(header.get("fields", ())) != FIELDS or tuple(header.get("params", ())) != PARAM_NAMES:
        raise FormatError("field or parameter declaration does not match this build")


def save_dataset(ds, path) -> Path:
    return _write(path, dataset_bytes(ds))


def load_dataset(path):
    return dataset_from_bytes(_read(path))


# --------------------------------------------------------------------------- pack datasets


def pack_cases_bytes(cases, grid: GridSpec, dt: float, meta: dict | None = None) -> bytes:
    table, chunks = [], []
    for c in cases:
        n = c.config.n_cells
        table.append({
            "split": c.split,
            "n_cells": n,
            "n_states": len(c.states),
            "cloud_seeds": list(c.cloud_seeds),
            "total_current": c.config.total_current,
            "conductance": c.config.conductance,
            "sizes": [{f: int(c.states[0].cells[k].values[f].size) for f in FIELDS} for k in range(n)],
        })
        for p in c.config.cells:
            chunks.append(p.to_array())
        for s in c.states:
            chunks.append(np.array([s.v_shared]))
            chunks.append(np.asarray(s.currents, dtype=np.float64))
            for cell in s.cells:
                for f in FIELDS:
                    chunks.append(cell.values[f])
    header = {
        "kind": "pack",
        "grid": [grid.nx, grid.ny],
        "fields": list(FIELDS),
        "params": list(PARAM_NAMES),
        "dt": dt,
        "n_cases": len(cases),
        "cases": table,
        "meta": meta or {},
    }
    blob = np.concatenate(chunks).astype(_F64).tobytes() if chunks else b""
    return _pack(DATASET_MAGIC, DATASET_VERSION, header, blob)


def pack_cases_from_bytes(data: bytes):
    try:
        return _pack_cases_from_bytes(data)
    except (KeyError, TypeError, IndexError) as exc:
        raise FormatError(f"header is missing or mistypes {exc}") from exc


def _pack_cases_from_bytes(data: bytes):
    from .pack import PackCase, PackConfig, PackState

    header, blob = _unpack(data, DATASET_MAGIC, DATASET_VERSION)
    if header.get("kind") != "pack":
        raise FormatError(f"expected a pack dataset, found kind {header.get('kind')!r}")
    _check_fields(header)
    rd = _Reader(_floats(blob))
    out = []
    for meta in header["cases"]:
        n = meta["n_cells"]
        cells = tuple(DesignParams.from_array(rd.take(len(PARAM_NAMES))) for _ in range(n))
        config = PackConfig(cells, meta["total_current"], meta["conductance"])
        states = []
        for t in range(meta["n_states"]):
            v = float(rd.take(1)[0])
            currents = rd.take(n)
            fs = [FiberState({f: rd.take(meta["sizes"][k][f]) for f in FIELDS}, t) for k in range(n)]
            states.append(PackState(fs, v, currents))
        out.append(PackCase(config, [int(s) for s in meta["cloud_seeds"]], states, meta["split"]))
    rd.done()
    return out, GridSpec(*header["grid"]), header["dt"], header["meta"]


# --------------------------------------------------------------------------- checkpoints


def checkpoint_bytes(model: NbmModel, extra: dict | None = None) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name in model.params.names():
        v = np.ascontiguousarray(model.params[name].value, dtype=_F64)
        manifest.append({"name": name, "shape": list(v.shape), "offset": offset, "nbytes": v.nbytes})
        offset += v.nbytes
        chunks.append(v.ravel())
    header = {
        "config": model.config.to_dict(),
        "normalization": {"mean": model.norm.mean, "scale": model.norm.scale},
        "tensors": manifest,
        "extra": extra or {},
    }
    blob = np.concatenate(chunks).astype(_F64).tobytes() if chunks else b""
    return _pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, blob)


def checkpoint_from_bytes(data: bytes) -> tuple[NbmModel, dict]:
    try:
        return _checkpoint_from_bytes(data)
    except (KeyError, TypeError, IndexError) as exc:
        raise FormatError(f"header is missing or mistypes {exc}") from exc


def _checkpoint_from_bytes(data: bytes) -> tuple[NbmModel, dict]:
    header, blob = _unpack(data, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    config = NbmConfig.from_dict(header["config"])
    norm = Normalization(dict(header["normalization"]["mean"]), dict(header["normalization"]["scale"]))
    params = ad.ParamSet()
    end = 0
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape)) if shape else 1
        if t["nbytes"] != 8 * count or t["offset"] != end:
            raise FormatError(f"tensor {t['name']}: declared layout does not match its shape")
        if t["offset"] + t["nbytes"] > len(blob):
            raise FormatError(f"tensor {t['name']} runs past the end of the file")
        arr = np.frombuffer(blob[t["offset"] : t["offset"] + t["nbytes"]], dtype=_F64).astype(np.float64)
        params.add(t["name"], arr.reshape(shape))
        end = t["offset"] + t["nbytes"]
    if end != len(blob):
        raise FormatError(f"{len(blob) - end} trailing bytes after the declared tensors")
    return NbmModel(config, params, norm), header["extra"]


def save_checkpoint(model: NbmModel, path, extra: dict | None = None) -> Path:
    return _write(path, checkpoint_bytes(model, extra))


def load_checkpoint(path) -> tuple[NbmModel, dict]:
    return checkpoint_from_bytes(_read(path))


# --------------------------------------------------------------------------- files


def _write(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def _read(path) -> bytes:
    return Path(path).read_bytes()
