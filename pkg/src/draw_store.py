"""Persistence - binary draw logs, tables with a config-echo header, and dataset CSVs"""

import io
import json
import logging
import re
import struct
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .config import SCHEMA_VERSION
from .core_model import Dataset
from .errors import SchemaError

logger = logging.getLogger(__name__)

MAGIC = b"PSC1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIIIIII")
_LENGTH = struct.Struct("<I")

# Record layout of one retained draw, in order
FIELDS = (
    "rho",
    "sigma_s2",
    "alpha",
    "xi",
    "v",
    "pi",
    "z",
    "kappa",
    "delta",
    "gamma",
    "zeta",
    "sigma2",
    "aug",
    "rho_accepted",
    "log_target",
)


def field_shapes(dims: dict) -> dict:
    """Per-draw array shape of every field for dimensions n, m, p, c, j, j2, q"""
    return {
        "rho": (),
        "sigma_s2": (),
        "alpha": (dims["p"] + 1,),
        "xi": (dims["c"], dims["j"]),
        "v": (dims["c"],),
        "pi": (dims["c"],),
        "z": (dims["n"],),
        "kappa": (),
        "delta": (dims["j2"],),
        "gamma": (dims["p"],),
        "zeta": (dims["q"],),
        "sigma2": (),
        "aug": (dims["n"], dims["m"]),
        "rho_accepted": (),
        "log_target": (),
    }


def pack_draw(snapshot: dict, dims: dict) -> np.ndarray:
    """Flatten one draw into a float64 vector"""
    shapes = field_shapes(dims)
    parts = []
    for name in FIELDS:
        arr = np.asarray(snapshot[name], dtype=float)
        if arr.shape != shapes[name]:
            raise ValueError(f"draw field {name} has shape {arr.shape}, expected {shapes[name]}")
        parts.append(arr.ravel())
    return np.concatenate(parts)


def unpack_draws(matrix: np.ndarray, dims: dict) -> dict:
    """Split stacked draw vectors (B, record length) back into named arrays"""
    shapes = field_shapes(dims)
    out = {}
    offset = 0
    for name in FIELDS:
        size = int(np.prod(shapes[name], dtype=int))
        out[name] = matrix[:, offset : offset + size].reshape((matrix.shape[0],) + shapes[name])
        offset += size
    out["z"] = out["z"].astype(int)
    out["rho_accepted"] = out["rho_accepted"].astype(bool)
    return out


class DrawLogWriter:
    """Appends length-prefixed draw records to a versioned log file"""

    def __init__(self, path: str, dims: dict, config: dict):
        self.path = Path(path)
        self.dims = dims
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "wb")
        echo = json.dumps(config, sort_keys=True).encode("utf-8")
        self._file.write(
            _HEADER.pack(
                MAGIC, FORMAT_VERSION, dims["n"], dims["m"], dims["p"], dims["c"], dims["j"], dims["j2"], dims["q"]
            )
        )
        self._file.write(_LENGTH.pack(len(echo)) + echo)
        self.count = 0

    def append(self, snapshot: dict):
        payload = pack_draw(snapshot, self.dims).astype("<f8").tobytes()
        self._file.write(_LENGTH.pack(len(payload)) + payload)
        self.count += 1

    def close(self):
        if not self._file.closed:
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_draw_log(path: str):
    """Load a draw log into PosteriorDraws; a truncated trailing record is dropped with a warning"""
    from .gibbs_engine import PosteriorDraws

    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise SchemaError(f"{path} is not a draw log")
    _, version, n, m, p, c, j, j2, q = _HEADER.unpack_from(raw, 0)
    if version != FORMAT_VERSION:
        raise SchemaError(f"{path} has draw log format {version}, expected {FORMAT_VERSION}")
    dims = {"n": n, "m": m, "p": p, "c": c, "j": j, "j2": j2, "q": q}

    offset = _HEADER.size
    (echo_len,) = _LENGTH.unpack_from(raw, offset)
    offset += _LENGTH.size
    try:
        config = json.loads(raw[offset : offset + echo_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SchemaError(f"{path} has a corrupt config header: {e}") from e
    offset += echo_len

    record_len = sum(int(np.prod(s, dtype=int)) for s in field_shapes(dims).values())
    records = []
    while offset < len(raw):
        if offset + _LENGTH.size > len(raw):
            logger.warning("%s ends inside a record length; ignoring the tail", path)
            break
        (nbytes,) = _LENGTH.unpack_from(raw, offset)
        offset += _LENGTH.size
        if nbytes != 8 * record_len:
            raise SchemaError(f"{path} record {len(records)} has {nbytes} bytes, expected {8 * record_len}")
        if offset + nbytes > len(raw):
            logger.warning("%s ends inside record %d; ignoring the tail", path, len(records))
            break
        records.append(np.frombuffer(raw, dtype="<f8", count=record_len, offset=offset))
        offset += nbytes

    matrix = np.vstack(records) if records else np.zeros((0, record_len))
    grid = np.asarray(config.get("grid", {}).get("points") or [], dtype=float)
    return PosteriorDraws(**unpack_draws(matrix, dims), config=config, grid=grid)


def draws_to_frame(draws) -> pd.DataFrame:
    """One row per retained draw with the scalar parameters and coefficient vectors spread into columns"""
    frame = pd.DataFrame(
        {
            "draw": np.arange(draws.n_draws),
            "rho": draws.rho,
            "sigma_s2": draws.sigma_s2,
            "kappa": draws.kappa,
            "sigma2": draws.sigma2,
            "n_occupied": [len(np.unique(z)) for z in draws.z],
            "rho_accepted": draws.rho_accepted.astype(int),
            "log_target": draws.log_target,
        }
    )
    for name in ("alpha", "delta", "gamma", "zeta"):
        values = getattr(draws, name)
        for k in range(values.shape[1]):
            frame[f"{name}_{k}"] = values[:, k]
    return frame


def write_table(path: str, frame: pd.DataFrame, config: Optional[dict] = None):
    """CSV with a leading '# schema_version=..' line that echoes the run configuration"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"# schema_version={SCHEMA_VERSION}"
    if config is not None:
        header += " config=" + json.dumps(config, sort_keys=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(header + "\n")
        frame.to_csv(f, index=False, float_format="%.10g")


def read_table(path: str):
    """Returns (frame, metadata) for a file written by write_table"""
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
        body = f.read()
    match = re.match(r"# schema_version=(\d+)(?: config=(.*))?$", first.strip())
    if not match:
        raise SchemaError(f"{path} has no schema header", line=1)
    meta = {"schema_version": int(match.group(1))}
    if match.group(2):
        meta["config"] = json.loads(match.group(2))
    return pd.read_csv(io.StringIO(body)), meta


def write_summary(path: str, draws):
    write_table(path, draws_to_frame(draws), draws.config)


def write_dataset(path: str, data: Dataset):
    """Columns y, s, t, x1..xp"""
    frame = pd.DataFrame({"y": data.y, "s": data.s_obs, "t": data.t_obs})
    for k in range(data.p):
        frame[f"x{k + 1}"] = data.x[:, k]
    write_table(path, frame)


def read_dataset(path: str, grid: np.ndarray) -> Dataset:
    """
    Read y, s, t, x1..xp with a header row; malformed rows raise SchemaError with the file line number.
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    skipped = 1 if lines and lines[0].startswith("#") else 0
    if len(lines) <= skipped:
        raise SchemaError(f"{path} has no header row", line=skipped + 1)

    header_line = skipped + 1
    try:
        frame = pd.read_csv(
            io.StringIO("\n".join(lines[skipped:])), dtype=str, keep_default_na=False, skip_blank_lines=False
        )
    except pd.errors.ParserError as e:
        found = re.search(r"line (\d+)", str(e))
        line = int(found.group(1)) + skipped if found else None
        raise SchemaError(f"{path}: wrong number of fields", line=line) from e

    columns = [c.strip() for c in frame.columns]
    expected = ["y", "s", "t"] + [f"x{k + 1}" for k in range(len(columns) - 3)]
    if columns != expected:
        raise SchemaError(f"{path}: header must be y,s,t,x1..xp (got {','.join(columns)})", line=header_line)

    values = np.empty(frame.shape, dtype=float)
    for col_idx, name in enumerate(frame.columns):
        parsed = pd.to_numeric(frame[name].str.strip(), errors="coerce").to_numpy(dtype=float)
        bad = np.flatnonzero(~np.isfinite(parsed))
        if bad.size:
            row = int(bad[0])
            raise SchemaError(
                f"{path}: column {columns[col_idx]} has non-numeric value {frame[name].iloc[row]!r}",
                line=header_line + 1 + row,
            )
        values[:, col_idx] = parsed

    return Dataset(y=values[:, 0], s_obs=values[:, 1], t_obs=values[:, 2], x=values[:, 3:], grid=grid)
