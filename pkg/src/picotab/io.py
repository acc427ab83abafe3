"""Tables, key-value config files and the TPFN checkpoint container."""

from __future__ import annotations

import csv
import dataclasses
import math
import struct
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TPFN"
FORMAT_MAJOR = 1
FORMAT_MINOR = 0
FORMAT_VERSION = (FORMAT_MAJOR << 16) | FORMAT_MINOR
MISSING_TOKENS = {"", "na", "nan", "null"}


class CheckpointFormatError(ValueError):
    pass


class TableParseError(ValueError):
    pass


# ---------------------------------------------------------------------------
# checkpoint container


@dataclass
class Container:
    """Header key/values (all strings) plus named float32 tensors, order preserved."""

    header: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def encode_container(container: Container) -> bytes:
    lines = []
    for key, value in container.header.items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise ValueError(f"header entry not representable: {key!r}")
        lines.append(f"{key} = {value}")
    header = "\n".join(lines).encode("utf-8")
    index = bytearray()
    payload = bytearray()
    for name, arr in container.tensors.items():
        data = np.asarray(arr, dtype="<f4", order="C")  # keeps 0-d shapes
        raw_name = name.encode("utf-8")
        index += struct.pack("<H", len(raw_name)) + raw_name
        index += struct.pack("<B", data.ndim)
        index += struct.pack(f"<{data.ndim}I", *data.shape)
        index += struct.pack("<Q", len(payload))
        payload += data.tobytes()
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<I", len(header)) + header
    out += struct.pack("<I", len(container.tensors)) + index
    out += struct.pack("<Q", len(payload)) + payload
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated container while reading {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_container(buf: bytes) -> Container:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("not a TPFN container (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version >> 16 > FORMAT_MAJOR:
        raise CheckpointFormatError(f"container major version {version >> 16} is newer than supported {FORMAT_MAJOR}")
    (hlen,) = r.unpack("<I", "header length")
    header = {}
    text = r.take(hlen, "header").decode("utf-8")
    for line in text.split("\n") if text else []:
        key, sep, value = line.partition(" = ")
        if not sep:
            raise CheckpointFormatError(f"malformed header line {line!r}")
        header[key] = value
    (count,) = r.unpack("<I", "tensor count")
    entries = []
    for _ in range(count):
        (nlen,) = r.unpack("<H", "index")
        name = r.take(nlen, "index").decode("utf-8")
        (ndim,) = r.unpack("<B", "index")
        shape = r.unpack(f"<{ndim}I", "index")
        (offset,) = r.unpack("<Q", "index")
        entries.append((name, shape, offset))
    (plen,) = r.unpack("<Q", "payload length")
    payload = r.take(plen, "payload")
    if r.pos != len(buf):
        raise CheckpointFormatError("trailing bytes after payload")
    tensors = {}
    for name, shape, offset in entries:
        nbytes = 4 * math.prod(shape)
        if offset + nbytes > plen:
            raise CheckpointFormatError(f"tensor {name!r} points outside the payload (corrupt index)")
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=math.prod(shape), offset=offset).reshape(shape).copy()
    return Container(header=header, tensors=tensors)


def save_checkpoint(obj, path) -> None:
    container = obj if isinstance(obj, Container) else obj.to_container()
    Path(path).write_bytes(encode_container(container))


def load_checkpoint(path) -> Container:
    """Load a raw container; callers rebuild typed objects via their ``from_container``."""
    return decode_container(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# dataclass <-> header text


def dataclass_to_header(obj, prefix: str) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out.update(dataclass_to_header(value, f"{prefix}{f.name}."))
        elif isinstance(value, (tuple, list)):
            out[f"{prefix}{f.name}"] = ",".join(repr(v) for v in value)
        else:
            out[f"{prefix}{f.name}"] = repr(value) if isinstance(value, float) else str(value)
    return out


def _parse_value(text: str, tp):
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        parts = [p for p in text.split(",") if p.strip()]
        inner = args[0] if args else float
        return tuple(_parse_value(p.strip(), inner) for p in parts)
    if tp is bool or tp == "bool":
        return text.strip().lower() in {"1", "true", "yes", "on"}
    if tp is int or tp == "int":
        return int(float(text))
    if tp is float or tp == "float":
        return float(text)
    if origin in (typing.Union, types.UnionType):
        if text.strip() in {"None", ""}:
            return None
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return _parse_value(text, args[0]) if args else text
    return text.strip()


def header_to_dataclass(cls, header: dict[str, str], prefix: str):
    """Build ``cls`` from ``prefix``-ed header keys; missing keys fall back to defaults."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = header_to_dataclass(tp, header, f"{prefix}{f.name}.")
        elif f"{prefix}{f.name}" in header:
            kwargs[f.name] = _parse_value(header[f"{prefix}{f.name}"], tp)
    return cls(**kwargs)


def read_config_file(path) -> dict[str, str]:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# tables


@dataclass
class Dataset:
    """Mixed-type table. Categorical cells hold integer codes into ``categories``."""

    x: np.ndarray  # float [n, c], NaN = missing
    columns: list[str]
    categorical: np.ndarray  # bool [c]
    categories: list[list[str]]  # per column, empty for numeric
    y: np.ndarray | None = None
    target: str | None = None
    target_categories: list[str] | None = None  # set when the target column was categorical

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.x)

    @property
    def n_categories(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.categories)


def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in MISSING_TOKENS


def _parse_float(cell: str):
    try:
        return float(cell)
    except ValueError:
        return None


def load_table(path, target: str | None = None, categorical: set[str] | None = None) -> Dataset:
    """Load a delimited text table with a header row."""
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        raise TableParseError(f"{path}: empty file")
    dialect = "excel-tab" if path.suffix in {".tsv", ".tab"} else "excel"
    reader = csv.reader(text.splitlines(), dialect=dialect)
    header = next(reader)
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise TableParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        rows.append(row)
    if not rows:
        raise TableParseError(f"{path}: no data rows")
    if target is not None and target not in header:
        raise TableParseError(f"{path}: target column {target!r} not found")
    hints = categorical or set()

    cols, cats, is_cat = [], [], []
    for j, name in enumerate(header):
        raw = [r[j] for r in rows]
        parsed = [None if _is_missing(c) else _parse_float(c) for c in raw]
        numeric = name not in hints and all(p is not None for p, c in zip(parsed, raw) if not _is_missing(c))
        if numeric:
            cols.append(np.array([np.nan if p is None else p for p in parsed], dtype=float))
            cats.append([])
            is_cat.append(False)
        else:
            levels: dict[str, int] = {}
            codes = []
            for c in raw:
                if _is_missing(c):
                    codes.append(np.nan)
                else:
                    codes.append(float(levels.setdefault(c.strip(), len(levels))))
            cols.append(np.array(codes, dtype=float))
            cats.append(list(levels))
            is_cat.append(True)

    feature_idx = [j for j, name in enumerate(header) if name != target]
    y = target_categories = None
    if target is not None:
        t = header.index(target)
        y = cols[t]
        if np.isnan(y).any():
            raise TableParseError(f"{path}: target column {target!r} has missing values")
        target_categories = cats[t] if is_cat[t] else None
    x = np.column_stack([cols[j] for j in feature_idx]) if feature_idx else np.zeros((len(rows), 0))
    return Dataset(
        x=x,
        columns=[header[j] for j in feature_idx],
        categorical=np.array([is_cat[j] for j in feature_idx], dtype=bool),
        categories=[cats[j] for j in feature_idx],
        y=y,
        target=target,
        target_categories=target_categories,
    )


def save_table(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = list(dataset.columns) + ([dataset.target] if dataset.target is not None else [])
        w.writerow(header)
        for i in range(dataset.x.shape[0]):
            row = [_format_cell(dataset.x[i, j], dataset.categories[j] if dataset.categorical[j] else None)
                   for j in range(dataset.x.shape[1])]
            if dataset.target is not None:
                row.append(_format_cell(dataset.y[i], dataset.target_categories))
            w.writerow(row)


def _format_cell(value: float, categories: list[str] | None) -> str:
    if np.isnan(value):
        return ""
    if categories is not None:
        return categories[int(value)]
    return repr(float(value))
