import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from picotab import io
from picotab.io import CheckpointFormatError, Container, TableParseError


def _write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_numeric_column_with_missing(tmp_path):
    # a blank line would be skipped by the csv reader, so pair the empty cell with a second column
    ds =io.load_table(_write(tmp_path, "a,b\n1,x\n2.5,y\n,z\n"))
    assert not ds.categorical[0]
    np.testing.assert_array_equal(ds.missing[:, 0], [False, False, True])
    assert ds.x[1, 0] == 2.5


def test_mixed_column_is_categorical(tmp_path):
    ds = io.load_table(_write(tmp_path, "a\na\n1\n"))
    assert ds.categorical[0] and ds.categories[0] == ["a", "1"]


@pytest.mark.parametrize("token", ["", "NA", "na", "NaN", "nan", "null", "NULL"])
def test_missing_tokens(tmp_path, token):
    ds = io.load_table(_write(tmp_path, f"a,b\n{token},1\n3,2\n"))
    assert np.isnan(ds.x[0, 0]) and not ds.categorical[0]


def test_ragged_rows_report_line(tmp_path):
    with pytest.raises(TableParseError, match=":3:"):
        io.load_table(_write(tmp_path, "a,b\n1,2\n3\n"))


def test_empty_file(tmp_path):
    with pytest.raises(TableParseError):
        io.load_table(_write(tmp_path, ""))


def test_target_by_name_and_hints(tmp_path):
    ds = io.load_table(_write(tmp_path, "f,g,y\n1,2,no\n3,4,yes\n5,6,no\n"), target="y", categorical={"g"})
    assert ds.columns == ["f", "g"] and ds.target_categories == ["no", "yes"]
    np.testing.assert_array_equal(ds.y, [0, 1, 0])
    assert ds.categorical.tolist() == [False, True]
    with pytest.raises(TableParseError):
        io.load_table(_write(tmp_path, "f\n1\n"), target="y")


def test_large_table_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    n = 10_000
    num = rng.standard_normal(n) * 10.0 ** rng.integers(-5, 6, n)
    num[rng.random(n) < 0.05] = np.nan
    cat = rng.choice(["red", "green", "blue"], n).astype(object)
    cat[rng.random(n) < 0.05] = ""
    y = rng.standard_normal(n)
    lines = ["num,cat,y"] + [f"{'' if np.isnan(a) else repr(float(a))},{b},{repr(float(c))}" for a, b, c in zip(num, cat, y)]
    src = _write(tmp_path, "\n".join(lines) + "\n")
    first = io.load_table(src, target="y")
    io.save_table(first, tmp_path / "copy.csv")
    second = io.load_table(tmp_path / "copy.csv", target="y")
    np.testing.assert_array_equal(first.missing, second.missing)
    np.testing.assert_array_equal(np.nan_to_num(first.x, nan=-7), np.nan_to_num(second.x, nan=-7))
    np.testing.assert_array_equal(first.y, second.y)
    assert first.categories == second.categories
    np.testing.assert_array_equal(first.x[:, 0], np.where(np.isnan(num), np.nan, num))


# -- container ---------------------------------------------------------------------


def _container():
    rng = np.random.default_rng(1)
    return Container(header={"kind": "test", "note": "a b = c"},
                     tensors={"w": rng.standard_normal((3, 4)).astype(np.float32),
                              "b": np.arange(5, dtype=np.float32), "s": np.array(2.5, dtype=np.float32)})


def test_container_roundtrip_bitwise(tmp_path):
    c = _container()
    io.save_checkpoint(c, tmp_path / "c.tpfn")
    back = io.load_checkpoint(tmp_path / "c.tpfn")
    assert back.header == c.header
    for k in c.tensors:
        assert back.tensors[k].shape == c.tensors[k].shape
        assert back.tensors[k].tobytes() == c.tensors[k].tobytes()
    io.save_checkpoint(back, tmp_path / "d.tpfn")
    assert (tmp_path / "c.tpfn").read_bytes() == (tmp_path / "d.tpfn").read_bytes()


def test_layout_starts_with_magic_and_version():
    raw = io.encode_container(_container())
    assert raw[:4] == b"TPFN"
    assert struct.unpack("<I", raw[4:8])[0] == (1 << 16)


def test_rejects_bad_magic():
    raw = bytearray(io.encode_container(_container()))
    raw[:4] = b"NOPE"
    with pytest.raises(CheckpointFormatError, match="magic"):
        io.decode_container(bytes(raw))


def test_rejects_newer_major_but_accepts_newer_minor():
    raw = bytearray(io.encode_container(_container()))
    raw[4:8] = struct.pack("<I", (2 << 16))
    with pytest.raises(CheckpointFormatError, match="newer"):
        io.decode_container(bytes(raw))
    raw[4:8] = struct.pack("<I", (1 << 16) | 7)
    assert io.decode_container(bytes(raw)).header["kind"] == "test"


@given(st.integers(1, 200))
def test_truncation_is_detected(cut):
    raw = io.encode_container(_container())
    cut = min(cut, len(raw) - 1)
    with pytest.raises(CheckpointFormatError):
        io.decode_container(raw[:-cut])


def test_corrupt_index_offset():
    c = Container(tensors={"a": np.zeros(2, np.float32)})
    raw = bytearray(io.encode_container(c))
    # the single offset field sits just before the u64 payload length
    off_pos = len(raw) - 8 - 8 - 8
    raw[off_pos:off_pos + 8] = struct.pack("<Q", 10_000)
    with pytest.raises(CheckpointFormatError, match="corrupt index"):
        io.decode_container(bytes(raw))


def test_config_file_and_dataclass_header(tmp_path):
    from picotab.prior import PriorConfig

    cfg = PriorConfig(max_rows=99, dag_nodes_range=(2, 5))
    back = io.header_to_dataclass(PriorConfig, io.dataclass_to_header(cfg, "p."), "p.")
    assert back == cfg
    p = _write(tmp_path, "# comment\nsteps = 10\n\nlr=0.5  # trailing\n", "c.txt")
    assert io.read_config_file(p) == {"steps": "10", "lr": "0.5"}
