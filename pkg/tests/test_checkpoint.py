import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from emlrseg import checkpoint as ckpt

arrays_st = st.dictionaries(
    st.text("abcdefgh.", min_size=1, max_size=8),
    st.one_of(
        hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                   elements=st.floats(-1e6, 1e6, width=32)),
        hnp.arrays(np.float64, hnp.array_shapes(max_dims=2, max_side=4), elements=st.floats(-1e6, 1e6)),
        hnp.arrays(np.int64, hnp.array_shapes(max_dims=2, max_side=4), elements=st.integers(-2**40, 2**40)),
    ),
    max_size=5,
)


@given(arrays_st)
def test_round_trip_bit_exact(tmp_path_factory, arrays):
    path = tmp_path_factory.mktemp("c") / "x.bin"
    ckpt.save(path, arrays, {"epoch": 3, "config": "a = 1\n"})
    back, meta = ckpt.load(path)
    assert meta == {"epoch": 3, "config": "a = 1\n"}
    assert list(back) == list(arrays)
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_same_state_same_bytes(tmp_path):
    a = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    ckpt.save(tmp_path / "a.bin", a, {"z": 1, "a": 2})
    ckpt.save(tmp_path / "b.bin", dict(a), {"a": 2, "z": 1})
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert not (tmp_path / "a.bin.tmp").exists()


@pytest.mark.parametrize("mutate", ["magic", "version", "truncate", "empty"])
def test_corrupt_files(tmp_path, mutate):
    p = tmp_path / "c.bin"
    ckpt.save(p, {"w": np.ones(100, np.float32)}, {})
    raw = bytearray(p.read_bytes())
    if mutate == "magic":
        raw[0:8] = b"XXXXXXXX"
    elif mutate == "version":
        raw[8] = 99
    elif mutate == "truncate":
        raw = raw[:-10]
    else:
        raw = raw[:4]
    p.write_bytes(bytes(raw))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load(p)


def test_prefix_helpers():
    s = {"a.b": 1, "c": 2}
    assert ckpt.strip_prefix(ckpt.with_prefix(s, "m"), "m") == s
    assert ckpt.strip_prefix({"mx.a": 1, "m.b": 2}, "m") == {"b": 2}


def test_jsonl_deterministic(tmp_path):
    with ckpt.JsonlWriter(tmp_path / "m.jsonl") as w:
        w.write({"b": 1, "a": 0.5})
    assert (tmp_path / "m.jsonl").read_text() == '{"a": 0.5, "b": 1}\n'
    assert ckpt.read_jsonl(tmp_path / "m.jsonl") == [{"a": 0.5, "b": 1}]
