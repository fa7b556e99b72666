import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cwqkd.errors import SchemaError
from cwqkd.tagstream import RECORD_DTYPE, TagStream, sidecar_path


def stream(n=100, seed=0):
    rng = np.random.default_rng(seed)
    ts = np.sort(rng.integers(0, 10**12, n))
    return TagStream(rng.integers(0, 4, n), ts, 1.0, party="alice", metadata={"seed": seed})


def test_record_layout():
    assert RECORD_DTYPE.itemsize == 9


def test_binary_roundtrip(tmp_path):
    s = stream()
    s.save(tmp_path / "a.bin")
    raw = (tmp_path / "a.bin").read_bytes()
    assert len(raw) == 9 * len(s)
    # first record: channel byte then little-endian u64
    assert raw[0] == s.channel[0]
    assert int.from_bytes(raw[1:9], "little") == s.timestamp[0]
    side = json.loads(sidecar_path(tmp_path / "a.bin").read_text())
    assert side["schema_version"] == 1 and side["n_records"] == len(s)
    t = TagStream.load(tmp_path / "a.bin")
    assert np.array_equal(t.timestamp, s.timestamp) and np.array_equal(t.channel, s.channel)
    assert t.duration == 1.0 and t.party == "alice" and t.metadata == {"seed": 0}
    assert t.channels == s.channels


def test_csv_roundtrip(tmp_path):
    s = stream(20)
    s.to_csv(tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "channel,timestamp_ps"
    t = TagStream.from_csv(tmp_path / "a.csv", duration=1.0)
    assert np.array_equal(t.timestamp, s.timestamp) and np.array_equal(t.channel, s.channel)


def test_empty_roundtrip(tmp_path):
    s = TagStream([], [], 2.0)
    s.save(tmp_path / "e.bin")
    t = TagStream.load(tmp_path / "e.bin")
    assert len(t) == 0 and t.duration == 2.0


def test_corrupt_record_file(tmp_path):
    stream().save(tmp_path / "a.bin")
    with open(tmp_path / "a.bin", "ab") as fh:
        fh.write(b"\x00")
    with pytest.raises(SchemaError):
        TagStream.load(tmp_path / "a.bin")


def test_count_mismatch(tmp_path):
    stream().save(tmp_path / "a.bin")
    side = sidecar_path(tmp_path / "a.bin")
    d = json.loads(side.read_text())
    d["n_records"] += 1
    side.write_text(json.dumps(d))
    with pytest.raises(SchemaError):
        TagStream.load(tmp_path / "a.bin")


def test_negative_timestamps_rejected(tmp_path):
    with pytest.raises(ValueError):
        TagStream([0], [-5], 1.0).save(tmp_path / "n.bin")


def test_basis_bit_and_rates():
    s = TagStream([0, 1, 2, 3, 3], [1, 2, 3, 4, 5], 0.5)
    basis, bit = s.basis_bit()
    assert basis.tolist() == [0, 0, 1, 1, 1] and bit.tolist() == [0, 1, 0, 1, 1]
    assert s.rate(3) == 4.0 and s.rate() == 10.0


def test_validation():
    with pytest.raises(ValueError):
        TagStream([0, 1], [1], 1.0)
    with pytest.raises(ValueError):
        TagStream([0], [1], -1.0)


@settings(max_examples=30)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 2**40)), max_size=50))
def test_sorted_is_per_channel_ordered(recs):
    s = TagStream([c for c, _ in recs], [t for _, t in recs], 1.0).sorted()
    assert s.is_sorted and s.check_per_channel_order()
    assert sorted(t for _, t in recs) == s.timestamp.tolist()


def test_shift():
    s = stream(10)
    assert np.array_equal(s.shifted(1000).timestamp, s.timestamp + 1000)
