import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from darol import fileformat

finite = st.floats(allow_nan=False, allow_infinity=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(finite, min_size=1, max_size=6), max_size=5))
def test_float_rows_roundtrip_exactly(rows):
    data = fileformat.dumps("dataset", {"k": [1, 2]}, [np.array(r) for r in rows])
    kind, header, back = fileformat.loads(data, "dataset")
    assert kind == "dataset" and header == {"k": [1, 2]}
    assert [list(r) for r in back] == rows
    assert fileformat.dumps(kind, header, back) == data


def test_tampering_detected():
    data = fileformat.dumps("report", {"a": 1.5}, [])
    with pytest.raises(fileformat.ChecksumError):
        fileformat.loads(data.replace(b"1.5", b"2.5"))
    with pytest.raises(fileformat.FormatError):
        fileformat.loads(data.rsplit(b"checksum", 1)[0])


def test_kind_and_version_checks():
    data = fileformat.dumps("report", {}, [])
    with pytest.raises(fileformat.FormatError):
        fileformat.loads(data, "dataset")
    body = data.rsplit(b"checksum", 1)[0].replace(b"v1", b"v9")
    import hashlib

    forged = body + b"checksum " + hashlib.blake2b(body, digest_size=8).hexdigest().encode() + b"\n"
    with pytest.raises(fileformat.VersionError):
        fileformat.loads(forged)


def test_config_hash_ignores_key_order():
    assert fileformat.config_hash({"a": 1, "b": [1, 2]}) == fileformat.config_hash({"b": [1, 2], "a": 1})
    assert fileformat.config_hash({"a": 1}) != fileformat.config_hash({"a": 2})
