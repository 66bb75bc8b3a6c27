import numpy as np
import pytest

from rfdm import tensorio
from rfdm.tensorio import FormatError


def test_zeros_roundtrip(tmp_path):
    p = tmp_path / "z.vt"
    tensorio.write_tensor(p, np.zeros((2, 2)))
    out = tensorio.read_tensor(p)
    assert out.shape == (2, 2) and out.dtype == np.float32 and not out.any()


def test_header_fixture():
    fixture = bytes.fromhex(
        "56 54 45 4e 53 4f 52 31"  # VTENSOR1
        "04 00 00 00"  # rank
        "03 00 00 00 40 00 00 00 40 00 00 00 03 00 00 00"  # dims
    )
    buf = tensorio.encode_tensor(np.zeros((3, 64, 64, 3), dtype=np.float32))
    assert buf[: len(fixture)] == fixture
    assert len(buf) == len(fixture) + 3 * 64 * 64 * 3 * 4


def test_payload_is_little_endian_f32():
    buf = tensorio.encode_tensor(np.array([1.0, -2.0], dtype=np.float32))
    assert buf[-8:] == bytes.fromhex("0000803f 000000c0")


@pytest.mark.parametrize("rank", [1, 2, 3, 4, 5])
def test_bitwise_roundtrip_random(tmp_path, rng, rank):
    shape = tuple(rng.integers(1, 5, size=rank))
    x = rng.standard_normal(shape).astype(np.float32)
    p = tmp_path / "x.vt"
    tensorio.write_tensor(p, x)
    y = tensorio.read_tensor(p)
    assert y.tobytes() == x.tobytes() and y.shape == x.shape


def test_bad_magic():
    buf = bytearray(tensorio.encode_tensor(np.zeros(3)))
    buf[:8] = b"VTENSOR0"
    with pytest.raises(FormatError) as e:
        tensorio.decode_tensor(bytes(buf))
    assert e.value.offset == 0


def test_truncated_payload_reports_offset():
    buf = tensorio.encode_tensor(np.zeros((4,)))
    with pytest.raises(FormatError) as e:
        tensorio.decode_tensor(buf[:-3])
    assert e.value.offset == len(buf) - 3


def test_truncated_header():
    with pytest.raises(FormatError):
        tensorio.decode_tensor(b"VTENSOR1\x02\x00\x00\x00\x01\x00")


def test_dims_overflow():
    buf = b"VTENSOR1" + b"\x03\x00\x00\x00" + b"\xff\xff\xff\xff" * 3
    with pytest.raises(FormatError, match="overflow"):
        tensorio.decode_tensor(buf)


def test_rejects_non_finite_and_scalars():
    with pytest.raises(ValueError):
        tensorio.encode_tensor(np.array([np.nan]))
    with pytest.raises(ValueError):
        tensorio.encode_tensor(np.float32(1.0))


def test_manifest_reserialization_is_byte_stable(tmp_path):
    recs = [
        {"id": "a", "input_path": "a/i.vt", "target_path": "a/t.vt", "flow_path": "a/f.vt",
         "prompt": [1, 2, 3], "meta": {"z": 0.1, "a": [1.5, None]}},
        {"id": "b", "input_path": "b/i.vt", "target_path": "b/t.vt", "flow_path": "b/f.vt",
         "prompt": [0, 1, None], "meta": {}},
    ]
    p = tmp_path / "m.jsonl"
    tensorio.write_manifest(p, recs)
    first = p.read_bytes()
    tensorio.write_manifest(p, tensorio.read_manifest(p))
    assert p.read_bytes() == first


def test_checkpoint_load_save_identical_bytes(tmp_path, rng):
    params = {"w": rng.standard_normal((3, 3)).astype(np.float32), "b": np.zeros(3, np.float32)}
    moments = {"exp_avg": {"w": np.ones((3, 3), np.float32)}}
    state = {"step": 7, "rng": {"state": 2**100}, "training_hash": "abc"}
    tensorio.save_checkpoint(tmp_path / "c1", params, moments, state)
    tensorio.save_checkpoint(tmp_path / "c2", *tensorio.load_checkpoint(tmp_path / "c1"))
    files1 = sorted(p.relative_to(tmp_path / "c1") for p in (tmp_path / "c1").rglob("*") if p.is_file())
    files2 = sorted(p.relative_to(tmp_path / "c2") for p in (tmp_path / "c2").rglob("*") if p.is_file())
    assert files1 == files2
    for f in files1:
        assert (tmp_path / "c1" / f).read_bytes() == (tmp_path / "c2" / f).read_bytes()
