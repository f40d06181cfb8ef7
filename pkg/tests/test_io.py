"""Binary formats: tensors, clips, checkpoints, and the config text layer."""

import io
import struct

import numpy as np
import pytest

import tcpool as tp
from tcpool.io import config_to_text, head_config_from_mapping, parse_config_text
from tcpool.tensor import Tensor


def roundtrip_tensor(arr):
    buf = io.BytesIO()
    tp.write_tensor(buf, Tensor(arr))
    buf.seek(0)
    return tp.read_tensor(buf)


def tensor_bytes(arr):
    buf = io.BytesIO()
    tp.write_tensor(buf, np.asarray(arr))
    return buf.getvalue()


def test_tensor_roundtrips_are_bit_exact():
    rng = np.random.default_rng(0)
    shapes = [(1,), (7,), (3, 4), (2, 3, 4), (2, 1, 3, 2), ()]
    for shape in shapes:
        for dtype in (np.float32, np.float64):
            arr = rng.standard_normal(shape).astype(dtype)
            got = roundtrip_tensor(arr)
            assert got.dtype == dtype
            assert got.shape == arr.shape
            assert np.array_equal(got.data, arr, equal_nan=True)


def test_tensor_roundtrip_preserves_non_contiguous_input():
    arr = np.arange(12.0, dtype=np.float32).reshape(3, 4).T
    got = roundtrip_tensor(np.asarray(arr))
    assert np.array_equal(got.data, arr)


def test_malformed_tensor_prefixes_raise():
    raw = tensor_bytes(np.ones((2, 3), dtype=np.float32))
    bad = [
        b"XXXX" + raw[4:],                                   # magic
        raw[:4] + struct.pack("<I", 99) + raw[8:],           # version
        raw[:8] + struct.pack("<I", 7) + raw[12:],           # dtype code
        raw[:12] + struct.pack("<I", 9) + raw[16:],          # ndim over limit
        raw[:16] + struct.pack("<Q", 1 << 40) + raw[24:],    # huge dim
        raw[:20],                                            # truncated dims
        raw[:-4],                                            # truncated payload
        raw + b"\x00",                                       # trailing byte
    ]
    for blob in bad:
        with pytest.raises(tp.FormatError):
            tp.read_tensor(io.BytesIO(blob))


def test_clip_roundtrip_with_metadata():
    rng = np.random.default_rng(1)
    arr = rng.standard_normal((4, 6, 3)).astype(np.float32)
    buf = io.BytesIO()
    tp.write_clip(buf, tp.FeatureClip.from_array(arr, hw=(2, 3)), label=7)
    buf.seek(0)
    clip, label = tp.read_clip(buf)
    assert label == 7
    assert clip.hw == (2, 3)
    assert np.array_equal(clip.stacked().data, arr)

    plain = io.BytesIO()
    tp.write_clip(plain, arr)
    plain.seek(0)
    clip, label = tp.read_clip(plain)
    assert label is None and clip.hw is None


def test_clip_validation():
    with pytest.raises(tp.FormatError):
        tp.write_clip(io.BytesIO(), np.ones((2, 3), dtype=np.float32))
    # a 2-d tensor record is not a clip
    blob = tensor_bytes(np.ones((2, 3), dtype=np.float32))
    with pytest.raises(tp.FormatError):
        tp.read_clip(io.BytesIO(blob))
    # metadata block with an inconsistent spatial factorization
    buf = io.BytesIO()
    tp.write_clip(buf, np.ones((2, 6, 3), dtype=np.float32), hw=(2, 3))
    raw = bytearray(buf.getvalue())
    raw[-24:-16] = struct.pack("<Q", 5)
    with pytest.raises(tp.FormatError):
        tp.read_clip(io.BytesIO(bytes(raw)))
    # junk after the record that is not a metadata block
    blob3 = tensor_bytes(np.ones((2, 3, 4), dtype=np.float32)) + b"JUNKJUNK"
    with pytest.raises(tp.FormatError):
        tp.read_clip(io.BytesIO(blob3))


def test_checkpoint_roundtrip_restores_identical_behavior():
    cfg = tp.HeadConfig(variant="tcp", channels=6, proj_dim=4, frames=3,
                        positions=5, kernel_size=3, sqrt_iterations=2,
                        num_classes=2, dropout_rate=0.0, seed=3)
    params = tp.init_head(cfg)
    buf = io.BytesIO()
    tp.save_checkpoint(buf, params)
    buf.seek(0)
    loaded = tp.load_checkpoint(buf)
    assert loaded.config == cfg
    for name, p in params.named().items():
        assert np.array_equal(p.tensor.data, loaded.named()[name].tensor.data)
    clip = tp.FeatureClip.from_array(
        np.random.default_rng(0).standard_normal((3, 5, 6)).astype(np.float32))
    a = tp.tcp_forward(clip, params).data
    b = tp.tcp_forward(clip, loaded).data
    assert np.array_equal(a, b)


def test_checkpoint_rejects_corruption():
    cfg = tp.HeadConfig(variant="gap", channels=4, proj_dim=2, frames=2,
                        positions=3, kernel_size=1, num_classes=2, seed=0)
    buf = io.BytesIO()
    tp.save_checkpoint(buf, tp.init_head(cfg))
    raw = buf.getvalue()
    with pytest.raises(tp.FormatError):
        tp.load_checkpoint(io.BytesIO(b"NOPE" + raw[4:]))
    with pytest.raises(tp.FormatError):
        tp.load_checkpoint(io.BytesIO(raw[:-3]))
    # a tensor file is not a checkpoint
    with pytest.raises(tp.FormatError):
        tp.load_checkpoint(io.BytesIO(tensor_bytes(np.ones(3, dtype=np.float32))))


def test_config_text_parsing_and_aliases():
    text = """
    # projection width via its short alias
    d = 16
    kappa=5
    variant = tcp   # trailing comment
    classes=2

    dropout_rate=0.0
    """
    mapping = parse_config_text(text)
    assert mapping["proj_dim"] == "16"
    assert mapping["kernel_size"] == "5"
    assert mapping["num_classes"] == "2"
    cfg = head_config_from_mapping({**mapping, "channels": "32"})
    assert cfg.proj_dim == 16 and cfg.resolved_kernel_size == 5
    assert cfg.dropout_rate == 0.0
    with pytest.raises(tp.FormatError):
        parse_config_text("just words\n")
    with pytest.raises(tp.FormatError):
        head_config_from_mapping({"use_attention": "maybe"})
    text2 = config_to_text(cfg)
    again = head_config_from_mapping(parse_config_text(text2))
    assert again == cfg


def test_tensor_write_rejects_non_float():
    with pytest.raises(TypeError):
        tp.write_tensor(io.BytesIO(), np.ones(3, dtype=np.int64))


def test_file_paths_roundtrip(tmp_path):
    arr = np.random.default_rng(2).standard_normal((3, 2)).astype(np.float64)
    path = tmp_path / "t.bin"
    tp.write_tensor(path, Tensor(arr))
    assert np.array_equal(tp.read_tensor(path).data, arr)
