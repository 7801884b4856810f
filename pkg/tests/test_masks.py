import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from ivfuse import masks as mk
from ivfuse.errors import ConfigError, DimensionMismatchError, MalformedMaskError
from oracles import partition_case_analysis


def mask_pairs():
    return st.tuples(st.integers(1, 40), st.integers(1, 40)).flatmap(
        lambda hw: st.tuples(arrays(np.uint8, hw, elements=st.integers(0, 1)),
                             arrays(np.uint8, hw, elements=st.integers(0, 1))))


@settings(max_examples=200, deadline=None)
@given(mask_pairs())
def test_partition_matches_case_analysis(pair):
    m_vi, m_ir = pair
    part = mk.decompose_masks(m_vi, m_ir)
    stacked = part.stack()
    np.testing.assert_array_equal(stacked, partition_case_analysis(m_vi, m_ir))
    assert (stacked.sum(axis=0) == 1).all()


@settings(max_examples=100, deadline=None)
@given(mask_pairs())
def test_partition_swap_symmetry(pair):
    m_vi, m_ir = pair
    a = mk.decompose_masks(m_vi, m_ir)
    b = mk.decompose_masks(m_ir, m_vi)
    np.testing.assert_array_equal(a.shared, b.shared)
    np.testing.assert_array_equal(a.background, b.background)
    np.testing.assert_array_equal(a.unique_vi, b.unique_ir)
    np.testing.assert_array_equal(a.unique_ir, b.unique_vi)


def test_all_ones():
    ones = np.ones((5, 7), np.uint8)
    p = mk.decompose_masks(ones, ones)
    assert p.shared.all() and not p.unique_vi.any() and not p.unique_ir.any()
    assert not p.background.any()


def test_disjoint_masks():
    m_vi = np.zeros((6, 6), np.uint8)
    m_ir = np.zeros((6, 6), np.uint8)
    m_vi[:2] = 1
    m_ir[4:] = 1
    p = mk.decompose_masks(m_vi, m_ir)
    assert not p.shared.any()
    np.testing.assert_array_equal(p.unique_vi, m_vi)
    np.testing.assert_array_equal(p.unique_ir, m_ir)
    np.testing.assert_array_equal(p.background, 1 - (m_vi | m_ir))


def test_decompose_shape_mismatch():
    with pytest.raises(DimensionMismatchError):
        mk.decompose_masks(np.zeros((3, 3)), np.zeros((3, 4)))


def test_apply_mask():
    img = np.full((4, 6), 0.5)
    half = np.zeros((4, 6), np.uint8)
    half[:, :3] = 1
    out = mk.apply_mask(img, half)
    assert (out[:, :3] == 0.5).all() and (out[:, 3:] == 0).all()
    np.testing.assert_array_equal(mk.apply_mask(img, np.ones_like(half)), img)
    assert not mk.apply_mask(img, np.zeros_like(half)).any()
    with pytest.raises(DimensionMismatchError):
        mk.apply_mask(img, np.ones((4, 5)))


def test_synthetic_provider_is_deterministic():
    spec = mk.MaskProviderSpec("synthetic", seed=7)
    img = np.zeros((64, 64))
    a = mk.generate_modal_mask(img, spec)
    b = mk.generate_modal_mask(img, spec)
    assert a.shape == (64, 64) and a.dtype == np.uint8
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0, 1}
    c = mk.generate_modal_mask(img, mk.MaskProviderSpec("synthetic", seed=8))
    assert not np.array_equal(a, c)


def test_file_provider_binarizes(tmp_path):
    values = np.array([[0, 100, 200], [127, 128, 255]], np.uint8)
    path = tmp_path / "m.png"
    Image.fromarray(values, mode="L").save(path)
    mask = mk.generate_modal_mask(np.zeros((2, 3)), mk.MaskProviderSpec("file", path=str(path)))
    np.testing.assert_array_equal(mask, [[0, 0, 1], [0, 1, 1]])


def test_file_provider_zeros_and_mismatch(tmp_path):
    path = tmp_path / "z.png"
    Image.fromarray(np.zeros((4, 4), np.uint8), mode="L").save(path)
    spec = mk.MaskProviderSpec("file", path=str(path))
    assert not mk.generate_modal_mask(np.zeros((4, 4)), spec).any()
    with pytest.raises(DimensionMismatchError):
        mk.generate_modal_mask(np.zeros((5, 4)), spec)


def test_malformed_mask_file(tmp_path):
    rgb = tmp_path / "rgb.png"
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(rgb)
    with pytest.raises(MalformedMaskError):
        mk.read_mask_png(rgb)
    junk = tmp_path / "junk.png"
    junk.write_bytes(b"not a png")
    with pytest.raises(MalformedMaskError):
        mk.read_mask_png(junk)


def test_mask_roundtrip(tmp_path):
    m = (np.random.default_rng(0).random((9, 11)) > 0.5).astype(np.uint8)
    path = tmp_path / mk.mask_filename("0001", "ir")
    mk.save_mask(m, path)
    assert path.name == "0001.ir.mask.png"
    with Image.open(path) as im:
        assert im.mode == "L" and set(np.unique(np.asarray(im))) <= {0, 255}
    np.testing.assert_array_equal(mk.read_mask_png(path), m)


def test_provider_spec_validation():
    with pytest.raises(ConfigError):
        mk.MaskProviderSpec("external-lvm", prompt="  ", endpoint="http://x")
    with pytest.raises(ConfigError):
        mk.MaskProviderSpec("external-lvm", prompt="cars")
    with pytest.raises(ConfigError):
        mk.MaskProviderSpec("file")
    with pytest.raises(ConfigError):
        mk.MaskProviderSpec("sam")


def test_partition_crop():
    rng = np.random.default_rng(1)
    p = mk.decompose_masks(rng.integers(0, 2, (8, 8)), rng.integers(0, 2, (8, 8)))
    c = p.crop(2, 3, 4)
    np.testing.assert_array_equal(c.stack(), p.stack()[:, 2:6, 3:7])
    np.testing.assert_array_equal(mk.MaskPartition.from_stack(p.stack()).stack(), p.stack())
