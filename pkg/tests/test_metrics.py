import csv

import numpy as np
import pytest

from ivfuse import metrics as mt
from ivfuse.errors import DimensionMismatchError, ImageTooSmallError
import oracles


def test_constant_image():
    c = np.full((12, 9), 0.4)
    assert mt.entropy(c) == 0.0
    assert mt.spatial_frequency(c) == 0.0
    assert mt.average_gradient(c) == 0.0
    assert mt.correlation_coefficient(c, c, c) == 0.0


def test_uniform_levels_entropy_is_eight_bits():
    img = (np.arange(256).reshape(16, 16) / 255.0)
    assert abs(mt.entropy(img) - 8.0) < 1e-9


def test_cc_of_identical_images():
    f = np.random.default_rng(0).random((10, 10))
    assert mt.correlation_coefficient(f, f, f) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_metrics_match_scalar_oracles(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(2, 20, size=2)
    f, vi, ir = (rng.random((h, w)) for _ in range(3))
    rows = f.tolist()
    assert abs(mt.entropy(f) - oracles.entropy(rows)) < 1e-9
    assert abs(mt.spatial_frequency(f) - oracles.spatial_frequency(rows)) < 1e-9
    assert abs(mt.average_gradient(f) - oracles.average_gradient(rows)) < 1e-9
    assert abs(mt.correlation_coefficient(f, vi, ir)
               - oracles.correlation_coefficient(rows, vi.tolist(), ir.tolist())) < 1e-9


def test_spatial_frequency_by_hand():
    img = np.array([[0.0, 1.0], [0.0, 1.0]])
    # row diffs: two of 1, column diffs: two of 0
    assert mt.spatial_frequency(img) == pytest.approx(1.0)
    assert mt.average_gradient(img) == pytest.approx(np.sqrt(0.5))


def test_errors():
    with pytest.raises(ImageTooSmallError):
        mt.spatial_frequency(np.zeros((1, 5)))
    with pytest.raises(DimensionMismatchError):
        mt.correlation_coefficient(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        mt.entropy(np.zeros((2, 2, 3)))


def test_gradient_scale():
    f = np.random.default_rng(1).random((8, 8))
    r = mt.evaluate(f, f, f, gradient_scale=255.0)
    assert r.sf == pytest.approx(255 * mt.spatial_frequency(f))
    assert r.ag == pytest.approx(255 * mt.average_gradient(f))
    assert r.en == mt.entropy(f)


def test_csv_mean_row_and_missing(tmp_path):
    rng = np.random.default_rng(2)
    reports = [mt.evaluate(*(rng.random((6, 6)) for _ in range(3))) for _ in range(3)]
    path = tmp_path / "m.csv"
    mean = mt.write_metrics_csv(path, [("a", reports[0]), ("gone", None), ("b", reports[1]),
                                       ("c", reports[2])])
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["image_id", "en", "sf", "ag", "cc", "status"]
    assert rows[2] == ["gone", "", "", "", "", "missing"]
    assert rows[-1][0] == "mean" and rows[-1][-1] == "n=3"
    for k, name in enumerate(("en", "sf", "ag", "cc"), start=1):
        col = [getattr(r, name) for r in reports]
        assert float(rows[-1][k]) == pytest.approx(np.mean(col), abs=1e-6)
        assert getattr(mean, name) == pytest.approx(np.mean(col))
