import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from red_pet import metrics as mt
from red_pet.metrics import MetricsReport, SSIMConfig


def test_psnr_example():
    ref = np.ones((10, 10))
    x = ref + 0.1  # mse 0.01, peak 1
    assert mt.psnr(x, ref) == pytest.approx(20.0)
    assert mt.psnr(ref, ref) == math.inf
    assert mt.psnr(x, ref, data_range=10.0) == pytest.approx(40.0)
    with pytest.raises(ValueError):
        mt.psnr(x, np.zeros((10, 10)))
    with pytest.raises(ValueError):
        mt.psnr(x, np.ones((5, 5)))


def test_nrmse_example():
    ref = np.ones((4, 4))
    assert mt.nrmse(1.1 * ref, ref) == pytest.approx(0.1)
    assert mt.nrmse(ref, ref) == 0.0
    with pytest.raises(ValueError):
        mt.nrmse(ref, 0 * ref)


@pytest.mark.parametrize("mode", ["global", "windowed"])
def test_ssim_self_is_one(mode):
    x = np.random.default_rng(0).random((24, 24))
    assert mt.ssim(x, x, SSIMConfig(mode=mode)) == pytest.approx(1.0, abs=1e-12)


def test_windowed_ssim_matches_skimage():
    rng = np.random.default_rng(1)
    ref = rng.random((40, 36)) * 3.0
    x = ref + 0.3 * rng.standard_normal(ref.shape)
    oracle = structural_similarity(x, ref, data_range=3.0, gaussian_weights=True, sigma=1.5,
                                   use_sample_covariance=False)
    assert mt.ssim(x, ref, SSIMConfig.for_range(3.0)) == pytest.approx(oracle, abs=1e-6)
    assert mt.ssim(x, ref) == pytest.approx(
        structural_similarity(x, ref, data_range=ref.max(), gaussian_weights=True, sigma=1.5,
                              use_sample_covariance=False), abs=1e-6)


def test_global_ssim_closed_form():
    rng = np.random.default_rng(2)
    x, y = rng.random((2, 9, 7))
    c1, c2 = 1e-4, 9e-4
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cxy = np.mean((x - mx) * (y - my))
    ref = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    assert mt.ssim(x, y, SSIMConfig()) == pytest.approx(ref, rel=1e-12)


def test_windowed_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        mt.ssim(np.ones((10, 10)), np.ones((10, 10)), SSIMConfig(mode="windowed"))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["global", "windowed"]))
def test_ssim_bounded(seed, mode):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 16, 16))
    s = mt.ssim(a, b, SSIMConfig(mode=mode))
    assert -1.0 <= s <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_psnr_decreases_with_noise(seed):
    rng = np.random.default_rng(seed)
    ref = rng.random((8, 8)) + 0.5
    n = rng.standard_normal(ref.shape)
    assert mt.psnr(ref + 0.01 * n, ref) > mt.psnr(ref + 0.1 * n, ref)


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_report_csv(tmp_path):
    ref = np.random.default_rng(3).random((16, 16)) + 0.1
    rep = MetricsReport()
    rep.add(0, "sinogram", "same", ref, ref)
    rep.add(1, "sinogram", "same", ref, ref)
    row = rep.add(0, "image", "off", ref + 0.1, ref)
    assert row["nrmse"] == pytest.approx(0.1 * 16 / np.linalg.norm(ref))
    rep.write_csv(tmp_path / "m.csv")
    rows = _read(tmp_path / "m.csv")
    assert tuple(rows[0]) == mt.REPORT_HEADER
    assert rows[1][3:] == ["inf", "1.000000", "0.000000"]
    means = [r for r in rows if r[0] == "MEAN"]
    assert len(means) == 2 and means[0][3] == "inf"


def test_empty_report_is_header_only(tmp_path):
    MetricsReport().write_csv(tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == ",".join(mt.REPORT_HEADER) + "\n"
