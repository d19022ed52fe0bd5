import math

import numpy as np
import pytest

from rprr.errors import ValidationError
from rprr.metrics import PSNR_INF, EnergyModel, bpp_of, energy_estimate, psnr
from rprr.session import TransmissionRecord


def test_psnr_identical_is_infinite():
    a = np.random.default_rng(0).integers(0, 256, (8, 8, 3), dtype=np.uint8)
    assert psnr(a, a) == PSNR_INF == math.inf


def test_psnr_constant_offset():
    a = np.full((10, 10, 3), 100, np.uint8)
    b = a + 16
    assert psnr(a, b) == pytest.approx(10 * math.log10(255 ** 2 / 256))
    assert psnr(a, b) == pytest.approx(24.05, abs=0.005)


def test_psnr_mask_and_errors():
    a = np.zeros((4, 4, 3), np.uint8)
    b = a.copy()
    b[0, 0] = 255
    m = np.zeros((4, 4), bool)
    m[1:, 1:] = True
    assert psnr(a, b, m) == math.inf
    assert psnr(a, b) == pytest.approx(10 * math.log10(16))
    with pytest.raises(ValidationError):
        psnr(a, b[:3])
    with pytest.raises(ValidationError):
        psnr(a, b, np.zeros((4, 4), bool))


def test_bpp():
    assert bpp_of(76800, 640, 480) == 2.0
    with pytest.raises(ValidationError):
        bpp_of(-1, 4, 4)
    with pytest.raises(ValidationError):
        bpp_of(1, 0, 4)


def test_energy_reference_point():
    rec = TransmissionRecord("rprr", t_p=0.3, t_e=0.209, t_s=0.032)
    assert 1000 * energy_estimate(rec) == pytest.approx(515.7, abs=0.1)
    # split between processing and encoding does not matter at I_p == I_e
    rec2 = TransmissionRecord("rprr", t_p=0.009, t_e=0.5, t_s=0.032)
    assert energy_estimate(rec2) == pytest.approx(energy_estimate(rec))


def test_schemes_differ_by_processing_term():
    m = EnergyModel()
    r = TransmissionRecord("rprr", t_p=0.25, t_e=0.1, t_s=0.05)
    i = TransmissionRecord("independent", t_p=0.25, t_e=0.1, t_s=0.05)
    assert energy_estimate(r, m) - energy_estimate(i, m) == pytest.approx(m.V_o * m.I_p * 0.25)


def test_energy_rejects_bad_input():
    with pytest.raises(ValidationError):
        energy_estimate(TransmissionRecord("rprr", t_e=-0.1))
    with pytest.raises(ValidationError):
        energy_estimate(TransmissionRecord("rprr", t_s=math.nan))
    with pytest.raises(ValidationError):
        EnergyModel(V_o=0)
