"""Quality, rate and energy figures used to score sessions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

PSNR_INF = math.inf  # identical images


def psnr(reference, test, mask=None) -> float:
    """10 log10(255^2 / MSE) over all channels (and pixels under ``mask``)."""
    a = np.asarray(reference)
    b = np.asarray(test)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape[:2]:
            raise ValidationError("mask does not match the image")
        d = d[mask]
    if d.size == 0:
        raise ValidationError("no samples to compare")
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(255.0 ** 2 / mse)


def bpp_of(nbytes, width, height) -> float:
    if width <= 0 or height <= 0:
        raise ValidationError("image size must be positive")
    if nbytes < 0:
        raise ValidationError("byte count must be non-negative")
    return 8.0 * nbytes / (width * height)


@dataclass(frozen=True)
class EnergyModel:
    """Supply voltage and the currents drawn while processing, encoding and
    sending (volts, amperes)."""

    V_o: float = 15.0
    I_p: float = 0.06
    I_e: float = 0.06
    I_s: float = 0.12

    def __post_init__(self):
        if min(self.V_o, self.I_p, self.I_e, self.I_s) <= 0:
            raise ValidationError("energy model parameters must be positive")


def energy_estimate(rec, model: EnergyModel = EnergyModel()) -> float:
    """Joules for a record with timings ``t_p``, ``t_e``, ``t_s`` (seconds).

    The rprr scheme pays for processing, encoding and sending; the
    independent scheme has no processing stage, so its ``t_p`` term is
    dropped whatever the record holds.
    """
    t_p, t_e, t_s = float(rec.t_p), float(rec.t_e), float(rec.t_s)
    if min(t_p, t_e, t_s) < 0 or not all(map(math.isfinite, (t_p, t_e, t_s))):
        raise ValidationError("timings must be finite and non-negative")
    e = model.V_o * model.I_e * t_e + model.V_o * model.I_s * t_s
    if rec.scheme == "rprr":
        e += model.V_o * model.I_p * t_p
    elif rec.scheme != "independent":
        raise ValidationError(f"unknown scheme {rec.scheme!r}")
    return e
