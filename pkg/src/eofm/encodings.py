"""Log-spaced Fourier encoding shared by spectral, coordinate, area and time inputs."""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor


class InvalidMetadataError(ValueError):
    """A value handed to an encoder is non-finite or outside its valid domain."""


@dataclass(frozen=True)
class FourierEncodingConfig:
    dim: int
    omega_min: float
    omega_max: float

    def __post_init__(self) -> None:
        if self.dim < 2 or self.dim % 2:
            raise ValueError(f"encoding dim must be a positive even integer, got {self.dim}")
        if not (0 < self.omega_min < self.omega_max):
            raise ValueError(
                f"need 0 < omega_min < omega_max, got [{self.omega_min}, {self.omega_max}]"
            )


DEFAULT_RANGES: dict[str, tuple[float, float]] = {
    "wavelength": (1e2, 1e9),  # nm
    "bandwidth": (1.0, 1e9),  # nm
    "longitude": (1e-4, 720.0),  # degrees, shifted by +180
    "latitude": (1e-4, 720.0),  # degrees, shifted by +90
    "area": (1e-3, 5.1e8),  # km^2
    "time": (1.0, 365.25),  # days
}


@dataclass
class EncodingRangeRegistry:
    """Named (omega_min, omega_max) ranges, serializable as an INI section."""

    ranges: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_RANGES))

    SECTION = "fourier_ranges"

    def config(self, quantity: str, dim: int) -> FourierEncodingConfig:
        try:
            lo, hi = self.ranges[quantity]
        except KeyError:
            raise KeyError(f"no encoding range registered for {quantity!r}") from None
        return FourierEncodingConfig(dim, lo, hi)

    def to_text(self) -> str:
        parser = configparser.ConfigParser()
        parser[self.SECTION] = {k: f"{lo!r}, {hi!r}" for k, (lo, hi) in self.ranges.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> EncodingRangeRegistry:
        parser = configparser.ConfigParser()
        parser.read_string(text)
        ranges = {}
        for key, value in parser[cls.SECTION].items():
            lo, hi = (float(v) for v in value.split(","))
            ranges[key] = (lo, hi)
        return cls(ranges)


def frequencies(config: FourierEncodingConfig) -> np.ndarray:
    """Return the D/2 log-spaced periods omega_i, endpoints pinned exactly.

    With D=2 there is a single period, omega_min.
    """
    n = config.dim // 2
    if n == 1:
        return np.array([config.omega_min], dtype=np.float64)
    lo, hi = math.log(config.omega_min), math.log(config.omega_max)
    omegas = np.exp(lo + np.arange(n, dtype=np.float64) * (hi - lo) / (n - 1))
    omegas[0] = config.omega_min
    omegas[-1] = config.omega_max
    return omegas


def fourier_encode(x: float, config: FourierEncodingConfig) -> np.ndarray:
    """Encode a scalar as ``[cos(2 pi x / w_0..), sin(2 pi x / w_0..)]``.

    Layout is all D/2 cosines followed by all D/2 sines.
    """
    x = float(x)
    if not math.isfinite(x):
        raise InvalidMetadataError(f"cannot encode non-finite value {x}")
    phase = 2.0 * np.pi * x / frequencies(config)
    return np.concatenate([np.cos(phase), np.sin(phase)])


def fourier_features(x: Tensor, config: FourierEncodingConfig) -> Tensor:
    """Batched tensor version of :func:`fourier_encode`; appends a trailing axis of size D.

    Phases are computed in float64 and the result is cast back to ``x``'s floating dtype
    (float32 for integer inputs).
    """
    if not torch.isfinite(x).all():
        raise InvalidMetadataError("cannot encode non-finite values")
    out_dtype = x.dtype if x.is_floating_point() else torch.float32
    omegas = torch.from_numpy(frequencies(config)).to(x.device)
    phase = 2.0 * math.pi * x.to(torch.float64).unsqueeze(-1) / omegas
    return torch.cat([torch.cos(phase), torch.sin(phase)], dim=-1).to(out_dtype)
