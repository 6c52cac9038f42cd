"""Geolocation, area and time encodings added to the patch positional encodings.

Each slot is Fourier-encoded, passed through its own linear layer, and replaced by a
learnable missing-token when absent (or, in training, dropped with probability ``q``).
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass
from typing import Literal, Sequence

import torch
from torch import Tensor, nn

from .encodings import (
    EncodingRangeRegistry,
    FourierEncodingConfig,
    InvalidMetadataError,
    fourier_features,
)

EPOCH = dt.date(1970, 1, 1)
SLOTS = ("location", "area", "time")
CARTESIAN_RANGE = (1e-7, 2.0)


@dataclass(frozen=True)
class MetadataRecord:
    """Per-image metadata; ``None`` marks an absent value."""

    lon: float | None = None
    lat: float | None = None
    area_km2: float | None = None
    time_days: float | None = None

    def __post_init__(self) -> None:
        if (self.lon is None) != (self.lat is None):
            raise InvalidMetadataError("lon and lat must be both present or both absent")
        if self.lon is not None:
            if not (math.isfinite(self.lon) and -180.0 <= self.lon <= 180.0):
                raise InvalidMetadataError(f"longitude {self.lon} outside [-180, 180]")
            if not (math.isfinite(self.lat) and -90.0 <= self.lat <= 90.0):
                raise InvalidMetadataError(f"latitude {self.lat} outside [-90, 90]")
        if self.area_km2 is not None and not (math.isfinite(self.area_km2) and self.area_km2 > 0):
            raise InvalidMetadataError(f"area must be positive and finite, got {self.area_km2}")
        if self.time_days is not None and not math.isfinite(self.time_days):
            raise InvalidMetadataError(f"time must be finite, got {self.time_days}")

    @property
    def has_location(self) -> bool:
        return self.lon is not None


def area_km2(gsd_m: float, height_px: int, width_px: int) -> float:
    """Planar footprint of an image: (gsd*h/1000) * (gsd*w/1000) km^2."""
    if not (gsd_m > 0 and height_px > 0 and width_px > 0):
        raise InvalidMetadataError(
            f"gsd and image size must be positive, got gsd={gsd_m}, size={height_px}x{width_px}"
        )
    return (gsd_m * height_px / 1000.0) * (gsd_m * width_px / 1000.0)


def days_since_epoch(date: dt.date) -> int:
    return (date - EPOCH).days


def location_features(
    lon: Tensor,
    lat: Tensor,
    dim: int,
    registry: EncodingRangeRegistry,
    fmt: Literal["lonlat", "cartesian"] = "lonlat",
) -> Tensor:
    """Pre-MLP location encoding [..., dim]; zero-padded when dim does not split evenly."""
    if fmt == "lonlat":
        half = (dim // 2) // 2 * 2
        parts = [
            fourier_features(lon + 180.0, registry.config("longitude", half)),
            fourier_features(lat + 90.0, registry.config("latitude", half)),
        ]
    elif fmt == "cartesian":
        third = (dim // 3) // 2 * 2
        cfg = FourierEncodingConfig(third, *CARTESIAN_RANGE)
        lon_r, lat_r = torch.deg2rad(lon), torch.deg2rad(lat)
        xyz = (
            torch.cos(lon_r) * torch.cos(lat_r),
            torch.sin(lon_r) * torch.cos(lat_r),
            torch.sin(lat_r),
        )
        parts = [fourier_features(v + 1.0 + 1e-7, cfg) for v in xyz]
    else:
        raise ValueError(f"unknown location format {fmt!r}")
    feats = torch.cat(parts, dim=-1)
    pad = dim - feats.shape[-1]
    if pad:
        feats = torch.cat([feats, feats.new_zeros(*feats.shape[:-1], pad)], dim=-1)
    return feats


class MetadataEncoder(nn.Module):
    def __init__(
        self,
        dim: int,
        drop_prob: float = 0.7,
        registry: EncodingRangeRegistry | None = None,
        location_format: Literal["lonlat", "cartesian"] = "lonlat",
    ) -> None:
        super().__init__()
        if not 0.0 <= drop_prob <= 1.0:
            raise ValueError(f"drop probability must lie in [0, 1], got {drop_prob}")
        self.dim = dim
        self.drop_prob = drop_prob
        self.registry = registry or EncodingRangeRegistry()
        self.location_format = location_format
        self.location_mlp = nn.Linear(dim, dim)
        self.area_mlp = nn.Linear(dim, dim)
        self.time_mlp = nn.Linear(dim, dim)
        self.location_token = nn.Parameter(torch.zeros(dim))
        self.area_token = nn.Parameter(torch.zeros(dim))
        self.time_token = nn.Parameter(torch.zeros(dim))
        for token in (self.location_token, self.area_token, self.time_token):
            nn.init.normal_(token, std=0.02)

    def _dtype(self) -> torch.dtype:
        return self.location_token.dtype

    def encode_location(self, lon: Tensor, lat: Tensor) -> Tensor:
        feats = location_features(lon, lat, self.dim, self.registry, self.location_format)
        return self.location_mlp(feats.to(self._dtype()))

    def encode_area(self, area: Tensor) -> Tensor:
        feats = fourier_features(area, self.registry.config("area", self.dim))
        return self.area_mlp(feats.to(self._dtype()))

    def encode_time(self, days: Tensor) -> Tensor:
        feats = fourier_features(days, self.registry.config("time", self.dim))
        return self.time_mlp(feats.to(self._dtype()))

    def drop_mask(self, batch: int, generator: torch.Generator | None = None) -> Tensor:
        """Independent per-sample, per-slot drop decisions, bool [batch, 3]."""
        return torch.rand(batch, len(SLOTS), generator=generator) < self.drop_prob

    def forward(
        self,
        records: Sequence[MetadataRecord],
        training: bool = False,
        generator: torch.Generator | None = None,
    ) -> Tensor:
        """Sum of the three slot vectors per record, shape [B, D]."""
        b = len(records)
        dev = self.location_token.device

        def column(values: list[float | None]) -> tuple[Tensor, Tensor]:
            present = torch.tensor([v is not None for v in values], device=dev)
            vals = torch.tensor([0.0 if v is None else v for v in values], dtype=torch.float64, device=dev)
            return vals, present

        lon, has_loc = column([r.lon for r in records])
        lat, _ = column([r.lat for r in records])
        area, has_area = column([r.area_km2 for r in records])
        days, has_time = column([r.time_days for r in records])

        use_token = ~torch.stack([has_loc, has_area, has_time], dim=1)
        if training and self.drop_prob > 0:
            use_token = use_token | self.drop_mask(b, generator).to(dev)

        slots = [
            (self.encode_location(lon, lat), self.location_token),
            (self.encode_area(area), self.area_token),
            (self.encode_time(days), self.time_token),
        ]
        total = torch.zeros(b, self.dim, dtype=self._dtype(), device=dev)
        for i, (encoded, token) in enumerate(slots):
            total = total + torch.where(use_token[:, i : i + 1], token.expand(b, -1), encoded)
        return total

    def combine(
        self,
        meta: MetadataRecord,
        positional: Tensor,
        training: bool = False,
        generator: torch.Generator | None = None,
    ) -> Tensor:
        """Broadcast one record's metadata over [N, D] positional encodings and add."""
        return positional + self.forward([meta], training, generator)[0]
