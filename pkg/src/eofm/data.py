"""Grid-cell samples, the sharded on-disk format, normalization, augmentation and a
synthetic generator shaped like the multi-sensor pretraining corpus.

On-disk layout (``root/``)::

    manifest.json             {"format_version", "modalities": [...], "shards": [{"file", "grid_ids"}]}
    shard-00000.tar           uncompressed ustar archive, one member per grid cell
      00001234.npz            zip of .npy arrays "<modality>/<patch>/<t>" ([C, H, W] float32)
                              plus manifest.json: {"grid_id", "lon", "lat", "modalities":
                              {modality: [[{"lon", "lat", "gsd_m", "time_days"}, ...], ...]}}

Metadata values may be JSON ``null`` when absent. All members carry fixed timestamps and
ownership so identical content gives identical bytes.
"""

from __future__ import annotations

import configparser
import datetime as dt
import io
import json
import math
import tarfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Literal, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .archive import read_archive, write_archive
from .backbone import ModalitySpec
from .hypernet import FIXTURES
from .metadata import MetadataRecord, area_km2, days_since_epoch

FORMAT_VERSION = 1
DEGREE_M = 111_320.0  # meters per degree of latitude (planar approximation)


class DataQualityError(ValueError):
    pass


class MissingModalityError(KeyError):
    pass


@dataclass
class ImageRecord:
    image: np.ndarray  # [C, H, W] float32
    lon: float | None
    lat: float | None
    gsd_m: float | None
    time_days: float | None

    def metadata(self) -> MetadataRecord:
        h, w = self.image.shape[-2:]
        area = area_km2(self.gsd_m, h, w) if self.gsd_m is not None else None
        return MetadataRecord(self.lon, self.lat, area, self.time_days)

    def meta_dict(self) -> dict:
        return {"lon": self.lon, "lat": self.lat, "gsd_m": self.gsd_m, "time_days": self.time_days}


@dataclass
class GridSample:
    """One grid cell. ``modalities[m][k][t]`` is timestamp t of local patch k.

    Modalities without local patches store a single patch (k = 0) holding the series.
    """

    grid_id: int
    lon: float
    lat: float
    modalities: dict[str, list[list[ImageRecord]]] = field(default_factory=dict)
    normalized: bool = False


# -- grid geometry ----------------------------------------------------------------------


@dataclass(frozen=True)
class GridGeometry:
    """Regular lat/lon grid; row 0 is the northernmost row, ids are row * cols + col."""

    rows: int = 721
    cols: int = 1440
    lat0: float = 90.0
    lon0: float = 0.0
    res: float = 0.25

    def index(self, grid_id: int) -> tuple[int, int]:
        if not 0 <= grid_id < self.rows * self.cols:
            raise ValueError(f"grid id {grid_id} outside a {self.rows}x{self.cols} geometry")
        return divmod(int(grid_id), self.cols)

    def center(self, grid_id: int) -> tuple[float, float]:
        row, col = self.index(grid_id)
        lon = (self.lon0 + col * self.res + 180.0) % 360.0 - 180.0
        return lon, self.lat0 - row * self.res

    def to_dict(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "lat0": self.lat0, "lon0": self.lon0, "res": self.res}


# -- normalization --------------------------------------------------------------------


@dataclass(frozen=True)
class NormRule:
    kind: Literal["standardize", "scale", "nan_to_zero", "divide"]
    mean: tuple[float, ...] = ()
    std: tuple[float, ...] = ()
    factors: tuple[float, ...] = ()
    divisor: float = 1.0


def load_s3_scale_factors(path: Path | None = None) -> tuple[float, ...]:
    parser = configparser.ConfigParser()
    parser.read(path or FIXTURES / "s3_scale_factors.ini")
    return tuple(float(v) for v in parser["s3_olci"]["scale"].split(","))


# Channel statistics of the synthetic generator's S1 (dB) and S2 (DN) fields.
SYNTH_STATS = {
    "s1_grd": ((-12.0, -19.0), (4.0, 4.0)),
    "s2_toa": (tuple(1200.0 + 60.0 * i for i in range(13)), (600.0,) * 13),
}


@dataclass
class NormalizationSpec:
    rules: dict[str, NormRule]

    @classmethod
    def default(cls, modalities: Mapping[str, ModalitySpec]) -> NormalizationSpec:
        rules = {}
        for mid in modalities:
            if mid in ("s1_grd", "s2_toa"):
                mean, std = SYNTH_STATS[mid]
                rules[mid] = NormRule("standardize", mean=mean, std=std)
            elif mid == "s3_olci":
                rules[mid] = NormRule("scale", factors=load_s3_scale_factors())
            elif mid.startswith("s5p"):
                rules[mid] = NormRule("nan_to_zero")
            elif mid == "dem":
                rules[mid] = NormRule("divide", divisor=10000.0)
            else:
                raise KeyError(f"no default normalization for modality {mid!r}")
        return cls(rules)


def fit_standardization(images: Sequence[np.ndarray]) -> NormRule:
    stack = np.concatenate([im.reshape(im.shape[0], -1) for im in images], axis=1).astype(np.float64)
    return NormRule("standardize", mean=tuple(stack.mean(axis=1)), std=tuple(stack.std(axis=1)))


def normalize(image: np.ndarray, modality: str, spec: NormalizationSpec) -> np.ndarray:
    rule = spec.rules[modality]
    if rule.kind != "nan_to_zero" and not np.isfinite(image).all():
        raise DataQualityError(f"non-finite pixels in {modality} image")
    c = image.shape[0]
    if rule.kind == "standardize":
        mean = np.asarray(rule.mean, dtype=np.float64).reshape(c, 1, 1)
        std = np.asarray(rule.std, dtype=np.float64).reshape(c, 1, 1)
        out = (image - mean) / std
    elif rule.kind == "scale":
        out = image * np.asarray(rule.factors, dtype=np.float64).reshape(c, 1, 1)
    elif rule.kind == "nan_to_zero":
        out = np.nan_to_num(image, nan=0.0, posinf=0.0, neginf=0.0)
    else:
        out = image / rule.divisor
    return out.astype(np.float32)


def normalize_grid(grid: GridSample, spec: NormalizationSpec) -> GridSample:
    if grid.normalized:
        raise DataQualityError(f"grid {grid.grid_id} is already normalized")
    mods = {
        mid: [[replace(r, image=normalize(r.image, mid, spec)) for r in series] for series in patches]
        for mid, patches in grid.modalities.items()
    }
    return replace(grid, modalities=mods, normalized=True)


# -- augmentation ---------------------------------------------------------------------


@dataclass(frozen=True)
class CropParams:
    top: int
    left: int
    height: int
    width: int
    flip: bool


def sample_crop(
    rng: np.random.Generator,
    height: int,
    width: int,
    scale: tuple[float, float] = (0.2, 1.0),
    ratio: tuple[float, float] = (3 / 4, 4 / 3),
) -> CropParams:
    """Random-resized-crop box: area fraction in ``scale``, aspect ratio in ``ratio``."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    flip = bool(rng.random() < 0.5)
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return CropParams(top, left, h, w, flip)
    return CropParams(0, 0, height, width, flip)


def crop_for_scale(height: int, width: int, scale: float, flip: bool = False) -> CropParams:
    """Centered square-aspect crop keeping ``scale`` of the area."""
    h = max(1, int(round(height * math.sqrt(scale))))
    w = max(1, int(round(width * math.sqrt(scale))))
    return CropParams((height - h) // 2, (width - w) // 2, h, w, flip)


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if image.shape[-2:] == tuple(size):
        return image
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0].numpy()


def apply_crop(record: ImageRecord, params: CropParams, out_size: tuple[int, int]) -> tuple[np.ndarray, MetadataRecord]:
    """Crop, resize and flip one image; move its center coordinate and shrink its area."""
    img = record.image
    h, w = img.shape[-2:]
    out = img[:, params.top : params.top + params.height, params.left : params.left + params.width]
    out = resize_image(out, out_size)
    if params.flip:
        out = out[:, :, ::-1]
    out = np.ascontiguousarray(out, dtype=np.float32)

    lon, lat = record.lon, record.lat
    if lon is not None and record.gsd_m is not None:
        dy = (params.top + params.height / 2.0) - h / 2.0
        dx = (params.left + params.width / 2.0) - w / 2.0
        lat_new = float(np.clip(lat - dy * record.gsd_m / DEGREE_M, -90.0, 90.0))
        coslat = max(math.cos(math.radians(lat)), 1e-6)
        lon_new = lon + dx * record.gsd_m / (DEGREE_M * coslat)
        lon, lat = float((lon_new + 180.0) % 360.0 - 180.0), lat_new
    area = area_km2(record.gsd_m, params.height, params.width) if record.gsd_m is not None else None
    return out, MetadataRecord(lon, lat, area, record.time_days)


def augment(
    record: ImageRecord,
    rng: np.random.Generator,
    out_size: tuple[int, int],
    params: CropParams | None = None,
    scale: tuple[float, float] = (0.2, 1.0),
) -> tuple[np.ndarray, MetadataRecord]:
    """Random resized crop to ``out_size`` plus horizontal flip with p=0.5."""
    if params is None:
        params = sample_crop(rng, *record.image.shape[-2:], scale=scale)
    return apply_crop(record, params, out_size)


def center_view(record: ImageRecord, out_size: tuple[int, int]) -> tuple[np.ndarray, MetadataRecord]:
    """Deterministic evaluation view: center crop to ``out_size``, or resize if smaller."""
    h, w = record.image.shape[-2:]
    oh, ow = out_size
    if h >= oh and w >= ow:
        params = CropParams((h - oh) // 2, (w - ow) // 2, oh, ow, False)
    else:
        params = CropParams(0, 0, h, w, False)
    return apply_crop(record, params, out_size)


# -- per-iteration sampling -------------------------------------------------------------


def sample_iteration_view(
    grid: GridSample,
    rng: np.random.Generator,
    modalities: Sequence[str] | None = None,
    missing: Literal["error", "skip"] = "error",
) -> dict[str, ImageRecord]:
    """Pick one image per modality: a uniform local patch, then a uniform timestamp."""
    picks = {}
    for mid in modalities if modalities is not None else list(grid.modalities):
        patches = [p for p in grid.modalities.get(mid, []) if p]
        if not patches:
            if missing == "skip":
                continue
            raise MissingModalityError(f"grid {grid.grid_id} has no images for modality {mid!r}")
        series = patches[int(rng.integers(len(patches)))]
        picks[mid] = series[int(rng.integers(len(series)))]
    return picks


Batch = dict[str, tuple[torch.Tensor, list[MetadataRecord]]]


def build_batch(
    grids: Sequence[GridSample],
    modalities: Mapping[str, ModalitySpec],
    rng: np.random.Generator,
    norm: NormalizationSpec | None = None,
    training: bool = True,
    missing: Literal["error", "skip"] = "error",
) -> Batch:
    """Sample, normalize and crop one view per grid and modality, stacked per modality."""
    images: dict[str, list[np.ndarray]] = {m: [] for m in modalities}
    metas: dict[str, list[MetadataRecord]] = {m: [] for m in modalities}
    for grid in grids:
        view = sample_iteration_view(grid, rng, list(modalities), missing)
        for mid, rec in view.items():
            if norm is not None and not grid.normalized:
                rec = replace(rec, image=normalize(rec.image, mid, norm))
            crop = modalities[mid].crop
            img, meta = augment(rec, rng, crop) if training else center_view(rec, crop)
            images[mid].append(img)
            metas[mid].append(meta)
    return {
        mid: (torch.from_numpy(np.stack(images[mid])), metas[mid])
        for mid in modalities
        if images[mid]
    }


# -- shard format -----------------------------------------------------------------------


def _tarinfo(name: str, size: int) -> tarfile.TarInfo:
    info = tarfile.TarInfo(name)
    info.size = size
    info.mtime = 0
    info.mode = 0o644
    info.uid = info.gid = 0
    info.uname = info.gname = ""
    return info


def encode_grid(grid: GridSample) -> bytes:
    arrays = {}
    record = {"grid_id": int(grid.grid_id), "lon": grid.lon, "lat": grid.lat, "modalities": {}}
    for mid, patches in grid.modalities.items():
        record["modalities"][mid] = [[r.meta_dict() for r in series] for series in patches]
        for k, series in enumerate(patches):
            for t, r in enumerate(series):
                arrays[f"{mid}/{k}/{t}"] = r.image.astype(np.float32)
    buf = io.BytesIO()
    write_archive(buf, arrays, record)
    return buf.getvalue()


def decode_grid(data: bytes) -> GridSample:
    arrays, record = read_archive(io.BytesIO(data))
    mods = {}
    for mid, patches in record["modalities"].items():
        mods[mid] = [
            [ImageRecord(arrays[f"{mid}/{k}/{t}"], **meta) for t, meta in enumerate(series)]
            for k, series in enumerate(patches)
        ]
    return GridSample(record["grid_id"], record["lon"], record["lat"], mods)


def write_dataset(
    root: Path | str,
    grids: Sequence[GridSample],
    modalities: Sequence[str],
    grids_per_shard: int = 4,
    extra: dict | None = None,
) -> dict:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    shards = []
    for s in range(0, len(grids), grids_per_shard):
        chunk = grids[s : s + grids_per_shard]
        fname = f"shard-{s // grids_per_shard:05d}.tar"
        with tarfile.open(root / fname, "w", format=tarfile.USTAR_FORMAT) as tf:
            for grid in chunk:
                data = encode_grid(grid)
                tf.addfile(_tarinfo(f"{int(grid.grid_id):08d}.npz", len(data)), io.BytesIO(data))
        shards.append({"file": fname, "grid_ids": [int(g.grid_id) for g in chunk]})
    manifest = {"format_version": FORMAT_VERSION, "modalities": list(modalities), "shards": shards, **(extra or {})}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


class GridDataset:
    """Reader over a sharded dataset directory."""

    def __init__(self, root: Path | str) -> None:
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
        self.manifest = json.loads(manifest_path.read_text())
        if self.manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{self.root}: unsupported dataset format")
        self.grid_ids = [gid for s in self.manifest["shards"] for gid in s["grid_ids"]]

    def __len__(self) -> int:
        return len(self.grid_ids)

    def iter_shard(self, shard: dict) -> Iterator[GridSample]:
        with tarfile.open(self.root / shard["file"]) as tf:
            for member in tf.getmembers():
                yield decode_grid(tf.extractfile(member).read())

    def __iter__(self) -> Iterator[GridSample]:
        for shard in self.manifest["shards"]:
            yield from self.iter_shard(shard)

    def load_all(self) -> list[GridSample]:
        return list(self)

    @property
    def geometry(self) -> GridGeometry | None:
        g = self.manifest.get("geometry")
        return GridGeometry(**g) if g else None


# -- synthetic generator ----------------------------------------------------------------


@dataclass(frozen=True)
class SeriesLayout:
    patches: tuple[int, int]  # inclusive range of local patches per grid
    timestamps: tuple[int, int]  # inclusive range of timestamps per patch


DESK_LAYOUT = {
    "s1_grd": SeriesLayout((1, 2), (1, 4)),
    "s2_toa": SeriesLayout((1, 2), (1, 4)),
    "s3_olci": SeriesLayout((1, 1), (1, 8)),
    "s5p_co": SeriesLayout((1, 1), (1, 12)),
    "s5p_no2": SeriesLayout((1, 1), (1, 12)),
    "s5p_so2": SeriesLayout((1, 1), (1, 12)),
    "s5p_o3": SeriesLayout((1, 1), (1, 12)),
    "dem": SeriesLayout((1, 1), (1, 1)),
}

S5P_SCALE = {"s5p_co": 0.03, "s5p_no2": 1e-4, "s5p_so2": 2e-4, "s5p_o3": 0.12}
ANCHOR_YEAR_START = days_since_epoch(dt.date(2021, 1, 1))
DEM_DAYS = days_since_epoch(dt.date(2015, 1, 1))


def smooth_field(rng: np.random.Generator, channels: int, size: tuple[int, int], sigma: float) -> np.ndarray:
    """Channel-correlated Gaussian-smoothed noise, roughly unit variance per channel."""
    base = gaussian_filter(rng.standard_normal(size), sigma, mode="wrap")
    base /= base.std() + 1e-12
    out = np.empty((channels, *size))
    for c in range(channels):
        own = gaussian_filter(rng.standard_normal(size), sigma, mode="wrap")
        own /= own.std() + 1e-12
        out[c] = 0.8 * base + 0.6 * own
    return out


def _synthetic_image(
    mid: str, spec: ModalitySpec, terrain: np.ndarray, rng: np.random.Generator, t_frac: float
) -> np.ndarray:
    h, w = spec.native_size
    sigma = max(h, w) / 10.0
    ground = resize_image(terrain[None].astype(np.float32), (h, w))[0]
    noise = smooth_field(rng, spec.num_channels, (h, w), sigma)
    season = math.sin(2 * math.pi * t_frac)
    field_ = 0.7 * ground[None] + 0.5 * noise + 0.3 * season
    if mid in SYNTH_STATS:
        mean, std = (np.asarray(v).reshape(-1, 1, 1) for v in SYNTH_STATS[mid])
        img = mean + std * field_
    elif mid == "s3_olci":
        img = 4000.0 + 1500.0 * field_
    elif mid in S5P_SCALE:
        img = S5P_SCALE[mid] * (1.0 + 0.3 * field_)
        if rng.random() < 0.3:
            r0, c0 = rng.integers(0, h // 2), rng.integers(0, w // 2)
            img[:, r0 : r0 + h // 4, c0 : c0 + w // 4] = np.nan
    else:  # dem, meters
        img = np.maximum(800.0 + 600.0 * field_, 0.0)
    return img.astype(np.float32)


def synthetic_grid(
    grid_id: int,
    geometry: GridGeometry,
    modalities: Mapping[str, ModalitySpec],
    rng: np.random.Generator,
    layout: Mapping[str, SeriesLayout] = DESK_LAYOUT,
) -> GridSample:
    lon, lat = geometry.center(grid_id)
    terrain = smooth_field(rng, 1, (32, 32), 4.0)[0]
    mods = {}
    for mid, spec in modalities.items():
        lay = layout[mid]
        n_patch = int(rng.integers(lay.patches[0], lay.patches[1] + 1))
        patches = []
        for _ in range(n_patch):
            n_t = int(rng.integers(lay.timestamps[0], lay.timestamps[1] + 1))
            p_lon = lon + float(rng.uniform(-0.1, 0.1)) if n_patch > 1 else lon
            p_lat = lat + float(rng.uniform(-0.1, 0.1)) if n_patch > 1 else lat
            p_lat = float(np.clip(p_lat, -90, 90))
            p_lon = (p_lon + 180.0) % 360.0 - 180.0
            series = []
            for t in range(n_t):
                if mid == "dem":
                    days = DEM_DAYS
                elif mid.startswith("s5p"):
                    days = days_since_epoch(dt.date(2021, t + 1, 1))
                else:
                    days = ANCHOR_YEAR_START + int(rng.integers(0, 365))
                frac = (days - ANCHOR_YEAR_START) / 365.25
                img = _synthetic_image(mid, spec, terrain, rng, frac)
                series.append(ImageRecord(img, p_lon, p_lat, spec.gsd_m, float(days)))
            patches.append(series)
        mods[mid] = patches
    return GridSample(int(grid_id), lon, lat, mods)


def generate_synthetic(
    root: Path | str | None,
    n_grids: int,
    modalities: Mapping[str, ModalitySpec],
    seed: int = 0,
    geometry: GridGeometry | None = None,
    layout: Mapping[str, SeriesLayout] = DESK_LAYOUT,
    grids_per_shard: int = 4,
) -> list[GridSample]:
    """Generate ``n_grids`` distinct cells of ``geometry``; write shards if ``root`` is given."""
    geometry = geometry or GridGeometry()
    total = geometry.rows * geometry.cols
    if n_grids > total:
        raise ValueError(f"cannot place {n_grids} grids in a geometry of {total} cells")
    seq = np.random.SeedSequence(seed)
    pick_rng = np.random.default_rng(seq.spawn(1)[0])
    ids = np.sort(pick_rng.choice(total, size=n_grids, replace=False))
    grid_rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed + 1).spawn(n_grids)]
    grids = [synthetic_grid(int(g), geometry, modalities, r, layout) for g, r in zip(ids, grid_rngs)]
    if root is not None:
        write_dataset(
            root, grids, list(modalities), grids_per_shard,
            extra={"geometry": geometry.to_dict(), "seed": seed,
                   "registry": {k: m.to_dict() for k, m in modalities.items()}},
        )
    return grids
