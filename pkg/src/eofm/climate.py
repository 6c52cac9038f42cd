"""Grid embeddings and linear regression of climate statistics from them.

A grid embedding is the unweighted mean of the pooled encoder outputs of one sampled
image per available modality. Climate targets are regressed by closed-form least squares
from four feature sets: raw coordinates, Fourier-encoded coordinates, embeddings, and
embeddings plus raw coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from .archive import read_archive, write_archive
from .backbone import Encoder, ModalitySpec
from .data import GridGeometry, GridSample, NormalizationSpec, center_view, normalize, sample_iteration_view
from .encodings import EncodingRangeRegistry, fourier_encode

CLIMATE_PARAMETERS = (
    ("temperature", "degC"),
    ("precipitation", "m"),
    ("surface_pressure", "Pa"),
    ("sea_level_pressure", "Pa"),
    ("u_wind", "m/s"),
    ("v_wind", "m/s"),
)
TARGET_NAMES = tuple(f"{p}_{stat}" for p, _ in CLIMATE_PARAMETERS for stat in ("mean", "std"))
FEATURE_SETS = ("coords_raw", "coords_fe", "embed", "embed_coords")
RIDGE = 1e-6


class EmptyGridError(ValueError):
    pass


class GeometryError(ValueError):
    pass


@dataclass
class GridEmbedding:
    grid_id: int
    vector: np.ndarray  # [D] float64
    num_modalities: int


# -- embeddings -------------------------------------------------------------------------


def grid_rng(seed: int, grid_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, int(grid_id)])


@torch.no_grad()
def embed_grids(
    grids: Sequence[GridSample],
    encoder: Encoder,
    modalities: Mapping[str, ModalitySpec],
    seed: int = 0,
    norm: NormalizationSpec | None = None,
    batch: int = 32,
) -> list[GridEmbedding]:
    """One embedding per grid; each grid's image picks depend only on (seed, grid id)."""
    encoder.eval()
    norm = norm or NormalizationSpec.default(modalities)
    per_mod: dict[str, list[tuple[int, np.ndarray, object]]] = {m: [] for m in modalities}
    for gi, grid in enumerate(grids):
        view = sample_iteration_view(grid, grid_rng(seed, grid.grid_id), list(modalities), missing="skip")
        if not view:
            raise EmptyGridError(f"grid {grid.grid_id} has no images for any registered modality")
        for mid, rec in view.items():
            if not grid.normalized:
                rec = type(rec)(normalize(rec.image, mid, norm), rec.lon, rec.lat, rec.gsd_m, rec.time_days)
            img, meta = center_view(rec, modalities[mid].crop)
            per_mod[mid].append((gi, img, meta))

    d = encoder.embed_dim
    sums = np.zeros((len(grids), d))
    counts = np.zeros(len(grids), dtype=np.int64)
    for mid, items in per_mod.items():
        for s in range(0, len(items), batch):
            chunk = items[s : s + batch]
            images = torch.from_numpy(np.stack([c[1] for c in chunk]))
            pooled = encoder(images, [c[2] for c in chunk], modalities[mid]).pooled.double().numpy()
            for (gi, _, _), v in zip(chunk, pooled):
                sums[gi] += v
                counts[gi] += 1
    return [GridEmbedding(g.grid_id, sums[i] / counts[i], int(counts[i])) for i, g in enumerate(grids)]


def embed_grid(grid: GridSample, encoder: Encoder, modalities: Mapping[str, ModalitySpec], seed: int = 0,
               norm: NormalizationSpec | None = None) -> GridEmbedding:
    return embed_grids([grid], encoder, modalities, seed, norm)[0]


def write_embeddings(path: Path | str, embeddings: Sequence[GridEmbedding], extra: dict | None = None) -> None:
    arrays = {f"grid/{e.grid_id}": e.vector for e in embeddings}
    manifest = {"grid_ids": [e.grid_id for e in embeddings],
                "num_modalities": [e.num_modalities for e in embeddings], **(extra or {})}
    write_archive(path, arrays, manifest)


def read_embeddings(path: Path | str) -> tuple[list[GridEmbedding], dict]:
    arrays, manifest = read_archive(path)
    embs = [GridEmbedding(g, arrays[f"grid/{g}"], n) for g, n in zip(manifest["grid_ids"], manifest["num_modalities"])]
    return embs, manifest


# -- features and targets ------------------------------------------------------------------


def fourier_coords(lon: np.ndarray, lat: np.ndarray, dim: int = 64,
                   registry: EncodingRangeRegistry | None = None) -> np.ndarray:
    """Per-grid [lon FE, lat FE] with the location ranges and +180/+90 shifts."""
    reg = registry or EncodingRangeRegistry()
    lo, la = reg.config("longitude", dim), reg.config("latitude", dim)
    return np.stack([np.concatenate([fourier_encode(x + 180.0, lo), fourier_encode(y + 90.0, la)])
                     for x, y in zip(lon, lat)])


def feature_sets(lon: np.ndarray, lat: np.ndarray, embeddings: np.ndarray, fe_dim: int = 64) -> dict[str, np.ndarray]:
    raw = np.stack([lon, lat], axis=1).astype(np.float64)
    return {
        "coords_raw": raw,
        "coords_fe": fourier_coords(lon, lat, fe_dim),
        "embed": np.asarray(embeddings, dtype=np.float64),
        "embed_coords": np.concatenate([embeddings, raw], axis=1),
    }


def synthetic_climate_targets(
    lon: np.ndarray, lat: np.ndarray, embeddings: np.ndarray, seed: int = 0, noise: float = 0.05,
    planted: float = 1.0,
) -> np.ndarray:
    """[N, 12] targets: smooth latitude profiles plus a planted linear embedding component.

    Means and stds are built alike; stds get a positive offset and are clipped at zero.
    """
    rng = np.random.default_rng(seed)
    n = len(lat)
    emb = np.asarray(embeddings, dtype=np.float64)
    emb = (emb - emb.mean(0)) / (emb.std(0) + 1e-12)
    phi = np.deg2rad(lat)
    cols = []
    for _ in CLIMATE_PARAMETERS:
        for stat in ("mean", "std"):
            a, b = rng.normal(size=2)
            w = rng.normal(size=emb.shape[1]) / np.sqrt(emb.shape[1])
            y = a * np.cos(phi) + 0.3 * b * np.sin(2 * phi) + planted * emb @ w + noise * rng.standard_normal(n)
            if stat == "std":
                y = np.maximum(y + 4.0, 0.0)
            cols.append(y)
    return np.stack(cols, axis=1)


# -- regression -------------------------------------------------------------------------


@dataclass
class OlsFit:
    coef: np.ndarray  # [F + 1, T], intercept first
    ridge: bool

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.coef[0] + np.asarray(x, dtype=np.float64) @ self.coef[1:]


def fit_ols(x: np.ndarray, y: np.ndarray, ridge: float = RIDGE) -> OlsFit:
    """Least squares with intercept; a tiny ridge (intercept unpenalised) if rank deficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    y2 = y[:, None] if y.ndim == 1 else y
    design = np.concatenate([np.ones((len(x), 1)), x], axis=1)
    if np.linalg.matrix_rank(design) == design.shape[1]:
        coef = np.linalg.lstsq(design, y2, rcond=None)[0]
        return OlsFit(coef, False)
    # center so the unpenalised intercept decouples from the penalised slopes
    mx, my = x.mean(0), y2.mean(0)
    xc, yc = x - mx, y2 - my
    slopes = np.linalg.solve(xc.T @ xc + ridge * np.eye(x.shape[1]), xc.T @ yc)
    return OlsFit(np.vstack([my - mx @ slopes, slopes]), True)


def split_indices(n: int, seed: int, fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)) -> dict[str, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_tr = int(round(fractions[0] * n))
    n_va = int(round(fractions[1] * n))
    return {"train": perm[:n_tr], "val": perm[n_tr : n_tr + n_va], "test": perm[n_tr + n_va :]}


def rmse_columns(pred: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean((pred - y) ** 2, axis=0))


@dataclass
class RegressionTable:
    """Per feature set and target: test (and train) RMSE for each seed."""

    target_names: tuple[str, ...]
    test: dict[str, np.ndarray]  # feature set -> [seeds, T]
    train: dict[str, np.ndarray]
    ridge: dict[str, list[bool]]
    seeds: tuple[int, ...]

    def mean(self, fs: str) -> np.ndarray:
        return self.test[fs].mean(axis=0)

    def std(self, fs: str) -> np.ndarray:
        return self.test[fs].std(axis=0)

    def to_dict(self) -> dict:
        return {
            "targets": list(self.target_names),
            "seeds": list(self.seeds),
            "rows": {
                fs: {"test_mean": self.mean(fs).tolist(), "test_std": self.std(fs).tolist(),
                     "test_runs": self.test[fs].tolist(), "train_runs": self.train[fs].tolist(),
                     "ridge": self.ridge[fs]}
                for fs in self.test
            },
        }

    def text(self) -> str:
        width = max(len(n) for n in self.target_names) + 2
        lines = [f"{'features':<14}" + "".join(f"{n:>{width}}" for n in self.target_names)]
        for fs in self.test:
            cells = "".join(f"{f'{m:.4g}±{s:.2g}':>{width}}" for m, s in zip(self.mean(fs), self.std(fs)))
            lines.append(f"{fs:<14}" + cells)
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path | str) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "rmse.txt").write_text(self.text())
        (out / "rmse.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def regress(
    features: Mapping[str, np.ndarray],
    targets: np.ndarray,
    target_names: Sequence[str] = TARGET_NAMES,
    seeds: Sequence[int] = (0, 1, 2),
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> RegressionTable:
    targets = np.asarray(targets, dtype=np.float64)
    test, train, ridge = {}, {}, {}
    for fs, x in features.items():
        if len(x) != len(targets):
            raise ValueError(f"feature set {fs} has {len(x)} rows, targets have {len(targets)}")
        test[fs], train[fs], ridge[fs] = [], [], []
        for seed in seeds:
            sp = split_indices(len(targets), seed, fractions)
            fit = fit_ols(x[sp["train"]], targets[sp["train"]])
            train[fs].append(rmse_columns(fit.predict(x[sp["train"]]), targets[sp["train"]]))
            test[fs].append(rmse_columns(fit.predict(x[sp["test"]]), targets[sp["test"]]))
            ridge[fs].append(fit.ridge)
        test[fs], train[fs] = np.stack(test[fs]), np.stack(train[fs])
    return RegressionTable(tuple(target_names), test, train, ridge, tuple(seeds))


# -- map export ---------------------------------------------------------------------------


def embedding_map(embeddings: Sequence[GridEmbedding], geometry: GridGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Dense [rows, cols, D] map with zero-filled absent cells, plus a presence mask."""
    if not embeddings:
        raise ValueError("no embeddings to export")
    ids = [e.grid_id for e in embeddings]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate grid ids {dup}")
    d = len(embeddings[0].vector)
    out = np.zeros((geometry.rows, geometry.cols, d), dtype=np.float32)
    present = np.zeros((geometry.rows, geometry.cols), dtype=bool)
    for e in embeddings:
        try:
            r, c = geometry.index(e.grid_id)
        except ValueError as exc:
            raise GeometryError(str(exc)) from None
        out[r, c] = e.vector
        present[r, c] = True
    return out, present


def pca_rgb(values: np.ndarray, present: np.ndarray) -> np.ndarray:
    """Top-3 principal components of present cells scaled to uint8; absent cells black.

    Zero-variance components map to mid-grey, so identical embeddings give one colour.
    """
    rows, cols, d = values.shape
    rgb = np.zeros((rows, cols, 3), dtype=np.uint8)
    x = values[present].astype(np.float64)
    if len(x) == 0:
        return rgb
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    comps = np.zeros((len(x), 3))
    k = min(3, len(s))
    comps[:, :k] = xc @ vt[:k].T
    scaled = np.full_like(comps, 128.0)
    for j in range(3):
        lo, hi = comps[:, j].min(), comps[:, j].max()
        if hi - lo > 1e-9 * max(1.0, np.abs(comps).max()):
            scaled[:, j] = (comps[:, j] - lo) / (hi - lo) * 255.0
    rgb[present] = np.round(scaled).astype(np.uint8)
    return rgb


def export_embedding_map(
    embeddings: Sequence[GridEmbedding], geometry: GridGeometry, out_dir: Path | str, image: bool = True
) -> np.ndarray:
    """Write ``map.npz`` (map, presence mask, manifest) and optionally ``map_pca.png``."""
    values, present = embedding_map(embeddings, geometry)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"geometry": geometry.to_dict(), "shape": list(values.shape),
                "num_present": int(present.sum()), "fill_value": 0.0}
    write_archive(out / "map.npz", {"map": values, "present": present}, manifest)
    if image:
        Image.fromarray(pca_rgb(values, present), mode="RGB").save(out / "map_pca.png")
    return values


def load_embedding_map(out_dir: Path | str) -> tuple[np.ndarray, np.ndarray, GridGeometry]:
    arrays, manifest = read_archive(Path(out_dir) / "map.npz")
    return arrays["map"], arrays["present"], GridGeometry(**manifest["geometry"])
