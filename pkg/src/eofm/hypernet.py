"""Hypernetwork-generated patch embeddings.

Kernels for the patch-embedding convolution are produced from per-channel encodings:
Fourier-encoded wavelength + bandwidth for spectral sensors, or an embedding of the
variable name for non-spectral products. Kernels are generated at a base patch size and
resized to each modality's patch size with pseudo-inverse (PI) resizing.
"""

from __future__ import annotations

import configparser
import functools
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .encodings import EncodingRangeRegistry, fourier_features
from .layers import Block, Mlp

FIXTURES = Path(__file__).parent / "fixtures"

VariableStrategy = Literal["language", "random-hash", "spectroscopy"]


class InvalidSpecError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralBandSpec:
    wavelengths: tuple[float, ...]
    bandwidths: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "wavelengths", tuple(float(v) for v in self.wavelengths))
        object.__setattr__(self, "bandwidths", tuple(float(v) for v in self.bandwidths))
        if len(self.wavelengths) != len(self.bandwidths) or not self.wavelengths:
            raise InvalidSpecError("wavelengths and bandwidths need equal, non-zero length")
        if min(self.wavelengths) <= 0 or min(self.bandwidths) <= 0:
            raise InvalidSpecError("wavelengths and bandwidths must be strictly positive")

    @property
    def num_channels(self) -> int:
        return len(self.wavelengths)

    def subset(self, indices: Sequence[int]) -> SpectralBandSpec:
        return SpectralBandSpec(
            tuple(self.wavelengths[i] for i in indices),
            tuple(self.bandwidths[i] for i in indices),
        )


@dataclass(frozen=True)
class VariableSpec:
    name: str
    strategy: VariableStrategy = "language"

    def __post_init__(self) -> None:
        if self.strategy not in ("language", "random-hash", "spectroscopy"):
            raise InvalidSpecError(f"unknown variable encoding strategy {self.strategy!r}")

    @property
    def num_channels(self) -> int:
        return 1


@dataclass
class PatchKernel:
    weights: Tensor  # [D, C, p, p]
    bias: Tensor  # [D]
    patch_size: int


def load_band_tables(path: Path | None = None) -> dict[str, SpectralBandSpec]:
    """Read per-sensor wavelength/bandwidth lists from an INI file."""
    parser = configparser.ConfigParser()
    parser.read(path or FIXTURES / "spectral_bands.ini")
    tables = {}
    for sensor in parser.sections():
        sec = parser[sensor]
        tables[sensor] = SpectralBandSpec(
            tuple(float(v) for v in sec["wavelengths"].split(",")),
            tuple(float(v) for v in sec["bandwidths"].split(",")),
        )
    return tables


def spectral_encode(
    spec: SpectralBandSpec, dim: int, registry: EncodingRangeRegistry | None = None
) -> Tensor:
    """Per-channel spectral encoding ``FE_wave(lambda_c) + FE_band(delta_c)``, shape [C, dim]."""
    registry = registry or EncodingRangeRegistry()
    waves = torch.tensor(spec.wavelengths, dtype=torch.float64)
    bands = torch.tensor(spec.bandwidths, dtype=torch.float64)
    enc = fourier_features(waves, registry.config("wavelength", dim)) + fourier_features(
        bands, registry.config("bandwidth", dim)
    )
    return enc.to(torch.get_default_dtype())


# -- PI-resize -----------------------------------------------------------------------


def bilinear_matrix_1d(size_in: int, size_out: int) -> np.ndarray:
    """Matrix ``A`` [size_out, size_in] of half-pixel bilinear (linear) interpolation.

    Matches ``F.interpolate(mode="bilinear", align_corners=False, antialias=False)``
    along one axis.
    """
    a = np.zeros((size_out, size_in), dtype=np.float64)
    scale = size_in / size_out
    for i in range(size_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size_in - 1)
        i1 = min(i0 + 1, size_in - 1)
        frac = src - i0
        a[i, i0] += 1.0 - frac
        a[i, i1] += frac
    return a


@functools.lru_cache(maxsize=None)
def bilinear_matrix(size_in: int, size_out: int) -> np.ndarray:
    """Matrix ``B`` [size_out^2, size_in^2] resizing a row-major flattened square patch."""
    a = bilinear_matrix_1d(size_in, size_out)
    return np.kron(a, a)


@functools.lru_cache(maxsize=None)
def pi_resize_matrix(base: int, target: int) -> np.ndarray:
    """Matrix ``M`` [base^2, target^2] with ``K' = K @ M`` preserving ``<K', Bx> = <K, x>``.

    Downsizing: ``M = B^T (B B^T)^-1`` (exact on the row space of B). Upsizing: ``B`` has
    full column rank and ``M = (B^T B)^-1 B^T`` (exact for every x). Both equal pinv(B).
    """
    if base < 1 or target < 1:
        raise ConfigurationError("patch sizes must be >= 1")
    b = bilinear_matrix(base, target)
    if target <= base:
        gram = b @ b.T
        assert np.linalg.matrix_rank(gram) == gram.shape[0], "singular B B^T"
        return np.linalg.solve(gram, b).T
    gram = b.T @ b
    assert np.linalg.matrix_rank(gram) == gram.shape[0], "singular B^T B"
    return np.linalg.solve(gram, b.T)


def resize_kernel(weights: Tensor, target: int) -> Tensor:
    """PI-resize a [D, C, p0, p0] kernel to [D, C, target, target]; identity when equal."""
    d, c, p0, p0w = weights.shape
    if p0 != p0w:
        raise ConfigurationError("kernel must be square")
    if target == p0:
        return weights
    m = torch.from_numpy(pi_resize_matrix(p0, target)).to(weights)
    return (weights.reshape(d * c, p0 * p0) @ m).reshape(d, c, target, target)


def resize_pixels(values: Tensor, base: int, target: int) -> Tensor:
    """Bilinearly resize the trailing flattened [base*base] pixel axis to [target*target]."""
    if base == target:
        return values
    b = torch.from_numpy(bilinear_matrix(base, target)).to(values)
    return values @ b.T


# -- patchify --------------------------------------------------------------------------


def patchify(image: Tensor, kernel: PatchKernel) -> Tensor:
    """Non-overlapping stride-p convolution: [C, H, W] -> [N, D] or [B, C, H, W] -> [B, N, D]."""
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    p = kernel.patch_size
    h, w = image.shape[-2:]
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    if image.shape[1] != kernel.weights.shape[1]:
        raise ValueError(
            f"image has {image.shape[1]} channels, kernel expects {kernel.weights.shape[1]}"
        )
    out = F.conv2d(image, kernel.weights, kernel.bias, stride=p)
    tokens = out.flatten(2).transpose(1, 2)
    return tokens[0] if squeeze else tokens


def patches(image: Tensor, p: int) -> Tensor:
    """Flatten [B, C, H, W] into per-patch pixel vectors [B, N, C*p*p], ordered (c, i, j)."""
    b, c, h, w = image.shape
    x = image.reshape(b, c, h // p, p, w // p, p)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // p) * (w // p), c * p * p)


# -- hypernetworks ----------------------------------------------------------------------


class ResidualMlp(nn.Module):
    def __init__(self, dim: int) -> None:
        super().__init__()
        self.mlp = Mlp(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.mlp(x)


class HyperNetwork(nn.Module):
    """Map C channel encodings to per-channel weight and bias vectors.

    The C encoding rows (after a residual MLP) and two learnable query tokens attend to
    each other in one transformer block; each channel's weight row is read from its
    output plus the weight query, likewise for the bias.
    """

    def __init__(self, enc_dim: int, weight_dim: int, bias_dim: int, num_heads: int = 4) -> None:
        super().__init__()
        self.mlp = ResidualMlp(enc_dim)
        self.weight_query = nn.Parameter(torch.zeros(enc_dim))
        self.bias_query = nn.Parameter(torch.zeros(enc_dim))
        self.block = Block(enc_dim, num_heads, mlp_ratio=2.0)
        self.weight_head = nn.Linear(enc_dim, weight_dim)
        self.bias_head = nn.Linear(enc_dim, bias_dim)
        nn.init.normal_(self.weight_query, std=0.02)
        nn.init.normal_(self.bias_query, std=0.02)

    def forward(self, encoding: Tensor) -> tuple[Tensor, Tensor]:
        h = self.mlp(encoding)
        tokens = torch.cat([h, self.weight_query[None], self.bias_query[None]], dim=0)
        out = self.block(tokens)
        chans, q_w, q_b = out[:-2], out[-2], out[-1]
        return self.weight_head(chans + q_w), self.bias_head(chans + q_b)


class DynamicPatchEmbed(nn.Module):
    """Generate [D, C, p, p] patch-embedding kernels from channel encodings."""

    def __init__(
        self,
        enc_dim: int,
        embed_dim: int,
        base_patch: int = 16,
        patch_sizes: Sequence[int] = (4, 8, 16, 32, 64),
        num_heads: int = 4,
        scale: float = 0.01,
    ) -> None:
        super().__init__()
        self.enc_dim = enc_dim
        self.embed_dim = embed_dim
        self.base_patch = base_patch
        self.patch_sizes = tuple(patch_sizes)
        self.scale = scale
        self.hypernet = HyperNetwork(enc_dim, base_patch * base_patch * embed_dim, embed_dim, num_heads)

    def generate_kernel(self, encoding: Tensor, patch_size: int) -> PatchKernel:
        if patch_size not in self.patch_sizes:
            raise ConfigurationError(
                f"patch size {patch_size} not in supported set {self.patch_sizes}"
            )
        c = encoding.shape[0]
        p0, d = self.base_patch, self.embed_dim
        w_rows, b_rows = self.hypernet(encoding)
        weights = w_rows.reshape(c, d, p0, p0).transpose(0, 1) * self.scale
        bias = b_rows.mean(dim=0) * self.scale
        return PatchKernel(resize_kernel(weights, patch_size), bias, patch_size)

    def forward(self, image: Tensor, encoding: Tensor, patch_size: int) -> Tensor:
        return patchify(image, self.generate_kernel(encoding, patch_size))


class DynamicPatchPredictor(nn.Module):
    """Fully connected head from decoder tokens to flattened pixels of any modality.

    Weights are generated at the base patch size and bilinearly resampled along the pixel
    axes to the modality's patch size.
    """

    def __init__(self, enc_dim: int, decoder_dim: int, base_patch: int = 16, num_heads: int = 4) -> None:
        super().__init__()
        self.decoder_dim = decoder_dim
        self.base_patch = base_patch
        p2 = base_patch * base_patch
        self.hypernet = HyperNetwork(enc_dim, p2 * decoder_dim, p2, num_heads)

    def forward(self, x: Tensor, encoding: Tensor, patch_size: int) -> Tensor:
        c = encoding.shape[0]
        p0, p = self.base_patch, patch_size
        w_rows, b_rows = self.hypernet(encoding)
        # [C, Ddec, p0*p0] -> resample pixel axis -> [C, p*p, Ddec]
        w = resize_pixels(w_rows.reshape(c, self.decoder_dim, p0 * p0), p0, p).transpose(1, 2)
        b = resize_pixels(b_rows, p0, p)
        return x @ w.reshape(c * p * p, self.decoder_dim).T + b.reshape(c * p * p)


# -- variable encodings --------------------------------------------------------------


class EmbeddingStore:
    """Directory of precomputed variable-name embeddings.

    ``manifest.txt`` holds one ``<name>\\t<file.npy>`` line per variable; each file is a
    1-D float array.
    """

    def __init__(self, root: Path | str | None = None) -> None:
        self.root = Path(root) if root is not None else FIXTURES / "variable_embeddings"
        manifest = self.root / "manifest.txt"
        self.files: dict[str, str] = {}
        if manifest.exists():
            for line in manifest.read_text().splitlines():
                if line.strip():
                    name, fname = line.split("\t")
                    self.files[name] = fname

    def load(self, name: str) -> np.ndarray:
        if name not in self.files:
            raise FileNotFoundError(f"no precomputed embedding for variable {name!r} in {self.root}")
        path = self.root / self.files[name]
        if not path.exists():
            raise FileNotFoundError(f"embedding file {path} for variable {name!r} is missing")
        vec = np.load(path)
        if vec.ndim != 1 or not np.isfinite(vec).all():
            raise ValueError(f"embedding for {name!r} must be a finite 1-D vector")
        return vec

    @staticmethod
    def write(root: Path | str, vectors: dict[str, np.ndarray]) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        lines = []
        for i, (name, vec) in enumerate(vectors.items()):
            fname = f"var{i:03d}.npy"
            np.save(root / fname, np.asarray(vec, dtype=np.float32))
            lines.append(f"{name}\t{fname}")
        (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def random_hash_embedding(name: str, dim: int) -> np.ndarray:
    """Seeded Gaussian vector derived from a SHA-256 digest of ``name``."""
    seed = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(dim).astype(np.float32)


def load_spectroscopy_table(path: Path | None = None) -> dict[str, SpectralBandSpec]:
    return load_band_tables(path or FIXTURES / "spectroscopy_proxies.ini")


class VariableEncoder(nn.Module):
    """Turn a :class:`VariableSpec` into a [1, enc_dim] channel encoding.

    ``language`` and ``random-hash`` vectors pass through a linear adapter from the
    language-embedding width; ``spectroscopy`` reuses the spectral encoding of a proxy
    wavelength/bandwidth.
    """

    def __init__(
        self,
        enc_dim: int,
        lang_dim: int = 2048,
        store: EmbeddingStore | None = None,
        registry: EncodingRangeRegistry | None = None,
    ) -> None:
        super().__init__()
        self.enc_dim = enc_dim
        self.lang_dim = lang_dim
        self.adapter = nn.Linear(lang_dim, enc_dim)
        self.store = store or EmbeddingStore()
        self.registry = registry or EncodingRangeRegistry()
        self._proxies: dict[str, SpectralBandSpec] | None = None

    def raw_embedding(self, spec: VariableSpec) -> np.ndarray:
        if spec.strategy == "language":
            vec = self.store.load(spec.name)
        else:
            vec = random_hash_embedding(spec.name, self.lang_dim)
        if vec.shape[0] != self.lang_dim:
            raise ValueError(
                f"embedding for {spec.name!r} has dim {vec.shape[0]}, adapter expects {self.lang_dim}"
            )
        return vec

    def forward(self, spec: VariableSpec) -> Tensor:
        if spec.strategy == "spectroscopy":
            if self._proxies is None:
                self._proxies = load_spectroscopy_table()
            if spec.name not in self._proxies:
                raise FileNotFoundError(f"no spectroscopy proxy for variable {spec.name!r}")
            return spectral_encode(self._proxies[spec.name], self.enc_dim, self.registry).to(
                self.adapter.weight
            )
        vec = torch.from_numpy(self.raw_embedding(spec)).to(self.adapter.weight)
        return self.adapter(vec)[None]
