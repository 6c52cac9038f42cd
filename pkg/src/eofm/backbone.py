"""Shared ViT encoder over dynamically patchified modalities."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .archive import read_archive, write_archive
from .encodings import EncodingRangeRegistry
from .hypernet import (
    DynamicPatchEmbed,
    EmbeddingStore,
    PatchKernel,
    SpectralBandSpec,
    VariableEncoder,
    VariableSpec,
    load_band_tables,
    patchify,
    spectral_encode,
)
from .layers import Block, init_vit_weights, sincos_2d
from .metadata import MetadataEncoder, MetadataRecord

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModalitySpec:
    id: str
    kind: Literal["spectral", "variable"]
    gsd_m: float
    patch_size: int
    crop: tuple[int, int]
    native_size: tuple[int, int]
    bands: SpectralBandSpec | None = None
    variable: VariableSpec | None = None

    def __post_init__(self) -> None:
        if self.kind == "spectral" and self.bands is None:
            raise ValueError(f"spectral modality {self.id} needs a band spec")
        if self.kind == "variable" and self.variable is None:
            raise ValueError(f"variable modality {self.id} needs a variable spec")
        h, w = self.crop
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(
                f"{self.id}: crop {self.crop} not divisible by patch size {self.patch_size}"
            )

    @property
    def num_channels(self) -> int:
        return self.bands.num_channels if self.kind == "spectral" else self.variable.num_channels

    @property
    def grid(self) -> tuple[int, int]:
        return self.crop[0] // self.patch_size, self.crop[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop"] = list(self.crop)
        d["native_size"] = list(self.native_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModalitySpec:
        d = dict(d)
        d["crop"] = tuple(d["crop"])
        d["native_size"] = tuple(d["native_size"])
        if d.get("bands"):
            d["bands"] = SpectralBandSpec(tuple(d["bands"]["wavelengths"]), tuple(d["bands"]["bandwidths"]))
        if d.get("variable"):
            d["variable"] = VariableSpec(**d["variable"])
        return cls(**d)


S5P_VARIABLES = {
    "s5p_co": "Sentinel 5P Carbon Monoxide",
    "s5p_no2": "Sentinel 5P Nitrogen Dioxide",
    "s5p_so2": "Sentinel 5P Sulfur Dioxide",
    "s5p_o3": "Sentinel 5P Ozone",
}
DEM_VARIABLE = "Copernicus DEM elevation"


def default_modalities(
    profile: Literal["paper", "desk"] = "desk", variable_strategy: str = "language"
) -> dict[str, ModalitySpec]:
    """The eight pretraining modalities with crops and patch sizes for a profile."""
    bands = load_band_tables()
    if profile == "paper":
        s12, s3, s5p, dem, dem_p, s12_native = 224, 96, 28, 960, 64, 264
    elif profile == "desk":
        s12, s3, s5p, dem, dem_p, s12_native = 64, 32, 28, 128, 32, 72
    else:
        raise ValueError(f"unknown profile {profile!r}")
    mods = [
        ModalitySpec("s1_grd", "spectral", 10.0, 16, (s12, s12), (s12_native,) * 2, bands=bands["s1_grd"]),
        ModalitySpec("s2_toa", "spectral", 10.0, 16, (s12, s12), (s12_native,) * 2, bands=bands["s2_toa"]),
        ModalitySpec("s3_olci", "spectral", 300.0, 8, (s3, s3), (s3, s3), bands=bands["s3_olci"]),
    ]
    for mid, name in S5P_VARIABLES.items():
        mods.append(
            ModalitySpec(mid, "variable", 1000.0, 4, (s5p, s5p), (s5p, s5p),
                         variable=VariableSpec(name, variable_strategy))
        )
    mods.append(
        ModalitySpec("dem", "variable", 30.0, dem_p, (dem, dem), (dem, dem),
                     variable=VariableSpec(DEM_VARIABLE, variable_strategy))
    )
    return {m.id: m for m in mods}


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 192
    depth: int = 3
    num_heads: int = 3
    mlp_ratio: float = 4.0
    enc_dim: int = 64  # hypernetwork encoding width
    hyper_heads: int = 4
    lang_dim: int = 2048
    base_patch: int = 16
    patch_sizes: tuple[int, ...] = (4, 8, 16, 32, 64)
    drop_prob: float = 0.7
    location_format: Literal["lonlat", "cartesian"] = "lonlat"
    positional: Literal["sincos2d"] = "sincos2d"

    @classmethod
    def preset(cls, name: str, **overrides) -> EncoderConfig:
        presets = {
            "tiny": dict(embed_dim=192, depth=3, num_heads=3, enc_dim=64),
            "small": dict(embed_dim=384, depth=12, num_heads=6, enc_dim=128),
            "base": dict(embed_dim=768, depth=12, num_heads=12, enc_dim=128),
        }
        return replace(cls(**presets[name]), **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_sizes"] = list(self.patch_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        d = dict(d)
        d["patch_sizes"] = tuple(d["patch_sizes"])
        return cls(**d)


@dataclass
class EncoderOutput:
    tokens: Tensor  # [B, N+1, D], class token first
    pooled: Tensor  # [B, D], mean of patch tokens
    modality: str
    hidden: list[Tensor] = field(default_factory=list)  # tapped block outputs, patch tokens only


def positional_encoding(grid_h: int, grid_w: int, dim: int) -> Tensor:
    return sincos_2d(dim, grid_h, grid_w)


class Encoder(nn.Module):
    def __init__(
        self,
        config: EncoderConfig | None = None,
        registry: EncodingRangeRegistry | None = None,
        store: EmbeddingStore | None = None,
    ) -> None:
        super().__init__()
        self.config = cfg = config or EncoderConfig()
        self.registry = registry or EncodingRangeRegistry()
        d = cfg.embed_dim
        kw = dict(base_patch=cfg.base_patch, patch_sizes=cfg.patch_sizes, num_heads=cfg.hyper_heads)
        self.spectral_embed = DynamicPatchEmbed(cfg.enc_dim, d, **kw)
        self.variable_embed = DynamicPatchEmbed(cfg.enc_dim, d, **kw)
        self.variable_encoder = VariableEncoder(cfg.enc_dim, cfg.lang_dim, store, self.registry)
        self.metadata = MetadataEncoder(d, cfg.drop_prob, self.registry, cfg.location_format)
        self.cls_token = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self.apply(init_vit_weights)
        nn.init.normal_(self.cls_token, std=0.02)

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def channel_encoding(self, modality: ModalitySpec) -> Tensor:
        """[C, enc_dim] encoding that conditions both the hypernetwork and the predictor."""
        if modality.kind == "spectral":
            return spectral_encode(modality.bands, self.config.enc_dim, self.registry).to(self.cls_token)
        return self.variable_encoder(modality.variable)

    def patch_kernel(self, modality: ModalitySpec, encoding: Tensor | None = None) -> PatchKernel:
        if encoding is None:
            encoding = self.channel_encoding(modality)
        embed = self.spectral_embed if modality.kind == "spectral" else self.variable_embed
        return embed.generate_kernel(encoding, modality.patch_size)

    def embed(
        self,
        images: Tensor,
        metas: Sequence[MetadataRecord],
        modality: ModalitySpec,
        training: bool = False,
        generator: torch.Generator | None = None,
        kernel: PatchKernel | None = None,
    ) -> Tensor:
        """Patch tokens plus positional and metadata encodings, [B, N, D]."""
        if images.shape[1] != modality.num_channels:
            raise ValueError(
                f"{modality.id}: expected {modality.num_channels} channels, got {images.shape[1]}"
            )
        if len(metas) != images.shape[0]:
            raise ValueError("one metadata record per image is required")
        kernel = kernel or self.patch_kernel(modality)
        x = patchify(images, kernel)
        p = modality.patch_size
        pos = positional_encoding(images.shape[-2] // p, images.shape[-1] // p, self.embed_dim).to(x)
        meta = self.metadata(metas, training, generator)
        return x + pos[None] + meta[:, None, :]

    def run_blocks(self, x: Tensor, taps: Sequence[int] = ()) -> tuple[Tensor, list[Tensor]]:
        """Prepend the class token, apply all blocks and the final norm.

        ``taps`` are 1-based block indices whose patch-token outputs are returned.
        """
        cls = self.cls_token.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1)
        tapped = {}
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i in taps:
                tapped[i] = x[:, 1:]
        bad = [t for t in taps if t not in tapped]
        if bad:
            raise ValueError(f"tap indices {bad} outside 1..{len(self.blocks)}")
        return self.norm(x), [tapped[t] for t in taps]

    def forward(
        self,
        image: Tensor,
        meta: MetadataRecord | Sequence[MetadataRecord],
        modality: ModalitySpec,
        training: bool = False,
        generator: torch.Generator | None = None,
        taps: Sequence[int] = (),
    ) -> EncoderOutput:
        single = image.dim() == 3
        if single:
            image = image[None]
            meta = [meta]
        x = self.embed(image, list(meta), modality, training, generator)
        tokens, hidden = self.run_blocks(x, taps)
        out = EncoderOutput(tokens, tokens[:, 1:].mean(dim=1), modality.id, hidden)
        if single:
            out.tokens, out.pooled = out.tokens[0], out.pooled[0]
            out.hidden = [h[0] for h in out.hidden]
        return out


def state_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(state, strict=True)


def save_encoder(
    path: Path | str,
    encoder: Encoder,
    modalities: dict[str, ModalitySpec],
    extra_arrays: dict[str, np.ndarray] | None = None,
    extra_manifest: dict | None = None,
) -> None:
    """Write the encoder weights and a manifest describing how to rebuild it."""
    manifest = {
        "format_version": FORMAT_VERSION,
        "encoder": encoder.config.to_dict(),
        "modalities": {k: m.to_dict() for k, m in modalities.items()},
        "modality_order": list(modalities),
        "encoding_ranges": encoder.registry.to_text(),
        **(extra_manifest or {}),
    }
    arrays = state_arrays(encoder, "encoder/")
    arrays.update(extra_arrays or {})
    write_archive(path, arrays, manifest)


def load_encoder(path: Path | str) -> tuple[Encoder, dict[str, ModalitySpec], dict[str, np.ndarray], dict]:
    arrays, manifest = read_archive(path)
    if manifest is None or manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: not a checkpoint of format version {FORMAT_VERSION}")
    encoder = Encoder(
        EncoderConfig.from_dict(manifest["encoder"]),
        EncodingRangeRegistry.from_text(manifest["encoding_ranges"]),
    )
    load_state_arrays(encoder, arrays, "encoder/")
    order = manifest.get("modality_order", list(manifest["modalities"]))
    modalities = {k: ModalitySpec.from_dict(manifest["modalities"][k]) for k in order}
    return encoder, modalities, arrays, manifest
