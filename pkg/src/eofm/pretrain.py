"""Masked image modeling with a shared decoder, plus distillation from frozen teachers.

Randomness is derived per step from ``(seed, step, purpose)`` rather than carried in
mutable generator objects, so a resumed run draws exactly the masks, metadata drops,
crops and batch orders that an uninterrupted run would have drawn.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Literal, Mapping, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .backbone import (
    Encoder,
    EncoderConfig,
    ModalitySpec,
    load_state_arrays,
    save_encoder,
    state_arrays,
)
from .data import GridSample, NormalizationSpec, build_batch
from .encodings import EncodingRangeRegistry
from .hypernet import DynamicPatchPredictor, patches
from .layers import Block, init_vit_weights, sincos_2d
from .metadata import MetadataRecord


class DegenerateMaskError(ValueError):
    pass


# -- masking --------------------------------------------------------------------------


@dataclass
class MaskPlan:
    mask: Tensor  # bool [B, N], True = masked
    ratio: float

    @property
    def num_masked(self) -> int:
        return int(self.mask[0].sum())


def num_masked(n: int, ratio: float) -> int:
    """round(ratio * n) with halves rounded up."""
    if not 0.0 < ratio < 1.0:
        raise DegenerateMaskError(f"masking ratio must lie in (0, 1), got {ratio}")
    k = int(math.floor(ratio * n + 0.5))
    if k == 0 or k == n:
        raise DegenerateMaskError(f"ratio {ratio} over {n} tokens masks {k}: nothing to learn from")
    return k


def make_mask(n: int, ratio: float = 0.7, generator: torch.Generator | None = None, batch: int = 1) -> MaskPlan:
    """Independent uniformly random subsets of exactly round(ratio * n) tokens per sample."""
    k = num_masked(n, ratio)
    order = torch.rand(batch, n, generator=generator).argsort(dim=1)
    mask = torch.zeros(batch, n, dtype=torch.bool)
    mask.scatter_(1, order[:, :k], True)
    return MaskPlan(mask, ratio)


# -- MIM --------------------------------------------------------------------------------


def normalize_patches(x: Tensor, eps: float = 1e-6) -> Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def masked_mse(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """Mean squared error over the masked patches only; [B, N, K] inputs, bool [B, N] mask."""
    return ((pred[mask] - target[mask]) ** 2).mean()


@dataclass(frozen=True)
class DecoderConfig:
    dim: int = 512
    depth: int = 8
    num_heads: int = 16
    mlp_ratio: float = 4.0

    @classmethod
    def preset(cls, profile: str) -> DecoderConfig:
        return cls() if profile == "paper" else cls(dim=128, depth=2, num_heads=4)


@dataclass
class MimOutput:
    loss: Tensor
    pred: Tensor  # [B, N, C*p*p]
    target: Tensor  # normalized, same shape
    pooled: Tensor  # [B, D] mean of encoded visible tokens


class MaskedModel(nn.Module):
    """Encoder plus a modality-shared decoder and per-kind dynamic patch predictors."""

    def __init__(self, encoder: Encoder, decoder: DecoderConfig | None = None) -> None:
        super().__init__()
        self.encoder = encoder
        self.decoder_config = dec = decoder or DecoderConfig()
        ecfg = encoder.config
        self.decoder_embed = nn.Linear(ecfg.embed_dim, dec.dim)
        self.mask_token = nn.Parameter(torch.zeros(dec.dim))
        self.decoder_blocks = nn.ModuleList(Block(dec.dim, dec.num_heads, dec.mlp_ratio) for _ in range(dec.depth))
        self.decoder_norm = nn.LayerNorm(dec.dim, eps=1e-6)
        for m in (self.decoder_embed, self.decoder_blocks, self.decoder_norm):
            m.apply(init_vit_weights)
        nn.init.normal_(self.mask_token, std=0.02)
        self.spectral_predictor = DynamicPatchPredictor(ecfg.enc_dim, dec.dim, ecfg.base_patch, ecfg.hyper_heads)
        self.variable_predictor = DynamicPatchPredictor(ecfg.enc_dim, dec.dim, ecfg.base_patch, ecfg.hyper_heads)

    def decoder_state(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.state_dict().items() if not k.startswith("encoder.")}

    def forward_mim(
        self,
        images: Tensor,
        metas: Sequence[MetadataRecord],
        modality: ModalitySpec,
        mask: MaskPlan,
        training: bool = False,
        generator: torch.Generator | None = None,
        target: Tensor | None = None,
    ) -> MimOutput:
        """Reconstruct masked patches of ``target`` (default: ``images``) from visible ones."""
        b = images.shape[0]
        n = modality.num_patches if images.shape[-2:] == modality.crop else (
            (images.shape[-2] // modality.patch_size) * (images.shape[-1] // modality.patch_size)
        )
        m = mask.mask
        if m.shape != (b, n):
            raise ValueError(f"mask of shape {tuple(m.shape)} does not match {b} samples of {n} patches")
        counts = m.sum(dim=1)
        if bool(((counts == 0) | (counts == n)).any()):
            raise DegenerateMaskError("every sample needs at least one masked and one visible patch")
        if not bool((counts == counts[0]).all()):
            raise ValueError("all samples in a batch must mask the same number of patches")

        enc = self.encoder
        code = enc.channel_encoding(modality)
        x = enc.embed(images, metas, modality, training, generator, enc.patch_kernel(modality, code))
        d = x.shape[-1]
        # visible indices in ascending order
        keep = torch.sort((~m).float(), dim=1, descending=True, stable=True).indices[:, : n - int(counts[0])]
        keep = keep.sort(dim=1).values
        visible = x.gather(1, keep[..., None].expand(-1, -1, d))
        latent, _ = enc.run_blocks(visible)
        pooled = latent[:, 1:].mean(dim=1)

        y = self.decoder_embed(latent)
        dd = y.shape[-1]
        full = self.mask_token.to(y).expand(b, n, dd)
        full = full.scatter(1, keep[..., None].expand(-1, -1, dd), y[:, 1:])
        gh, gw = images.shape[-2] // modality.patch_size, images.shape[-1] // modality.patch_size
        full = full + sincos_2d(dd, gh, gw).to(full)[None]
        h = torch.cat([y[:, :1], full], dim=1)
        for block in self.decoder_blocks:
            h = block(h)
        h = self.decoder_norm(h)[:, 1:]

        predictor = self.spectral_predictor if modality.kind == "spectral" else self.variable_predictor
        pred = predictor(h, code, modality.patch_size)
        tgt = normalize_patches(patches(images if target is None else target, modality.patch_size))
        return MimOutput(masked_mse(pred, tgt, m), pred, tgt, pooled)


def mim_loss(
    model: MaskedModel,
    images: Tensor,
    metas: Sequence[MetadataRecord],
    modality: ModalitySpec,
    mask: MaskPlan,
    target: Tensor | None = None,
) -> Tensor:
    return model.forward_mim(images, metas, modality, mask, target=target).loss


# -- distillation -----------------------------------------------------------------------


def distill_loss(student: Tensor, teacher: Tensor, projector: nn.Module | None = None, eps: float = 1e-8) -> Tensor:
    """Mean over the batch of 1 - cos(project(student), teacher); norms clamped at ``eps``."""
    s = projector(student) if projector is not None else student
    if s.shape != teacher.shape:
        raise ValueError(f"projected student {tuple(s.shape)} and teacher {tuple(teacher.shape)} differ")
    dot = (s * teacher).sum(dim=-1)
    norms = (s * s).sum(dim=-1) * (teacher * teacher).sum(dim=-1)
    cos = dot / torch.sqrt(torch.clamp(norms, min=eps * eps))
    return (1.0 - cos).mean()


@dataclass(frozen=True)
class TeacherSpec:
    id: str
    dim: int
    weight: float
    inputs: tuple[str, ...]  # modality ids fed to the teacher
    channels: tuple[int, ...] | None = None  # channel selection, e.g. S2 -> RGB

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TeacherSpec:
        ch = d.get("channels")
        return cls(d["id"], d["dim"], d["weight"], tuple(d["inputs"]), tuple(ch) if ch is not None else None)


def default_teachers(dim: int = 768) -> list[TeacherSpec]:
    return [
        TeacherSpec("rgb", dim, 0.1, ("s2_toa",), (3, 2, 1)),  # B4, B3, B2
        TeacherSpec("s1s2", dim, 0.2, ("s1_grd", "s2_toa")),
    ]


class Teacher(Protocol):
    def __call__(self, images: Tensor, modality_id: str) -> Tensor: ...


class RandomTeacher(nn.Module):
    """Frozen randomly initialised patch encoder standing in for a pretrained teacher.

    Any module with the same call signature (images, modality id) -> [B, dim] can replace it.
    """

    def __init__(self, spec: TeacherSpec, modalities: Mapping[str, ModalitySpec], seed: int = 0, hidden: int = 128):
        super().__init__()
        self.spec = spec
        gen = torch.Generator().manual_seed(seed)
        self.stems = nn.ModuleDict()
        for mid in spec.inputs:
            mod = modalities[mid]
            c = len(spec.channels) if spec.channels is not None else mod.num_channels
            self.stems[mid] = nn.Conv2d(c, hidden, mod.patch_size, stride=mod.patch_size)
        self.head = nn.Linear(hidden, spec.dim)
        with torch.no_grad():
            for p in self.parameters():
                fan_in = p.shape[1] * (p[0, 0].numel() if p.dim() > 2 else 1) if p.dim() > 1 else hidden
                p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(fan_in))
        self.requires_grad_(False)
        self.eval()

    def forward(self, images: Tensor, modality_id: str) -> Tensor:
        if self.spec.channels is not None:
            images = images[:, list(self.spec.channels)]
        x = F.gelu(self.stems[modality_id](images)).flatten(2).mean(dim=2)
        return self.head(x)


def weight_hash(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- training ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    mask_ratio: float = 0.7
    batch_size: int = 256
    base_lr: float = 1.5e-4
    base_batch: int = 256
    min_lr: float = 0.0
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    epochs: int = 100
    warmup_epochs: int = 10
    teachers: bool = True
    teacher_dim: int = 768
    missing: Literal["error", "skip"] = "error"
    checkpoint_every: int = 0  # steps; 0 disables periodic checkpoints
    seed: int = 0

    def __post_init__(self) -> None:
        problems = []
        if not 0.0 < self.mask_ratio < 1.0:
            problems.append(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 1:
            problems.append(f"epochs must be positive, got {self.epochs}")
        if not 0 <= self.warmup_epochs < max(self.epochs, 1):
            problems.append(f"warmup_epochs must lie in [0, epochs), got {self.warmup_epochs}")
        if self.base_lr <= 0 or self.base_batch < 1:
            problems.append("base_lr and base_batch must be positive")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.missing not in ("error", "skip"):
            problems.append(f"missing must be 'error' or 'skip', got {self.missing!r}")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def preset(cls, profile: str, **overrides) -> PretrainConfig:
        if profile == "paper":
            return replace(cls(), **overrides)
        desk = dict(batch_size=8, base_lr=1e-3, base_batch=8, epochs=200, warmup_epochs=20, teacher_dim=64)
        return replace(cls(**desk), **overrides)

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / self.base_batch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PretrainConfig:
        d = dict(d)
        d["betas"] = tuple(d["betas"])
        return cls(**d)


def learning_rate(step: int, total_steps: int, warmup_steps: int, peak: float, floor: float = 0.0) -> float:
    """Linear warmup to ``peak`` followed by half-cosine decay to ``floor``."""
    if step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def step_rng(seed: int, step: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, purpose])


def step_generator(seed: int, step: int, purpose: int) -> torch.Generator:
    s = int(np.random.SeedSequence([seed, step, purpose]).generate_state(1, np.uint64)[0] >> 1)
    return torch.Generator().manual_seed(s)


PURPOSE_ORDER, PURPOSE_VIEW, PURPOSE_MASK, PURPOSE_DROP = 1, 2, 3, 4
EVAL_STEP = 2**31  # seed slot reserved for fixed evaluation views, never a training step


class Pretrainer:
    """Owns the model, teachers, projectors and optimizer; runs sequential updates."""

    def __init__(
        self,
        encoder: Encoder,
        modalities: Mapping[str, ModalitySpec],
        config: PretrainConfig,
        decoder: DecoderConfig | None = None,
        teachers: Sequence[TeacherSpec] | None = None,
        norm: NormalizationSpec | None = None,
        steps_per_epoch: int = 1,
    ) -> None:
        self.config = config
        self.modalities = dict(modalities)
        self.norm = norm or NormalizationSpec.default(self.modalities)
        self.model = MaskedModel(encoder, decoder)
        if teachers is None:
            teachers = default_teachers(config.teacher_dim) if config.teachers else []
        self.teacher_specs = [t for t in teachers if all(i in self.modalities for i in t.inputs)]
        self.teachers = nn.ModuleDict(
            {t.id: RandomTeacher(t, self.modalities, seed=config.seed * 1000 + i)
             for i, t in enumerate(self.teacher_specs)}
        )
        self.projectors = nn.ModuleDict({t.id: nn.Linear(encoder.embed_dim, t.dim) for t in self.teacher_specs})
        self.projectors.apply(init_vit_weights)
        self.steps_per_epoch = steps_per_epoch
        self.total_steps = config.epochs * steps_per_epoch
        self.warmup_steps = config.warmup_epochs * steps_per_epoch
        self.step = 0
        self.optimizer = torch.optim.AdamW(self._param_groups(), lr=config.peak_lr, betas=config.betas)

    def trainable(self) -> list[tuple[str, nn.Parameter]]:
        named = [("model." + k, p) for k, p in self.model.named_parameters()]
        named += [("projectors." + k, p) for k, p in self.projectors.named_parameters()]
        return [(k, p) for k, p in named if p.requires_grad]

    def _param_groups(self) -> list[dict]:
        decay, no_decay = [], []
        for name, p in self.trainable():
            (no_decay if p.dim() <= 1 or name.endswith("token") else decay).append(p)
        return [
            {"params": decay, "weight_decay": self.config.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ]

    # -- losses --

    def batch_for_step(self, grids: Sequence[GridSample], step: int, training: bool = True):
        cfg = self.config
        epoch, within = divmod(step, self.steps_per_epoch)
        order = step_rng(cfg.seed, epoch, PURPOSE_ORDER).permutation(len(grids))
        idx = order[within * cfg.batch_size : (within + 1) * cfg.batch_size]
        if len(idx) == 0:
            idx = order[: cfg.batch_size]
        chosen = [grids[i] for i in idx]
        return build_batch(chosen, self.modalities, step_rng(cfg.seed, step, PURPOSE_VIEW),
                           self.norm, training, cfg.missing)

    def losses(self, batch, seed_step: int, training: bool = True) -> dict[str, Tensor]:
        """Loss terms for one batch; ``total`` = sum of MIM terms + weighted distillation terms."""
        cfg = self.config
        mask_gen = step_generator(cfg.seed, seed_step, PURPOSE_MASK)
        drop_gen = step_generator(cfg.seed, seed_step, PURPOSE_DROP)
        terms: dict[str, Tensor] = {}
        pooled: dict[str, Tensor] = {}
        for mid, spec in self.modalities.items():
            if mid not in batch:
                if cfg.missing == "error":
                    raise KeyError(f"batch lacks modality {mid!r}")
                continue
            images, metas = batch[mid]
            mask = make_mask(spec.num_patches, cfg.mask_ratio, mask_gen, images.shape[0])
            out = self.model.forward_mim(images, metas, spec, mask, training, drop_gen)
            terms[f"mim/{mid}"] = out.loss
            pooled[mid] = out.pooled
        total = sum(terms.values())
        for t in self.teacher_specs:
            parts = []
            for mid in t.inputs:
                if mid not in pooled:
                    continue
                with torch.no_grad():
                    target = self.teachers[t.id](batch[mid][0], mid)
                parts.append(distill_loss(pooled[mid], target, self.projectors[t.id]))
            if parts:
                term = sum(parts) / len(parts)
                terms[f"distill/{t.id}"] = term
                total = total + t.weight * term
        terms["total"] = total
        return terms

    def train_step(self, grids: Sequence[GridSample]) -> dict[str, float]:
        lr = learning_rate(self.step, self.total_steps, self.warmup_steps, self.config.peak_lr, self.config.min_lr)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        batch = self.batch_for_step(grids, self.step)
        terms = self.losses(batch, self.step, training=True)
        self.optimizer.zero_grad(set_to_none=True)
        terms["total"].backward()
        self.optimizer.step()
        record = {"step": self.step, "lr": lr, **{k: float(v.detach()) for k, v in terms.items()}}
        self.step += 1
        return record

    @torch.no_grad()
    def evaluate(self, grids: Sequence[GridSample], seed_step: int = EVAL_STEP) -> dict[str, float]:
        """Loss terms on a fixed view: center crops, fixed masks, no metadata dropping."""
        self.model.eval()
        batch = build_batch(grids, self.modalities, step_rng(self.config.seed, seed_step, PURPOSE_VIEW),
                            self.norm, training=False, missing=self.config.missing)
        return {k: float(v) for k, v in self.losses(batch, seed_step, training=False).items()}

    def fit(
        self,
        grids: Sequence[GridSample],
        steps: int | None = None,
        log_path: Path | str | None = None,
        checkpoint_dir: Path | str | None = None,
    ) -> list[dict]:
        """Run until ``steps`` total updates (default: the full schedule), appending JSONL logs."""
        end = self.total_steps if steps is None else steps
        records = []
        log = open(log_path, "a") if log_path is not None else None
        try:
            while self.step < end:
                rec = self.train_step(grids)
                records.append(rec)
                if log is not None:
                    log.write(json.dumps(rec, sort_keys=True) + "\n")
                    log.flush()
                every = self.config.checkpoint_every
                if checkpoint_dir is not None and every and self.step % every == 0:
                    self.save(Path(checkpoint_dir) / f"step-{self.step:06d}.ckpt")
        finally:
            if log is not None:
                log.close()
        if checkpoint_dir is not None:
            self.save(Path(checkpoint_dir) / "last.ckpt")
        return records

    # -- checkpoints --

    def save(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        extra = {"mae/" + k: v.detach().cpu().numpy() for k, v in self.model.decoder_state().items()}
        extra.update(state_arrays(self.projectors, "projectors/"))
        extra.update(state_arrays(self.teachers, "teachers/"))
        opt = self.optimizer.state_dict()
        for idx, st in opt["state"].items():
            for key, val in st.items():
                extra[f"optim/{idx}/{key}"] = val.detach().cpu().numpy()
        groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in opt["param_groups"]]
        manifest = {
            "pretrain": self.config.to_dict(),
            "decoder": asdict(self.model.decoder_config),
            "teachers": [t.to_dict() for t in self.teacher_specs],
            "normalization": {k: asdict(r) for k, r in self.norm.rules.items()},
            "step": self.step,
            "steps_per_epoch": self.steps_per_epoch,
            "optim_groups": groups,
        }
        save_encoder(path, self.model.encoder, self.modalities, extra, manifest)

    @classmethod
    def load(cls, path: Path | str) -> Pretrainer:
        from .backbone import load_encoder
        from .data import NormRule

        encoder, modalities, arrays, manifest = load_encoder(path)
        norm = NormalizationSpec({
            k: NormRule(**{f: tuple(v) if isinstance(v, list) else v for f, v in r.items()})
            for k, r in manifest["normalization"].items()
        })
        trainer = cls(
            encoder,
            modalities,
            PretrainConfig.from_dict(manifest["pretrain"]),
            DecoderConfig(**manifest["decoder"]),
            [TeacherSpec.from_dict(t) for t in manifest["teachers"]],
            norm,
            manifest["steps_per_epoch"],
        )
        dec = {k[4:]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("mae/")}
        missing, unexpected = trainer.model.load_state_dict(dec, strict=False)
        if unexpected or any(not k.startswith("encoder.") for k in missing):
            raise ValueError(f"{path}: decoder state mismatch")
        load_state_arrays(trainer.projectors, arrays, "projectors/")
        load_state_arrays(trainer.teachers, arrays, "teachers/")
        state: dict[int, dict] = {}
        for k, v in arrays.items():
            if k.startswith("optim/"):
                _, idx, key = k.split("/", 2)
                state.setdefault(int(idx), {})[key] = torch.from_numpy(v.copy())
        groups = manifest["optim_groups"]
        for g in groups:
            g["betas"] = tuple(g["betas"])
        trainer.optimizer.load_state_dict({"state": state, "param_groups": groups})
        trainer.step = manifest["step"]
        return trainer


def build_pretrainer(
    profile: str,
    modalities: Mapping[str, ModalitySpec],
    n_grids: int,
    encoder_config: EncoderConfig | None = None,
    seed: int = 0,
    **overrides,
) -> Pretrainer:
    cfg = PretrainConfig.preset(profile, seed=seed, **overrides)
    torch.manual_seed(seed)
    enc_cfg = encoder_config or (EncoderConfig.preset("tiny") if profile == "desk" else EncoderConfig.preset("base"))
    encoder = Encoder(enc_cfg, EncodingRangeRegistry())
    steps_per_epoch = max(1, math.ceil(n_grids / cfg.batch_size))
    return Pretrainer(encoder, modalities, cfg, DecoderConfig.preset(profile), steps_per_epoch=steps_per_epoch)
