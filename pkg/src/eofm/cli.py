"""Command-line entry points: synth-data, pretrain, eval, embed, climate.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import bench, climate
from .backbone import Encoder, EncoderConfig, ModalitySpec, default_modalities, load_encoder
from .data import GridDataset, GridGeometry, generate_synthetic
from .encodings import EncodingRangeRegistry
from .pretrain import DecoderConfig, PretrainConfig, Pretrainer

log = logging.getLogger("eofm")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
PROFILES = ("paper", "desk")
SYNTHETIC_TASKS = {f"synthetic_{k}": k for k in ("cls", "multilabel", "seg", "reg", "cd")}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]) -> None:
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


class ModalityMismatchError(ValueError):
    pass


class UnknownTaskError(ValueError):
    pass


# -- run configuration -------------------------------------------------------------------

SECTION_TYPES = {
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "pretrain": PretrainConfig,
    "probe": bench.ProbeConfig,
}
TOP_LEVEL = {"profile", "seed", "modalities", "variable_strategy", "data", "climate", *SECTION_TYPES}
DATA_KEYS = {"n_grids", "grids_per_shard", "geometry"}
CLIMATE_KEYS = {"fe_dim", "seeds", "fractions"}
GEOMETRY_KEYS = {f.name for f in dataclasses.fields(GridGeometry)}


def _coerce(value: Any) -> Any:
    return tuple(value) if isinstance(value, list) else value


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    modalities: list[str] | None = None  # subset of the profile's registry; all when None
    variable_strategy: str = "language"
    encoder: dict = field(default_factory=dict)
    decoder: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    climate: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> RunConfig:
        """Validate every key and value, reporting all problems at once."""
        problems = [f"unknown key '{k}'" for k in raw if k not in TOP_LEVEL]
        profile = raw.get("profile", "desk")
        if profile not in PROFILES:
            problems.append(f"profile: expected one of {PROFILES}, got {profile!r}")
        for section, typ in SECTION_TYPES.items():
            allowed = {f.name for f in dataclasses.fields(typ)}
            problems += [f"unknown key '{section}.{k}'" for k in raw.get(section, {}) if k not in allowed]
        problems += [f"unknown key 'data.{k}'" for k in raw.get("data", {}) if k not in DATA_KEYS]
        problems += [f"unknown key 'data.geometry.{k}'" for k in raw.get("data", {}).get("geometry", {})
                     if k not in GEOMETRY_KEYS]
        problems += [f"unknown key 'climate.{k}'" for k in raw.get("climate", {}) if k not in CLIMATE_KEYS]
        known = set(default_modalities("desk"))
        for mid in raw.get("modalities") or []:
            if mid not in known:
                problems.append(f"modalities: unknown modality {mid!r}")
        if raw.get("variable_strategy", "language") not in ("language", "random-hash", "spectroscopy"):
            problems.append(f"variable_strategy: unknown strategy {raw['variable_strategy']!r}")
        clean = {k: v for k, v in raw.items() if k in TOP_LEVEL}
        for section, typ in SECTION_TYPES.items():
            allowed = {f.name for f in dataclasses.fields(typ)}
            clean[section] = {k: v for k, v in raw.get(section, {}).items() if k in allowed}
        cfg = cls(**clean)
        if profile in PROFILES:
            for name, build in (("encoder", cfg.encoder_config), ("decoder", cfg.decoder_config),
                                ("pretrain", cfg.pretrain_config), ("probe", cfg.probe_config)):
                try:
                    build()
                except (ValueError, TypeError) as exc:
                    problems.append(f"{name}: {exc}")
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def load(cls, path: Path | str | None, profile: str | None = None) -> RunConfig:
        raw = json.loads(Path(path).read_text()) if path else {}
        if profile:
            raw["profile"] = profile
        return cls.from_dict(raw)

    def encoder_config(self) -> EncoderConfig:
        base = EncoderConfig.preset("tiny" if self.profile == "desk" else "base")
        return dataclasses.replace(base, **{k: _coerce(v) for k, v in self.encoder.items()})

    def decoder_config(self) -> DecoderConfig:
        return dataclasses.replace(DecoderConfig.preset(self.profile), **self.decoder)

    def pretrain_config(self) -> PretrainConfig:
        # the top-level seed is authoritative, so --seed also reaches a config file's pretrain section
        overrides = {k: _coerce(v) for k, v in self.pretrain.items()}
        overrides["seed"] = self.seed
        return PretrainConfig.preset(self.profile, **overrides)

    def probe_config(self) -> bench.ProbeConfig:
        return dataclasses.replace(bench.ProbeConfig(), **{k: _coerce(v) for k, v in self.probe.items()})

    def modality_registry(self) -> dict[str, ModalitySpec]:
        mods = default_modalities(self.profile, self.variable_strategy)
        return {k: mods[k] for k in (self.modalities or list(mods))}

    def geometry(self) -> GridGeometry:
        return GridGeometry(**self.data.get("geometry", {}))

    def effective(self) -> dict:
        """Fully defaulted configuration; loading it back reproduces the run."""
        return {
            "profile": self.profile,
            "seed": self.seed,
            "modalities": list(self.modality_registry()),
            "variable_strategy": self.variable_strategy,
            "encoder": self.encoder_config().to_dict(),
            "decoder": dataclasses.asdict(self.decoder_config()),
            "pretrain": self.pretrain_config().to_dict(),
            "probe": self.probe_config().to_dict(),
            "data": {"n_grids": self.data.get("n_grids", 8), "grids_per_shard": self.data.get("grids_per_shard", 4),
                     "geometry": self.geometry().to_dict()},
            "climate": {"fe_dim": self.climate.get("fe_dim", 64), "seeds": list(self.climate.get("seeds", [0, 1, 2])),
                        "fractions": list(self.climate.get("fractions", [0.6, 0.2, 0.2]))},
        }


def dump_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(json.dumps(cfg.effective(), indent=2, sort_keys=True))


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)


# -- commands ------------------------------------------------------------------------------


def cmd_synth_data(args, cfg: RunConfig) -> int:
    mods = cfg.modality_registry()
    n = args.n_grids if args.n_grids is not None else cfg.data.get("n_grids", 8)
    generate_synthetic(args.out, n, mods, cfg.seed, cfg.geometry(), grids_per_shard=cfg.data.get("grids_per_shard", 4))
    dump_config(cfg, Path(args.out))
    print(f"wrote {n} grids to {args.out}")
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    dataset = GridDataset(args.data)
    mods = cfg.modality_registry()
    missing = [m for m in mods if m not in dataset.manifest["modalities"]]
    if missing and cfg.pretrain_config().missing == "error":
        raise ModalityMismatchError(f"dataset lacks modalities {missing}")
    grids = dataset.load_all()
    if args.resume:
        trainer = Pretrainer.load(args.resume)
    else:
        seed_everything(cfg.seed)
        encoder = Encoder(cfg.encoder_config(), EncodingRangeRegistry())
        pcfg = cfg.pretrain_config()
        steps_per_epoch = max(1, -(-len(grids) // pcfg.batch_size))
        trainer = Pretrainer(encoder, mods, pcfg, cfg.decoder_config(), steps_per_epoch=steps_per_epoch)
    dump_config(cfg, out)
    records = trainer.fit(grids, args.steps, out / "train_log.jsonl", out / "checkpoints")
    if records:
        print(f"step {records[-1]['step']}: total loss {records[-1]['total']:.6f}")
    print(f"checkpoint: {out / 'checkpoints' / 'last.ckpt'}")
    return EXIT_OK


def resolve_task(name_or_path: str, work_dir: Path, registry: dict[str, ModalitySpec], seed: int) -> bench.Task:
    path = Path(name_or_path)
    if path.is_dir():
        return bench.load_task(path)
    if name_or_path in SYNTHETIC_TASKS:
        mod = registry.get("s2_toa") or next(iter(registry.values()))
        root = work_dir / "tasks" / name_or_path
        bench.make_synthetic_task(root, SYNTHETIC_TASKS[name_or_path], mod, seed=seed)
        return bench.load_task(root)
    raise UnknownTaskError(
        f"unknown task {name_or_path!r}; available: {', '.join(SYNTHETIC_TASKS)} or a task directory"
    )


def check_task_modality(task: bench.Task, registry: dict[str, ModalitySpec]) -> None:
    mod = task.spec.modality
    ref = registry.get(mod.id)
    if ref is None:
        raise ModalityMismatchError(f"task modality {mod.id!r} not in checkpoint registry {sorted(registry)}")
    if ref.kind != mod.kind or ref.num_channels != mod.num_channels or ref.bands != mod.bands \
            or ref.variable != mod.variable:
        raise ModalityMismatchError(f"task modality {mod.id!r} differs from the checkpoint's definition")


def cmd_eval(args, cfg: RunConfig) -> int:
    encoder, registry, _, _ = load_encoder(args.checkpoint)
    out = Path(args.out)
    task = resolve_task(args.task, out, registry, cfg.seed)
    check_task_modality(task, registry)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed, cfg.seed + 1, cfg.seed + 2]
    report = bench.run_seeds(encoder, task, args.protocol, cfg.probe_config(), seeds)
    report.write(out)
    dump_config(cfg, out)
    print(report.table(), end="")
    return EXIT_OK


def _load_embeddings(args, cfg: RunConfig):
    encoder, registry, _, _ = load_encoder(args.checkpoint)
    dataset = GridDataset(args.data)
    mods = {k: v for k, v in registry.items() if k in dataset.manifest["modalities"]}
    if not mods:
        raise ModalityMismatchError("dataset and checkpoint share no modality")
    grids = dataset.load_all()
    return grids, climate.embed_grids(grids, encoder, mods, cfg.seed), dataset


def cmd_embed(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    grids, embs, dataset = _load_embeddings(args, cfg)
    geometry = dataset.geometry or cfg.geometry()
    out.mkdir(parents=True, exist_ok=True)
    climate.write_embeddings(out / "embeddings.npz", embs, {"geometry": geometry.to_dict()})
    values = climate.export_embedding_map(embs, geometry, out)
    dump_config(cfg, out)
    print(f"{len(embs)} embeddings; map {values.shape[0]}x{values.shape[1]}x{values.shape[2]}")
    return EXIT_OK


def cmd_climate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    grids, embs, _ = _load_embeddings(args, cfg)
    lon = np.array([g.lon for g in grids])
    lat = np.array([g.lat for g in grids])
    emb = np.stack([e.vector for e in embs])
    if args.targets:
        targets = np.load(args.targets)
        if targets.shape != (len(grids), len(climate.TARGET_NAMES)):
            raise ConfigError([f"targets: expected shape {(len(grids), len(climate.TARGET_NAMES))}, "
                               f"got {targets.shape}"])
    else:
        targets = climate.synthetic_climate_targets(lon, lat, emb, seed=cfg.seed)
    eff = cfg.effective()["climate"]
    feats = climate.feature_sets(lon, lat, emb, eff["fe_dim"])
    table = climate.regress(feats, targets, seeds=eff["seeds"], fractions=tuple(eff["fractions"]))
    table.write(out)
    dump_config(cfg, out)
    print(table.text(), end="")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argument errors are validation failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eofm", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="global seed; overrides the config file")
    p.add_argument("--config", type=Path, default=None, help="JSON run configuration")
    p.add_argument("--profile", choices=PROFILES, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="generate a synthetic sharded dataset")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--n-grids", type=int, default=None)

    s = sub.add_parser("pretrain", help="masked-image-modeling pretraining")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--steps", type=int, default=None, help="stop after this many total steps")
    s.add_argument("--resume", type=Path, default=None)

    s = sub.add_parser("eval", help="frozen-encoder evaluation on a task")
    s.add_argument("--checkpoint", required=True, type=Path)
    s.add_argument("--task", required=True)
    s.add_argument("--protocol", choices=("linear", "knn", "dense"), default=None)
    s.add_argument("--seeds", default=None, help="comma-separated, default: seed, seed+1, seed+2")
    s.add_argument("--out", required=True, type=Path)

    for name, helptext in (("embed", "grid embeddings and map export"), ("climate", "climate regression table")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True, type=Path)
        s.add_argument("--data", required=True, type=Path)
        s.add_argument("--out", required=True, type=Path)
        if name == "climate":
            s.add_argument("--targets", type=Path, default=None, help="[N, 12] .npy in dataset grid order")
    return p


COMMANDS = {"synth-data": cmd_synth_data, "pretrain": cmd_pretrain, "eval": cmd_eval,
            "embed": cmd_embed, "climate": cmd_climate}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.profile)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ModalityMismatchError, UnknownTaskError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
