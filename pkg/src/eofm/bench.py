"""Frozen-encoder evaluation: kNN, linear probing, dense decoding, change detection, metrics.

Task directory layout (``root/``)::

    task.json                 {"name", "kind", "modality": <ModalitySpec dict>, "num_classes"}
    <split>/index.jsonl       one record per sample:
                              {"image": "000000.npy", "post": "000000_post.npy" (cd only),
                               "label": int | [0/1, ...] (cls | multilabel),
                               "target": "000000_y.npy" (seg | reg | cd),
                               "lon", "lat", "gsd_m", "time_days" (each nullable)}
    <split>/*.npy             images [C, H, W] float32 (already normalized), targets [H, W]

Splits are ``train``, ``val`` and ``test``. Seg/cd targets are integer class maps; reg
targets are float maps where NaN marks pixels without ground truth.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter
from torch import Tensor, nn

from .backbone import Encoder, ModalitySpec
from .metadata import MetadataRecord, area_km2

Kind = Literal["cls", "multilabel", "seg", "reg", "cd"]
METRIC_FOR_KIND = {"cls": "OA", "multilabel": "mAP", "seg": "mIoU", "reg": "RMSE", "cd": "mIoU"}
HIGHER_IS_BETTER = {"OA": True, "mAP": True, "mIoU": True, "RMSE": False}
SPLITS = ("train", "val", "test")


class FrozenEncoderError(RuntimeError):
    """The encoder's weights changed during a frozen-encoder evaluation."""


class TaskDataError(ValueError):
    pass


# -- metrics ----------------------------------------------------------------------------


def overall_accuracy(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    return float((pred == target).mean())


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP of one class: mean of precision@rank over the ranks of the positives."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels).astype(bool)
    if not labels.any():
        raise ValueError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    scores, labels = np.asarray(scores), np.asarray(labels)
    aps = [average_precision(scores[:, k], labels[:, k]) for k in range(labels.shape[1]) if labels[:, k].any()]
    return float(np.mean(aps))


def confusion_matrix(pred: np.ndarray, target: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are targets, columns predictions."""
    pred, target = np.asarray(pred).ravel(), np.asarray(target).ravel()
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    idx = target.astype(np.int64) * num_classes + pred.astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_per_class(pred: np.ndarray, target: np.ndarray, num_classes: int) -> np.ndarray:
    """TP / (TP + FP + FN) per class; NaN where the class never occurs in either map."""
    cm = confusion_matrix(pred, target, num_classes).astype(np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def mean_iou(pred: np.ndarray, target: np.ndarray, num_classes: int) -> float:
    ious = iou_per_class(pred, target, num_classes)
    empty = np.isnan(ious)
    if empty.any():
        warnings.warn(f"classes {np.flatnonzero(empty).tolist()} absent from predictions and targets; excluded")
    return float(np.nanmean(ious))


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    """Root mean squared error over pixels whose target is finite."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    valid = np.isfinite(target)
    return float(np.sqrt(np.mean((pred[valid] - target[valid]) ** 2)))


def masked_l1(pred: Tensor, target: Tensor) -> Tensor:
    """L1 over the pixels whose target is not NaN."""
    valid = ~torch.isnan(target)
    if not bool(valid.any()):
        raise TaskDataError("target has no valid pixels")
    return (pred[valid] - target[valid]).abs().mean()


# -- task data --------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: Kind
    modality: ModalitySpec
    num_classes: int = 0  # 0 for regression

    def __post_init__(self) -> None:
        if self.kind not in METRIC_FOR_KIND:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind != "reg" and self.num_classes < 2 and self.kind != "multilabel":
            raise ValueError(f"{self.kind} task needs at least two classes")

    @property
    def metric(self) -> str:
        return METRIC_FOR_KIND[self.kind]

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "modality": self.modality.to_dict(),
                "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d: dict) -> TaskSpec:
        return cls(d["name"], d["kind"], ModalitySpec.from_dict(d["modality"]), d.get("num_classes", 0))


@dataclass
class Split:
    images: Tensor  # [N, C, H, W]
    metas: list[MetadataRecord]
    labels: np.ndarray | None = None  # [N] or [N, K]
    targets: np.ndarray | None = None  # [N, H, W]
    post: Tensor | None = None  # cd only

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class Task:
    spec: TaskSpec
    splits: dict[str, Split]


def _meta(rec: dict, h: int, w: int) -> MetadataRecord:
    gsd = rec.get("gsd_m")
    return MetadataRecord(rec.get("lon"), rec.get("lat"), area_km2(gsd, h, w) if gsd else None, rec.get("time_days"))


def load_task(root: Path | str) -> Task:
    root = Path(root)
    if not (root / "task.json").exists():
        raise FileNotFoundError(f"{root} is not a task directory (task.json missing)")
    spec = TaskSpec.from_dict(json.loads((root / "task.json").read_text()))
    splits = {}
    for name in SPLITS:
        lines = (root / name / "index.jsonl").read_text().splitlines()
        recs = [json.loads(l) for l in lines if l.strip()]
        images, posts, labels, targets, metas = [], [], [], [], []
        for r in recs:
            img = np.load(root / name / r["image"])
            images.append(img)
            metas.append(_meta(r, *img.shape[-2:]))
            if spec.kind == "cd":
                if "post" not in r:
                    raise TaskDataError(f"{name}: change-detection sample {r['image']} lacks a post image")
                posts.append(np.load(root / name / r["post"]))
            if spec.kind in ("cls", "multilabel"):
                labels.append(r["label"])
            else:
                targets.append(np.load(root / name / r["target"]))
        splits[name] = Split(
            torch.from_numpy(np.stack(images)),
            metas,
            np.asarray(labels) if labels else None,
            np.stack(targets) if targets else None,
            torch.from_numpy(np.stack(posts)) if posts else None,
        )
    return Task(spec, splits)


def write_task(root: Path | str, spec: TaskSpec, splits: dict[str, dict]) -> None:
    """Write a task directory. ``splits[name]`` holds arrays ``images``, optional ``post``,
    ``labels`` or ``targets``, and a list of metadata dicts ``metas``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "task.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    for name, s in splits.items():
        d = root / name
        d.mkdir(exist_ok=True)
        lines = []
        for i, img in enumerate(s["images"]):
            rec = {"image": f"{i:06d}.npy", **s["metas"][i]}
            np.save(d / rec["image"], np.asarray(img, dtype=np.float32))
            if "post" in s:
                rec["post"] = f"{i:06d}_post.npy"
                np.save(d / rec["post"], np.asarray(s["post"][i], dtype=np.float32))
            if "labels" in s:
                lab = s["labels"][i]
                rec["label"] = lab.tolist() if isinstance(lab, np.ndarray) else int(lab)
            if "targets" in s:
                rec["target"] = f"{i:06d}_y.npy"
                np.save(d / rec["target"], np.asarray(s["targets"][i]))
            lines.append(json.dumps(rec, sort_keys=True))
        (d / "index.jsonl").write_text("\n".join(lines) + "\n")


def make_synthetic_task(
    root: Path | str,
    kind: Kind,
    modality: ModalitySpec,
    sizes: tuple[int, int, int] = (48, 16, 16),
    num_classes: int = 3,
    seed: int = 0,
    name: str | None = None,
    with_location: bool = False,
) -> TaskSpec:
    """Toy task with a planted, learnable signal for each task kind.

    Samples carry only their GSD unless ``with_location`` is set; random per-sample
    coordinates and dates would otherwise dominate the features of an untrained encoder.
    """
    rng = np.random.default_rng(seed)
    c = modality.num_channels
    h, w = modality.crop
    spec = TaskSpec(name or f"synthetic_{kind}", kind, modality, 0 if kind == "reg" else (2 if kind == "cd" else num_classes))
    offsets = rng.choice([-1.0, 1.0], size=(max(num_classes, 2), c)) * 2.0

    def smooth(n_ch: int, sigma: float = 2.0) -> np.ndarray:
        fields = [gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap") for _ in range(n_ch)]
        return np.stack([f / (f.std() + 1e-12) for f in fields])

    label_sigma = max(h, w) / 8.0  # label structure coarser than a patch

    splits = {}
    for split, n in zip(SPLITS, sizes):
        s: dict = {"images": [], "metas": []}
        for i in range(n):
            base = 0.3 * smooth(c)
            lon, lat, days = float(rng.uniform(-180, 180)), float(rng.uniform(-60, 60)), float(rng.integers(17000, 19000))
            meta = {"lon": lon, "lat": lat, "gsd_m": modality.gsd_m, "time_days": days} if with_location else {
                "lon": None, "lat": None, "gsd_m": modality.gsd_m, "time_days": None}
            if kind == "cls":
                y = i % num_classes
                img = base + offsets[y][:, None, None]
                s.setdefault("labels", []).append(y)
            elif kind == "multilabel":
                y = (rng.random(num_classes) < 0.5).astype(np.int64)
                img = base + (offsets[:num_classes] * y[:, None]).sum(0)[:, None, None]
                s.setdefault("labels", []).append(y)
            elif kind == "seg":
                field_ = smooth(1, label_sigma)[0]
                y = np.digitize(field_, np.quantile(field_, np.linspace(0, 1, num_classes + 1)[1:-1]))
                img = base + offsets[y].transpose(2, 0, 1)
                s.setdefault("targets", []).append(y.astype(np.int64))
            elif kind == "reg":
                field_ = smooth(1, label_sigma)[0]
                img = base + field_[None]
                y = 10.0 + 5.0 * field_
                if i % 4 == 0:
                    y[: h // 2] = np.nan
                s.setdefault("targets", []).append(y.astype(np.float32))
            else:  # cd
                img = base
                post = base.copy()
                y = np.zeros((h, w), dtype=np.int64)
                bh, bw = h // 2, w // 2
                r0, c0 = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
                y[r0 : r0 + bh, c0 : c0 + bw] = 1
                post[:, y == 1] += 3.0
                s.setdefault("post", []).append(post)
                s.setdefault("targets", []).append(y)
            s["images"].append(img.astype(np.float32))
            s["metas"].append(meta)
        splits[split] = {k: (np.stack(v) if k != "metas" else v) for k, v in s.items()}
    write_task(root, spec, splits)
    return spec


# -- feature extraction -------------------------------------------------------------------


def encoder_hash(encoder: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(encoder.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def tap_indices(depth: int, fractions: Sequence[float] = (0.25, 0.5, 0.75, 1.0)) -> list[int]:
    return [min(depth, max(1, int(math.floor(depth * f + 0.5)))) for f in fractions]


@torch.no_grad()
def pooled_features(encoder: Encoder, images: Tensor, metas: Sequence[MetadataRecord],
                    modality: ModalitySpec, batch: int = 32) -> np.ndarray:
    encoder.eval()
    out = [encoder(images[i : i + batch], metas[i : i + batch], modality).pooled for i in range(0, len(images), batch)]
    return torch.cat(out).double().numpy()


@torch.no_grad()
def tapped_features(encoder: Encoder, images: Tensor, metas: Sequence[MetadataRecord],
                    modality: ModalitySpec, batch: int = 32) -> list[Tensor]:
    """Block outputs at the four tap depths as [N, D, gh, gw] maps."""
    encoder.eval()
    taps = tap_indices(len(encoder.blocks))
    gh, gw = images.shape[-2] // modality.patch_size, images.shape[-1] // modality.patch_size
    levels: list[list[Tensor]] = [[] for _ in taps]
    for i in range(0, len(images), batch):
        out = encoder(images[i : i + batch], metas[i : i + batch], modality, taps=taps)
        for lv, hdn in zip(levels, out.hidden):
            lv.append(hdn.transpose(1, 2).reshape(hdn.shape[0], -1, gh, gw))
    return [torch.cat(lv) for lv in levels]


# -- kNN ----------------------------------------------------------------------------------


def knn_predict(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, k: int = 20,
                exclude_self: bool = False) -> np.ndarray:
    """Cosine-distance k-NN majority vote.

    Vote ties go to the class whose nearest voting neighbour is closest, then to the
    smallest class index. ``exclude_self`` drops index i from the neighbours of test row i
    (for evaluating a set against itself).
    """
    train_x, test_x = np.asarray(train_x, np.float64), np.asarray(test_x, np.float64)
    train_y = np.asarray(train_y)
    n_avail = len(train_x) - (1 if exclude_self else 0)
    if k < 1 or k > n_avail:
        raise ValueError(f"k={k} must lie in 1..{n_avail}")
    a = train_x / np.maximum(np.linalg.norm(train_x, axis=1, keepdims=True), 1e-12)
    b = test_x / np.maximum(np.linalg.norm(test_x, axis=1, keepdims=True), 1e-12)
    dist = 1.0 - b @ a.T
    if exclude_self:
        np.fill_diagonal(dist, np.inf)
    preds = np.empty(len(test_x), dtype=train_y.dtype)
    for i, row in enumerate(dist):
        nn_idx = np.argsort(row, kind="stable")[:k]
        best = None
        for cls in np.unique(train_y[nn_idx]):
            members = nn_idx[train_y[nn_idx] == cls]
            key = (-len(members), row[members].min(), cls)
            if best is None or key < best:
                best = key
        preds[i] = best[2]
    return preds


def knn_eval(train_x, train_y, test_x, test_y, k: int = 20, exclude_self: bool = False) -> float:
    return overall_accuracy(knn_predict(train_x, train_y, test_x, k, exclude_self), test_y)


# -- linear probe -------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    batch_size: int = 64
    epochs: int = 50
    lr_grid: tuple[float, ...] = (1e-2, 1e-1, 1.0, 10.0)
    dense_batch_size: int = 16
    dense_epochs: int = 50
    dense_lr_grid: tuple[float, ...] = (1e-4, 1e-3, 1e-2)
    dense_weight_decay: float = 0.01
    dense_channels: int = 64
    aux_weight: float = 0.4
    knn_k: int = 20

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class ProbeResult:
    metric: str
    test: float
    val: float
    lr: float
    val_by_lr: dict[float, float] = field(default_factory=dict)
    excluded_tiles: int = 0


def _better(metric: str, a: float, b: float) -> bool:
    return a > b if HIGHER_IS_BETTER[metric] else a < b


def _score(kind: Kind, logits: np.ndarray, labels: np.ndarray) -> float:
    if kind == "cls":
        return overall_accuracy(logits.argmax(axis=1), labels)
    return mean_average_precision(logits, labels)


def _probe_loss(kind: Kind, logits: Tensor, labels: Tensor) -> Tensor:
    if kind == "cls":
        return F.cross_entropy(logits, labels)
    return F.multilabel_soft_margin_loss(logits, labels)


def _selection_key(metric: str, score: float, val_loss: float) -> tuple[float, float]:
    """Order candidates by validation metric, breaking ties with the lower validation loss."""
    loss = val_loss if math.isfinite(val_loss) else math.inf
    return (score if HIGHER_IS_BETTER[metric] else -score, -loss)


def linear_probe_features(
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
    test: tuple[np.ndarray, np.ndarray],
    kind: Literal["cls", "multilabel"],
    num_classes: int,
    config: ProbeConfig = ProbeConfig(),
    seed: int = 0,
) -> ProbeResult:
    """Train a linear head with plain SGD per learning rate; report test at the best val epoch."""
    metric = METRIC_FOR_KIND[kind]
    xs = {s: torch.as_tensor(x, dtype=torch.float32) for s, (x, _) in zip(SPLITS, (train, val, test))}
    ys = {s: np.asarray(y) for s, (_, y) in zip(SPLITS, (train, val, test))}
    label_dtype = torch.long if kind == "cls" else torch.float32
    y_train = torch.as_tensor(ys["train"], dtype=label_dtype)
    y_val = torch.as_tensor(ys["val"], dtype=label_dtype)
    worst = -math.inf if HIGHER_IS_BETTER[metric] else math.inf
    best: ProbeResult | None = None
    best_key = None
    val_by_lr = {}
    for lr in config.lr_grid:
        gen = torch.Generator().manual_seed(seed)
        head = nn.Linear(xs["train"].shape[1], num_classes)
        with torch.no_grad():
            head.weight.copy_(torch.randn(head.weight.shape, generator=gen) * 0.01)
            head.bias.zero_()
        opt = torch.optim.SGD(head.parameters(), lr=lr)
        run_key, run_val, run_state = None, None, None
        for _ in range(config.epochs):
            order = torch.randperm(len(y_train), generator=gen)
            for i in range(0, len(order), config.batch_size):
                idx = order[i : i + config.batch_size]
                loss = _probe_loss(kind, head(xs["train"][idx]), y_train[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
            with torch.no_grad():
                v = head(xs["val"])
                v_loss = float(_probe_loss(kind, v, y_val))
            v = v.numpy()
            score = _score(kind, v, ys["val"]) if np.isfinite(v).all() else worst
            key = _selection_key(metric, score, v_loss)
            if run_key is None or key > run_key:
                run_key, run_val = key, score
                run_state = {k: t.clone() for k, t in head.state_dict().items()}
        val_by_lr[lr] = run_val
        head.load_state_dict(run_state)
        with torch.no_grad():
            t = head(xs["test"]).numpy()
        result = ProbeResult(metric, _score(kind, t, ys["test"]), run_val, lr)
        if best is None or run_key > best_key:
            best, best_key = result, run_key
    best.val_by_lr = val_by_lr
    return best


# -- dense decoding -----------------------------------------------------------------------


def _conv(cin: int, cout: int, k: int = 3) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, k, padding=k // 2), nn.ReLU())


class UPerNetLite(nn.Module):
    """Pyramid-pooling plus top-down fusion over a four-level pyramid built from ViT taps."""

    SCALES = (4.0, 2.0, 1.0, 0.5)
    POOL_SIZES = (1, 2, 3, 6)

    def __init__(self, in_dim: int, num_out: int, channels: int = 64) -> None:
        super().__init__()
        self.lateral = nn.ModuleList(_conv(in_dim, channels, 1) for _ in range(3))
        self.ppm = nn.ModuleList(_conv(in_dim, channels, 1) for _ in self.POOL_SIZES)
        self.ppm_fuse = _conv(in_dim + channels * len(self.POOL_SIZES), channels)
        self.fpn = nn.ModuleList(_conv(channels, channels) for _ in range(3))
        self.fuse = _conv(channels * 4, channels)
        self.classifier = nn.Conv2d(channels, num_out, 1)
        self.aux = nn.Sequential(_conv(in_dim, channels), nn.Conv2d(channels, num_out, 1))

    @classmethod
    def pyramid(cls, maps: Sequence[Tensor]) -> list[Tensor]:
        out = []
        for x, s in zip(maps, cls.SCALES):
            if s == 1.0:
                out.append(x)
            else:
                size = (max(1, int(x.shape[-2] * s)), max(1, int(x.shape[-1] * s)))
                out.append(F.interpolate(x, size=size, mode="bilinear", align_corners=False))
        return out

    def forward(self, maps: Sequence[Tensor], out_size: tuple[int, int]) -> tuple[Tensor, Tensor]:
        feats = self.pyramid(maps)
        top = feats[3]
        pooled = [top] + [
            F.interpolate(conv(F.adaptive_avg_pool2d(top, s)), size=top.shape[-2:], mode="bilinear", align_corners=False)
            for conv, s in zip(self.ppm, self.POOL_SIZES)
        ]
        levels = [lat(f) for lat, f in zip(self.lateral, feats[:3])] + [self.ppm_fuse(torch.cat(pooled, 1))]
        for i in range(2, -1, -1):
            levels[i] = levels[i] + F.interpolate(levels[i + 1], size=levels[i].shape[-2:], mode="bilinear",
                                                  align_corners=False)
        outs = [self.fpn[i](levels[i]) for i in range(3)] + [levels[3]]
        size = outs[0].shape[-2:]
        fused = self.fuse(torch.cat(
            [outs[0]] + [F.interpolate(o, size=size, mode="bilinear", align_corners=False) for o in outs[1:]], 1))
        main = F.interpolate(self.classifier(fused), size=out_size, mode="bilinear", align_corners=False)
        aux = F.interpolate(self.aux(feats[2]), size=out_size, mode="bilinear", align_corners=False)
        return main, aux


def difference_features(pre: Sequence[Tensor], post: Sequence[Tensor]) -> list[Tensor]:
    return [b - a for a, b in zip(pre, post)]


def dense_eval_features(
    feats: dict[str, list[Tensor]],
    targets: dict[str, np.ndarray],
    kind: Literal["seg", "reg", "cd"],
    num_classes: int,
    config: ProbeConfig = ProbeConfig(),
    seed: int = 0,
) -> ProbeResult:
    """Train the dense decoder on fixed feature maps, one run per learning rate."""
    metric = METRIC_FOR_KIND[kind]
    regression = kind == "reg"
    excluded = 0
    if regression:
        keep = {}
        for s in SPLITS:
            valid_tile = np.isfinite(targets[s]).reshape(len(targets[s]), -1).any(axis=1)
            excluded += int((~valid_tile).sum())
            keep[s] = valid_tile
        feats = {s: [f[torch.from_numpy(keep[s])] for f in feats[s]] for s in SPLITS}
        targets = {s: targets[s][keep[s]] for s in SPLITS}
        train_t = targets["train"]
        mu = float(np.nanmean(train_t))
        sd = float(np.nanstd(train_t)) or 1.0
    out_size = targets["train"].shape[-2:]
    num_out = 1 if regression else num_classes

    def tgt(s: str) -> Tensor:
        if regression:
            return torch.as_tensor((targets[s] - mu) / sd, dtype=torch.float32)
        return torch.as_tensor(targets[s], dtype=torch.long)

    def predict(model: UPerNetLite, s: str) -> np.ndarray:
        with torch.no_grad():
            out = torch.cat([model([f[i : i + 64] for f in feats[s]], out_size)[0]
                             for i in range(0, len(targets[s]), 64)])
        return out[:, 0].numpy() * sd + mu if regression else out.argmax(1).numpy()

    def evaluate(model: UPerNetLite, s: str) -> float:
        p = predict(model, s)
        return rmse(p, targets[s]) if regression else mean_iou(p, targets[s], num_classes)

    def loss_fn(out: Tensor, y: Tensor) -> Tensor:
        return masked_l1(out[:, 0], y) if regression else F.cross_entropy(out, y)

    y_train = tgt("train")
    best: ProbeResult | None = None
    val_by_lr = {}
    for lr in config.dense_lr_grid:
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed)
        model = UPerNetLite(feats["train"][0].shape[1], num_out, config.dense_channels)
        opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=config.dense_weight_decay)
        run_val, run_state = None, None
        for _ in range(config.dense_epochs):
            model.train()
            order = torch.randperm(len(y_train), generator=gen)
            for i in range(0, len(order), config.dense_batch_size):
                idx = order[i : i + config.dense_batch_size]
                y = y_train[idx]
                if regression and not bool((~torch.isnan(y)).any()):
                    continue
                main, aux = model([f[idx] for f in feats["train"]], out_size)
                loss = loss_fn(main, y) + config.aux_weight * loss_fn(aux, y)
                opt.zero_grad()
                loss.backward()
                opt.step()
            model.eval()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                score = evaluate(model, "val")
            if not math.isfinite(score):
                continue
            if run_val is None or _better(metric, score, run_val):
                run_val = score
                run_state = {k: t.clone() for k, t in model.state_dict().items()}
        if run_state is None:
            continue
        val_by_lr[lr] = run_val
        model.load_state_dict(run_state)
        result = ProbeResult(metric, evaluate(model, "test"), run_val, lr, excluded_tiles=excluded)
        if best is None or _better(metric, result.val, best.val):
            best = result
    if best is None:
        raise RuntimeError("every learning rate diverged")
    best.val_by_lr = val_by_lr
    return best


# -- task-level protocols -------------------------------------------------------------------


def _check_modality(encoder: Encoder, task: Task) -> None:
    nc = task.spec.modality.num_channels
    for name, s in task.splits.items():
        if s.images.shape[1] != nc:
            raise TaskDataError(f"{name}: images have {s.images.shape[1]} channels, modality declares {nc}")


def evaluate_task(
    encoder: Encoder,
    task: Task,
    protocol: Literal["linear", "knn", "dense"] | None = None,
    config: ProbeConfig = ProbeConfig(),
    seed: int = 0,
) -> ProbeResult:
    """Frozen-encoder evaluation; raises FrozenEncoderError if the weights change."""
    _check_modality(encoder, task)
    spec = task.spec
    protocol = protocol or ("linear" if spec.kind in ("cls", "multilabel") else "dense")
    before = encoder_hash(encoder)
    mod = spec.modality
    if protocol in ("linear", "knn"):
        if spec.kind not in ("cls", "multilabel"):
            raise ValueError(f"{protocol} protocol needs a classification task, got {spec.kind}")
        feats = {s: pooled_features(encoder, sp.images, sp.metas, mod) for s, sp in task.splits.items()}
        labels = {s: sp.labels for s, sp in task.splits.items()}
        if protocol == "knn":
            if spec.kind != "cls":
                raise ValueError("kNN supports single-label classification only")
            k = min(config.knn_k, len(labels["train"]))
            acc = knn_eval(feats["train"], labels["train"], feats["test"], labels["test"], k)
            result = ProbeResult("OA", acc, math.nan, math.nan)
        else:
            result = linear_probe_features(
                *[(feats[s], labels[s]) for s in SPLITS], spec.kind, spec.num_classes, config, seed)
    else:
        if spec.kind not in ("seg", "reg", "cd"):
            raise ValueError(f"dense protocol needs a seg/reg/cd task, got {spec.kind}")
        feats = {}
        for s, sp in task.splits.items():
            maps = tapped_features(encoder, sp.images, sp.metas, mod)
            if spec.kind == "cd":
                if sp.post is None or sp.post.shape != sp.images.shape:
                    raise TaskDataError(f"{s}: change detection needs paired pre/post images")
                maps = difference_features(maps, tapped_features(encoder, sp.post, sp.metas, mod))
            feats[s] = maps
        targets = {s: sp.targets for s, sp in task.splits.items()}
        result = dense_eval_features(feats, targets, spec.kind, spec.num_classes, config, seed)
    if encoder_hash(encoder) != before:
        raise FrozenEncoderError("encoder weights changed during evaluation")
    return result


@dataclass
class Report:
    task: str
    protocol: str
    metric: str
    runs: list[dict]

    @property
    def values(self) -> np.ndarray:
        return np.asarray([r["test"] for r in self.runs], dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def std(self) -> float:
        """Population standard deviation over seeds."""
        return float(self.values.std())

    def table(self) -> str:
        return (f"{'task':<24}{'protocol':<10}{'metric':<8}{'mean':>12}{'std':>12}{'runs':>6}\n"
                f"{self.task:<24}{self.protocol:<10}{self.metric:<8}{self.mean:>12.6f}{self.std:>12.6f}"
                f"{len(self.runs):>6}\n")

    def to_dict(self) -> dict:
        return {"task": self.task, "protocol": self.protocol, "metric": self.metric,
                "mean": self.mean, "std": self.std, "runs": self.runs}

    def write(self, out_dir: Path | str) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "results.jsonl", "w") as fh:
            for r in self.runs:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        (out / "table.txt").write_text(self.table())
        (out / "table.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_records(cls, path: Path | str, task: str, protocol: str, metric: str) -> Report:
        runs = [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]
        return cls(task, protocol, metric, runs)


def run_seeds(
    encoder: Encoder,
    task: Task,
    protocol: Literal["linear", "knn", "dense"] | None = None,
    config: ProbeConfig = ProbeConfig(),
    seeds: Sequence[int] = (0, 1, 2),
) -> Report:
    runs = []
    for seed in seeds:
        r = evaluate_task(encoder, task, protocol, config, seed)
        runs.append({"seed": seed, "test": r.test, "val": r.val, "lr": r.lr, "metric": r.metric,
                     "excluded_tiles": r.excluded_tiles})
    proto = protocol or ("linear" if task.spec.kind in ("cls", "multilabel") else "dense")
    return Report(task.spec.name, proto, task.spec.metric, runs)
