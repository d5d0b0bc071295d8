"""Dataset handling, class-balanced sampling, rotation augmentation wiring,
training loops, and evaluation metrics.

Every run is a pure function of (seed, config, data): the master Philox
stream drives sampling, augmentation choices, corruption, and dropout in a
fixed order, so identical runs produce bit-identical histories and
checkpoints.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.stats import rankdata

from . import nn
from .errors import ShapeError, TrainingDivergence, ValidationError
from .mesh import Icosphere, build_icosphere
from .model import (SiTModel, backward_batch, ensure_mpp, forward_batch,
                    mpp_forward_batch, save_checkpoint)
from .patching import PatchTable, build_ico_patch_table
from .resample import AUGMENT_ANGLES, ResampleTable, rotation_table


@dataclass
class Dataset:
    """In-memory example collection sharing one patch table.

    fields is (n, Vmesh, C) per-vertex data; targets are scalars
    (regression) or class indices. confounds and categories are optional
    per-example scalars/small ints. carrier is needed only when rotation
    augmentation is requested.
    """
    fields: np.ndarray
    targets: np.ndarray
    table: PatchTable
    confounds: np.ndarray | None = None
    categories: np.ndarray | None = None
    carrier: Icosphere | None = None

    def __post_init__(self):
        self.fields = np.ascontiguousarray(self.fields, dtype=np.float32)
        self.targets = np.asarray(self.targets)
        if self.fields.ndim != 3:
            raise ShapeError("dataset fields must be (n, V, C)")
        if self.fields.shape[1] != self.table.carrier_vertex_count:
            raise ShapeError("dataset vertex count != patch table carrier")
        if len(self.targets) != len(self.fields):
            raise ShapeError("targets length != example count")

    def __len__(self) -> int:
        return len(self.fields)

    @property
    def channels(self) -> int:
        return self.fields.shape[2]


@dataclass
class TrainConfig:
    optimizer: str = "sgd"            # "sgd" | "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    iterations: int = 100
    augment: bool = False
    angle_cap: float = 10.0           # max |rotation| drawn for augmentation
    sampler: str = "uniform"          # "uniform" | "adaptive"
    seed: int = 0
    loss: str = "mse"                 # "mse" | "cross_entropy" | "mpp"
    mpp_ratio: float = 0.5
    checkpoint_interval: int = 0      # 0 = only at the end

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.sampler not in ("uniform", "adaptive"):
            raise ValidationError(f"unknown sampler {self.sampler!r}")
        if self.loss not in ("mse", "cross_entropy", "mpp"):
            raise ValidationError(f"unknown loss {self.loss!r}")


# ---------------------------------------------------------------------------
# samplers


def uniform_sampler(dataset: Dataset, rng: np.random.Generator) -> Iterator[int]:
    n = len(dataset)
    while True:
        yield int(rng.integers(0, n))


def adaptive_sampler(dataset: Dataset, rng: np.random.Generator) -> Iterator[int]:
    """Category-balanced: draw a category uniformly, then a uniform example
    inside it (with replacement). Expected per-category mass is 1/K."""
    if dataset.categories is None:
        yield from uniform_sampler(dataset, rng)
        return
    cats = np.asarray(dataset.categories)
    n_cat = int(cats.max()) + 1
    groups = [np.flatnonzero(cats == k) for k in range(n_cat)]
    for k, g in enumerate(groups):
        if len(g) == 0:
            raise ValidationError(f"sampling category {k} is empty")
    while True:
        g = groups[int(rng.integers(0, n_cat))]
        yield int(g[int(rng.integers(0, len(g)))])


# ---------------------------------------------------------------------------
# augmentation


def rotation_choices(angle_cap: float) -> list[tuple[str, float] | None]:
    """Identity plus every (axis, +/-angle) with angle <= cap."""
    choices: list = [None]
    for axis in ("x", "y", "z"):
        for deg in AUGMENT_ANGLES:
            if deg <= angle_cap:
                choices.extend([(axis, deg), (axis, -deg)])
    return choices


class _AugmentPool:
    """Lazily built, cached rotation tables for one carrier icosphere."""

    def __init__(self, carrier: Icosphere, angle_cap: float):
        self.carrier = carrier
        self.choices = rotation_choices(angle_cap)
        self.tables: dict[tuple[str, float], ResampleTable] = {}

    def draw(self, rng: np.random.Generator) -> ResampleTable | None:
        pick = self.choices[int(rng.integers(0, len(self.choices)))]
        if pick is None:
            return None
        if pick not in self.tables:
            self.tables[pick] = rotation_table(self.carrier, *pick)
        return self.tables[pick]


def _apply_table(values: np.ndarray, table: ResampleTable) -> np.ndarray:
    """Rotation-table application on raw (V, C) float32 values."""
    tri = table.src_faces[table.face_index]
    a, b, c = values[tri[:, 0]], values[tri[:, 1]], values[tri[:, 2]]
    w1 = table.weights[:, 1:2]
    w2 = table.weights[:, 2:3]
    return (a + w1 * (b - a) + w2 * (c - a)).astype(np.float32)


# ---------------------------------------------------------------------------
# batch assembly and losses


def _gather(fields: np.ndarray, table: PatchTable) -> np.ndarray:
    b = fields.shape[0]
    n, v = table.rows.shape
    c = fields.shape[2]
    return fields[:, table.rows.ravel(), :].reshape(b, n, v * c)


def _mse_loss(out: np.ndarray, targets: np.ndarray):
    diff = out.astype(np.float64) - targets
    loss = float(np.mean(diff ** 2))
    dout = (2.0 * diff / len(diff)).astype(out.dtype)
    return loss, dout


def _ce_loss(logits: np.ndarray, labels: np.ndarray):
    p = nn.softmax_rows(logits.astype(np.float64))
    b = len(labels)
    picked = np.clip(p[np.arange(b), labels], 1e-300, None)
    loss = float(-np.mean(np.log(picked)))
    dlogits = p.copy()
    dlogits[np.arange(b), labels] -= 1.0
    return loss, (dlogits / b).astype(logits.dtype)


def _mpp_batch_loss(decoded: np.ndarray, targets: np.ndarray,
                    masks: np.ndarray):
    diff = (decoded.astype(np.float64) - targets) * masks[:, :, None]
    denom = float(masks.sum()) * decoded.shape[2]
    loss = float((diff ** 2).sum() / denom)
    ddec = (2.0 * diff / denom).astype(decoded.dtype)
    return loss, ddec


def _make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return nn.SGD(config.lr, config.momentum)
    return nn.Adam(config.lr, config.beta1, config.beta2, config.adam_eps)


def _run_loop(model: SiTModel, dataset: Dataset, config: TrainConfig,
              mpp: bool, checkpoint_stem=None):
    rng = nn.rng_from_seed(config.seed)
    opt = _make_optimizer(config)
    sampler = (adaptive_sampler if config.sampler == "adaptive"
               else uniform_sampler)(dataset, rng)
    pool = None
    if config.augment:
        if dataset.carrier is None:
            raise ValidationError("augmentation requires a carrier icosphere")
        pool = _AugmentPool(dataset.carrier, config.angle_cap)
    if mpp:
        ensure_mpp(model, rng)
    use_confound = (model.config.deconfound and dataset.confounds is not None
                    and not mpp)

    history = []
    for it in range(1, config.iterations + 1):
        idx = np.array([next(sampler) for _ in range(config.batch_size)])
        fields = dataset.fields[idx]
        if pool is not None:
            fields = np.stack([
                f if (t := pool.draw(rng)) is None else _apply_table(f, t)
                for f in fields])
        data = _gather(fields, dataset.table)
        if mpp:
            decoded, corrs, _, cache = mpp_forward_batch(
                data, model, config.mpp_ratio, rng, training=True,
                want_cache=True)
            masks = np.stack([c.mask for c in corrs])
            loss, dout = _mpp_batch_loss(decoded, data, masks)
        else:
            conf = dataset.confounds[idx] if use_confound else None
            out, _, cache = forward_batch(data, model, conf, rng,
                                          training=True, want_cache=True)
            if config.loss == "cross_entropy":
                loss, dout = _ce_loss(out, dataset.targets[idx].astype(int))
            else:
                loss, dout = _mse_loss(out, dataset.targets[idx])
        if not np.isfinite(loss):
            raise TrainingDivergence(f"non-finite loss at iteration {it}")
        grads = backward_batch(dout, model, cache)
        opt.step(model.params, grads)
        history.append(loss)
        if (checkpoint_stem and config.checkpoint_interval
                and it % config.checkpoint_interval == 0):
            save_checkpoint(model, f"{checkpoint_stem}_it{it}")
    if checkpoint_stem:
        save_checkpoint(model, checkpoint_stem)
    return model, np.array(history)


def train_loop(model: SiTModel, dataset: Dataset, config: TrainConfig,
               checkpoint_stem=None):
    """Supervised training (MSE or cross-entropy). Returns
    (model, per-iteration loss history)."""
    if config.loss == "mpp":
        raise ValidationError("use pretrain_mpp for the masked-patch loss")
    return _run_loop(model, dataset, config, mpp=False,
                     checkpoint_stem=checkpoint_stem)


def pretrain_mpp(model: SiTModel, dataset: Dataset, config: TrainConfig,
                 checkpoint_stem=None):
    """Masked-patch pretraining; the prediction head receives no updates."""
    return _run_loop(model, dataset, config, mpp=True,
                     checkpoint_stem=checkpoint_stem)


# ---------------------------------------------------------------------------
# evaluation


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic AUC with tie averaging (Mann-Whitney)."""
    labels = np.asarray(labels).astype(int)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def evaluate(model: SiTModel, dataset: Dataset,
             batch_size: int = 64) -> dict[str, float]:
    """MAE + Pearson r for regression heads, AUC + accuracy for binary
    classification. Pearson r of constant predictions is NaN (warned)."""
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    use_confound = model.config.deconfound and dataset.confounds is not None
    preds = []
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        data = _gather(dataset.fields[idx], dataset.table)
        conf = dataset.confounds[idx] if use_confound else None
        out, _, _ = forward_batch(data, model, conf, None, training=False)
        preds.append(out)
    preds = np.concatenate(preds)

    if model.config.head_kind == "regression":
        t = dataset.targets.astype(np.float64)
        mae = float(np.mean(np.abs(preds - t)))
        if np.std(preds) == 0.0 or np.std(t) == 0.0:
            warnings.warn("Pearson r undefined for constant inputs")
            r = float("nan")
        else:
            r = float(np.corrcoef(preds, t)[0, 1])
        return {"mae": mae, "pearson_r": r}

    labels = dataset.targets.astype(int)
    pred_label = preds.argmax(axis=1)
    metrics = {"accuracy": float(np.mean(pred_label == labels))}
    if model.config.n_classes == 2:
        metrics["auc"] = auc_score(preds[:, 1] - preds[:, 0], labels)
    return metrics


def write_metrics(path, records: list[dict]) -> None:
    """One JSON record per line: {metric, value, split, seed}. Output is
    byte-stable for identical inputs."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synthetic data


def _sh_basis(v: np.ndarray) -> np.ndarray:
    """Real spherical-harmonic polynomials through degree 3, as Cartesian
    expressions on the unit sphere (16 functions)."""
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    one = np.ones_like(x)
    return np.stack([
        one,
        x, y, z,
        x * y, y * z, z * x, x * x - y * y, 3 * z * z - 1,
        z * (5 * z * z - 3),
        x * (5 * z * z - 1), y * (5 * z * z - 1),
        z * (x * x - y * y), x * y * z,
        x * (x * x - 3 * y * y), y * (3 * x * x - y * y),
    ], axis=1)

_Z_COEFF = 3  # index of the linear-in-z basis term; its coefficient is the target


def gen_synthetic(ico: Icosphere, n_examples: int, rng: np.random.Generator,
                  channels: int = 1, coarse_order: int | None = None,
                  task: str = "regression") -> Dataset:
    """Band-limited random fields (degree <= 3 harmonics, seeded
    coefficients). The regression target is channel 0's coefficient on the
    linear-in-z term; the classification target is its sign."""
    if coarse_order is None:
        coarse_order = ico.order - 4
    if coarse_order < 0:
        raise ValidationError("coarse order would be negative; pass it explicitly")
    table = build_ico_patch_table(ico, build_icosphere(coarse_order))
    basis = _sh_basis(ico.mesh.vertices.astype(np.float64))
    coeffs = rng.normal(size=(n_examples, basis.shape[1], channels))
    fields = np.einsum("vk,nkc->nvc", basis, coeffs).astype(np.float32)
    raw = coeffs[:, _Z_COEFF, 0]
    targets = ((raw > 0).astype(np.int64) if task == "classification"
               else raw.astype(np.float32))
    confounds = coeffs[:, 1, 0].astype(np.float32)   # linear-in-x coefficient
    return Dataset(fields, targets, table, confounds=confounds, carrier=ico)
