"""Two-stage training and episodic evaluation.

Stage 1 trains the extractor and a base-class cosine classifier on the tape.
Stage 2 freezes the extractor and fits a fresh classifier per episode on the
support set using the fused kernels in :mod:`sslfewshot.kernels`.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .data import Dataset, Episode, EpisodeSpec, rng_for, sample_episode
from .loss import loss_fn
from .nn import (
    ClassifierWeights,
    FeatureExtractor,
    extract_features,
    init_extractor,
    normalize_columns,
    random_unit_columns,
)
from .tensor import GradientTape, backward

__all__ = [
    "TrainConfig",
    "EvalReport",
    "PretrainResult",
    "AblationRow",
    "step_lr",
    "sgd_step",
    "pretrain",
    "fit_episode_classifier",
    "predict",
    "evaluate",
    "ci95_half_width",
    "config_digest",
    "run_ablation",
    "FreezeError",
]

LOSS_KINDS = ("ssl", "sl")


class FreezeError(RuntimeError):
    """Stage-2 code was handed an extractor that is not frozen."""


@dataclass(frozen=True)
class TrainConfig:
    stage1_loss: str = "ssl"
    stage2_loss: str = "ssl"
    epochs: int = 200
    batch_size: int = 200
    lr: float = 0.1
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 50
    stage2_iterations: int = 100
    stage2_batch_size: int = 4
    stage2_lr: float = 0.01
    alpha: float = 10.0
    seed: int = 0
    detach_adjustment: bool = False
    alpha_in_gap: bool = False
    momentum: float = 0.0
    weight_decay: float = 0.0
    stage2_init: str = "random"

    def __post_init__(self):
        for name in ("stage1_loss", "stage2_loss"):
            value = getattr(self, name).lower()
            if value not in LOSS_KINDS:
                raise ValueError(f"{name} must be one of {LOSS_KINDS}, got {value!r}")
            object.__setattr__(self, name, value)
        if self.epochs < 0 or self.stage2_iterations < 0:
            raise ValueError("epoch and iteration counts must be >= 0")
        if self.batch_size < 1 or self.stage2_batch_size < 1 or self.lr_decay_every < 1:
            raise ValueError("batch sizes and lr_decay_every must be >= 1")
        if not (self.lr > 0 and self.stage2_lr > 0):
            raise ValueError("learning rates must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must be in (0, 1]")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must be in [0, 1) and weight_decay >= 0")
        if self.stage2_init not in ("random", "proto"):
            raise ValueError("stage2_init must be 'random' or 'proto'")

    @property
    def gap_factor(self) -> float:
        return 1.0 if self.alpha_in_gap else 1.0 / self.alpha


def config_digest(cfg) -> str:
    """Short stable hash of a dataclass config."""
    items = sorted(asdict(cfg).items())
    text = "\n".join(f"{k}={v!r}" for k, v in items)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def step_lr(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    *,
    unit_columns: Sequence[str] = ("classifier.W",),
    velocity: dict[str, np.ndarray] | None = None,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> dict[str, np.ndarray]:
    """Plain SGD ``p - lr * g`` returning new arrays.

    Parameters named in ``unit_columns`` get their columns rescaled to unit
    length after the step. ``velocity`` is updated in place when momentum is
    used.
    """
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.size != p.size:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        g = g.reshape(p.shape)
        if weight_decay:
            g = g + weight_decay * p
        if momentum:
            if velocity is None:
                raise ValueError("momentum needs a velocity dict")
            v = momentum * velocity.get(name, np.zeros_like(p)) + g
            velocity[name] = v
            g = v
        new = p - lr * g
        if name in unit_columns:
            new = normalize_columns(new)
        out[name] = new
    return out


@dataclass(frozen=True)
class PretrainResult:
    extractor: FeatureExtractor
    classifier: ClassifierWeights
    losses: tuple[float, ...]
    classes: tuple[int, ...]


def initial_model(cfg: TrainConfig, sizes: Sequence[int], n_classes: int) -> tuple[FeatureExtractor, ClassifierWeights]:
    fe = init_extractor(sizes, seed=int(rng_for(cfg.seed, "extractor").integers(2**63)))
    W = random_unit_columns(fe.output_dim, n_classes, rng_for(cfg.seed, "classifier"))
    return fe, ClassifierWeights(W, cfg.alpha)


def pretrain(
    cfg: TrainConfig,
    ds: Dataset,
    classes: Sequence[int],
    hidden: Sequence[int] = (32, 8),
    init: tuple[FeatureExtractor, ClassifierWeights] | None = None,
) -> PretrainResult:
    """Stage 1: mini-batch SGD of extractor and classifier on ``classes``."""
    classes = tuple(int(c) for c in classes)
    if not classes:
        raise ValueError("stage 1 needs at least one training class")
    X, y = ds.subset(classes)
    if init is None:
        fe, cw = initial_model(cfg, [ds.input_dim, *hidden], len(classes))
    else:
        fe, cw = init
        fe = fe.unfreeze()
    if fe.input_dim != ds.input_dim:
        raise ValueError(f"extractor takes {fe.input_dim} inputs, dataset has {ds.input_dim}")
    if cw.class_count != len(classes) or cw.feature_dim != fe.output_dim:
        raise ValueError("classifier shape does not match extractor output and class count")

    objective = loss_fn(cfg.stage1_loss, alpha_in_gap=cfg.alpha_in_gap, detach_adjustment=cfg.detach_adjustment)
    rng = rng_for(cfg.seed, "shuffle")
    velocity: dict[str, np.ndarray] = {}
    losses = []
    n = len(y)
    for epoch in range(cfg.epochs):
        lr = step_lr(cfg, epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tape = GradientTape()
            feats = extract_features(fe, X[idx], tape)
            loss = objective(cw.watch(tape), feats, y[idx])
            grads = backward(tape, loss)
            params = {**fe.params(), "classifier.W": cw.array()}
            named = {k: grads[t.node].reshape(params[k].shape) for k, t in tape.named.items()}
            params = sgd_step(
                params, named, lr,
                velocity=velocity, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
            )
            fe = fe.with_params(params)
            cw = replace(cw, W=params["classifier.W"])
            total += loss.item() * idx.size
        losses.append(total / n)
    return PretrainResult(fe, cw, tuple(losses), classes)


def _batch_schedule(n: int, iterations: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices for ``iterations`` mini-batches drawn by cycling fresh permutations."""
    need = iterations * batch_size
    if need == 0:
        return np.zeros((0, batch_size), dtype=np.int64)
    reps = -(-need // n)
    order = np.concatenate([rng.permutation(n) for _ in range(reps)])
    return order[:need].reshape(iterations, batch_size)


def fit_episode_classifier(
    fe: FeatureExtractor,
    support_x: np.ndarray,
    support_y: np.ndarray,
    n_way: int,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> ClassifierWeights:
    """Stage 2: fit a task classifier on frozen support embeddings."""
    if not fe.frozen:
        raise FreezeError("fit_episode_classifier needs a frozen feature extractor")
    support_y = np.asarray(support_y, dtype=np.int64)
    if support_y.size == 0:
        raise ValueError("empty support set")
    feats = fe.forward(support_x)
    if cfg.stage2_init == "proto":
        W0 = np.stack([feats[support_y == k].mean(axis=0) for k in range(n_way)], axis=1)
        W0 = normalize_columns(W0)
    else:
        W0 = random_unit_columns(fe.output_dim, n_way, rng)
    batches = _batch_schedule(support_y.size, cfg.stage2_iterations, cfg.stage2_batch_size, rng)
    W = kernels.fit_prototypes(
        W0, feats, support_y, batches, cfg.stage2_lr, cfg.alpha,
        ssl=cfg.stage2_loss == "ssl", beta=cfg.gap_factor, detach=cfg.detach_adjustment,
        momentum=cfg.momentum, weight_decay=cfg.weight_decay,
    )
    return ClassifierWeights(W, cfg.alpha)


def predict(cw: ClassifierWeights, feats: np.ndarray) -> np.ndarray:
    """Argmax cosine score; no adjustment at inference (labels are unknown)."""
    f = np.asarray(feats, dtype=np.float64)
    f_hat = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), cw.eps)
    scores = cw.alpha * (f_hat @ normalize_columns(cw.array(), cw.eps))
    return scores.argmax(axis=1)


def ci95_half_width(acc: Sequence[float]) -> float:
    """``1.96 * s / sqrt(n)`` with the n-1 sample std; 0 for a single episode."""
    acc = np.asarray(acc, dtype=np.float64)
    if acc.size < 2:
        return 0.0
    return float(1.96 * acc.std(ddof=1) / math.sqrt(acc.size))


@dataclass(frozen=True)
class EvalReport:
    per_episode_accuracy: tuple[float, ...]
    mean: float
    ci95_half_width: float
    episode_count: int
    episode_spec: EpisodeSpec
    seed: int
    config_digest: str

    @classmethod
    def from_accuracies(cls, acc, es: EpisodeSpec, seed: int, digest: str) -> "EvalReport":
        acc = tuple(float(a) for a in acc)
        return cls(acc, float(np.mean(acc)), ci95_half_width(acc), len(acc), es, seed, digest)


def run_episode(fe: FeatureExtractor, ds: Dataset, classes, es: EpisodeSpec, cfg: TrainConfig,
                seed: int, index: int) -> float:
    rng = rng_for(seed, "episode", index)
    ep: Episode = sample_episode(ds, classes, es, rng)
    cw = fit_episode_classifier(fe, ep.support_x, ep.support_y, es.way, cfg, rng)
    pred = predict(cw, fe.forward(ep.query_x))
    return float(np.mean(pred == ep.query_y))


def evaluate(
    fe: FeatureExtractor,
    ds: Dataset,
    classes: Sequence[int],
    es: EpisodeSpec,
    n_episodes: int,
    cfg: TrainConfig,
    seed: int,
    jobs: int = 1,
) -> EvalReport:
    """Mean query accuracy over ``n_episodes`` independently seeded episodes."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    fe = fe.freeze()
    classes = tuple(int(c) for c in classes)

    def one(i: int) -> float:
        return run_episode(fe, ds, classes, es, cfg, seed, i)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            acc = list(pool.map(one, range(n_episodes)))
    else:
        acc = [one(i) for i in range(n_episodes)]
    return EvalReport.from_accuracies(acc, es, seed, config_digest(cfg))


@dataclass(frozen=True)
class AblationRow:
    stage1: str
    stage2: str
    report: EvalReport


def run_ablation(
    cfg: TrainConfig,
    ds: Dataset,
    train_classes: Sequence[int],
    eval_classes: Sequence[int],
    es: EpisodeSpec,
    n_episodes: int,
    seed: int,
    hidden: Sequence[int] = (32, 8),
    jobs: int = 1,
    pretrained: Mapping[str, PretrainResult] | None = None,
) -> tuple[list[AblationRow], dict[str, PretrainResult]]:
    """Every stage-1 x stage-2 loss pairing; two pretrains shared by four evals.

    Rows come back as SSL/SSL, SSL/SL, SL/SSL, SL/SL. Stage-1 results can be
    passed in through ``pretrained`` (keyed "ssl" / "sl") to skip retraining.
    """
    pretrained = dict(pretrained or {})
    for kind in ("ssl", "sl"):
        if kind not in pretrained:
            pretrained[kind] = pretrain(replace(cfg, stage1_loss=kind), ds, train_classes, hidden)
    rows = []
    for s1 in ("ssl", "sl"):
        for s2 in ("ssl", "sl"):
            stage_cfg = replace(cfg, stage1_loss=s1, stage2_loss=s2)
            report = evaluate(pretrained[s1].extractor, ds, eval_classes, es, n_episodes, stage_cfg, seed, jobs)
            rows.append(AblationRow(s1.upper(), s2.upper(), report))
    return rows, pretrained


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
