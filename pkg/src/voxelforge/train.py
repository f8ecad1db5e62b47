"""Optimizer, learning-rate schedules, both training pipelines, fold tools.

Pipeline A trains with a flat-then-cosine schedule, then runs cyclic
snapshot averaging: the learning rate restarts at half its initial
value each cycle, decays by cosine over the cycle, and the weights
saved every few epochs are averaged into a single self-ensembled model.
Pipeline B trains with batches of three under a full-range cosine and
keeps the checkpoint with the lowest validation loss (earliest on ties).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentPolicy, apply_policy
from .preprocess import PreprocMode, prepare_case, random_crop_patch
from .ranking import percentile_nearest_rank
from .tensornet import Tensor
from .unet3d import ArchConfig, DiceLossSpec, ModelParams, build_model, forward, total_loss
from .volio import LabelMap, Volume4D, labelmap_to_regions


class TrainError(RuntimeError):
    """Training aborted; the message carries epoch/step context."""


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={n: np.zeros_like(t.data) for n, t in params.items()},
            v={n: np.zeros_like(t.data) for n, t in params.items()},
        )


def adam_step(
    params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float
) -> AdamState:
    """Bias-corrected Adam update, in place on the parameter tensors."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise TrainError(f"missing gradient for parameter {name!r} at step {t}")
        if g.shape != p.data.shape:
            raise TrainError(f"gradient shape {g.shape} != parameter shape {p.data.shape} ({name})")
        if not np.isfinite(g).all():
            raise TrainError(f"non-finite gradient in {name!r} at step {t}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


@dataclass(frozen=True)
class SWAConfig:
    lr_restart: float = 5e-5
    cycle_epochs: int = 30
    snapshot_every: int = 3
    cycles: int = 5

    def __post_init__(self):
        if self.lr_restart <= 0 or self.cycle_epochs < 1 or self.cycles < 1:
            raise ValueError("SWA config values must be positive")
        if self.snapshot_every < 1 or self.cycle_epochs % self.snapshot_every != 0:
            raise ValueError(
                f"snapshot_every ({self.snapshot_every}) must divide cycle_epochs ({self.cycle_epochs})"
            )

    @property
    def total_epochs(self) -> int:
        return self.cycles * self.cycle_epochs

    @property
    def total_snapshots(self) -> int:
        return self.cycles * (self.cycle_epochs // self.snapshot_every)


@dataclass(frozen=True)
class ScheduleA:
    epochs_total: int = 200
    flat_epochs: int = 100
    lr0: float = 1e-4
    swa: SWAConfig = field(default_factory=SWAConfig)

    def __post_init__(self):
        if not 0 <= self.flat_epochs <= self.epochs_total:
            raise ValueError(f"flat_epochs {self.flat_epochs} outside [0, {self.epochs_total}]")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")


@dataclass(frozen=True)
class ScheduleB:
    epochs_max: int = 400
    lr0: float = 1e-4
    batch: int = 3

    def __post_init__(self):
        if self.epochs_max < 1 or self.batch < 1 or self.lr0 <= 0:
            raise ValueError("ScheduleB fields must be positive")

    def lr_at(self, epoch: int) -> float:
        if not 0 <= epoch <= self.epochs_max:
            raise ValueError(f"epoch {epoch} outside [0, {self.epochs_max}]")
        return self.lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs_max))


def cosine_lr(epoch: int, schedule: ScheduleA) -> float:
    """Flat at lr0, then cosine from lr0 down to 0 at epochs_total."""
    if not 0 <= epoch <= schedule.epochs_total:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.epochs_total}]")
    if epoch <= schedule.flat_epochs:
        return schedule.lr0
    span = schedule.epochs_total - schedule.flat_epochs
    frac = (epoch - schedule.flat_epochs) / span
    return schedule.lr0 * 0.5 * (1.0 + math.cos(math.pi * frac))


def swa_cycle_lr(epoch_in_cycle: int, swa: SWAConfig) -> float:
    """Cosine from lr_restart to 0 over one cycle; restarts each cycle."""
    if not 0 <= epoch_in_cycle < swa.cycle_epochs:
        raise ValueError(f"cycle epoch {epoch_in_cycle} outside [0, {swa.cycle_epochs})")
    return swa.lr_restart * 0.5 * (1.0 + math.cos(math.pi * epoch_in_cycle / swa.cycle_epochs))


@dataclass
class SWAState:
    """Running arithmetic mean of absorbed parameter snapshots."""

    count: int = 0
    mean: dict[str, np.ndarray] = field(default_factory=dict)

    def params(self) -> dict[str, np.ndarray]:
        return {n: arr.astype(np.float32) for n, arr in self.mean.items()}


def swa_update(state: SWAState, snapshot: dict[str, np.ndarray]) -> SWAState:
    """Absorb one snapshot: mean += (snap - mean) / (n + 1)."""
    if state.count == 0:
        state.mean = {n: np.asarray(a, dtype=np.float64).copy() for n, a in snapshot.items()}
    else:
        if set(snapshot) != set(state.mean):
            raise ValueError("snapshot parameter names changed between updates")
        for n, a in snapshot.items():
            state.mean[n] += (np.asarray(a, dtype=np.float64) - state.mean[n]) / (state.count + 1)
    state.count += 1
    return state


# ---------------------------------------------------------------------------
# Folds and filtering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSplit:
    folds: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        seen = set()
        for fold in self.folds:
            for cid in fold:
                if cid in seen:
                    raise ValueError(f"case {cid!r} appears in two folds")
                seen.add(cid)
        sizes = [len(f) for f in self.folds]
        if sizes and max(sizes) - min(sizes) > 1:
            raise ValueError(f"fold sizes {sizes} differ by more than 1")

    def train_val(self, i: int) -> tuple[list[str], list[str]]:
        """Validation fold i, the rest for training."""
        val = list(self.folds[i])
        train = [cid for j, fold in enumerate(self.folds) for cid in fold if j != i]
        return train, val


def five_fold_split(case_ids, seed: int) -> FoldSplit:
    """Seeded shuffle, then round-robin assignment into 5 folds."""
    ids = sorted(case_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate case ids")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    folds = [[] for _ in range(5)]
    for i, cid in enumerate(order):
        folds[i % 5].append(cid)
    return FoldSplit(tuple(tuple(f) for f in folds))


def select_best_epoch(losses) -> int:
    """Index of the smallest loss; the earliest wins ties."""
    losses = list(losses)
    if not losses:
        raise ValueError("no losses recorded")
    return losses.index(min(losses))


def filter_training_set(per_case_final_losses: dict[str, float], threshold_quantile: float) -> list[str]:
    """Drop cases whose final loss sits strictly above the quantile value."""
    if not 0.0 < threshold_quantile <= 1.0:
        raise ValueError(f"quantile must be in (0, 1], got {threshold_quantile}")
    if not per_case_final_losses:
        return []
    cut = percentile_nearest_rank(list(per_case_final_losses.values()), threshold_quantile)
    return [cid for cid, loss in per_case_final_losses.items() if loss <= cut]


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    arch: ArchConfig
    dice: DiceLossSpec
    policy: AugmentPolicy
    preproc_mode: PreprocMode
    patch: tuple[int, int, int]
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        if any(p % 8 for p in self.patch):
            raise ValueError(f"patch dims {self.patch} must be divisible by 8")


def _prepare(cases, mode: PreprocMode):
    return [prepare_case(v, lm, mode) for v, lm in cases]


def _target_stack(lm: LabelMap) -> np.ndarray:
    return labelmap_to_regions(lm).as_stack()


def _train_batch(model: ModelParams, adam: AdamState, batch, cfg: TrainConfig, lr: float, ctx: str):
    x = Tensor(np.stack([v.data for v, _ in batch]))
    target = np.stack([_target_stack(lm) for _, lm in batch])
    main, aux = forward(model, x)
    loss = total_loss(main, aux, target, cfg.dice)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainError(f"non-finite training loss at {ctx}")
    model.zero_grad()
    loss.backward()
    grads = {n: t.grad for n, t in model.tensors.items()}
    adam_step(model.tensors, grads, adam, lr)
    return value


def _epoch(model, adam, prepared, cfg: TrainConfig, lr: float, rng, batch_size: int, epoch_tag: str):
    order = rng.permutation(len(prepared))
    losses = []
    for start in range(0, len(order), batch_size):
        batch = []
        for i in order[start : start + batch_size]:
            v, lm = prepared[i]
            pv, plm = random_crop_patch(v, lm, cfg.patch, rng)
            pv, plm = apply_policy(pv, plm, cfg.policy, rng)
            batch.append((pv, plm))
        ctx = f"{epoch_tag}, step {start // batch_size}"
        losses.append(_train_batch(model, adam, batch, cfg, lr, ctx))
    return float(np.mean(losses))


def validation_loss(model: ModelParams, prepared_val, cfg: TrainConfig) -> float:
    """Mean deep-supervision loss over full prepared volumes, no augmentation."""
    from .preprocess import pad_to_multiple

    model.eval()
    try:
        losses = []
        for v, lm in prepared_val:
            padded, rec = pad_to_multiple(v, 8)
            lab = np.zeros(padded.spatial_dims, dtype=np.uint8)
            z, y, x = lm.spatial_dims
            lab[:z, :y, :x] = lm.labels
            target = _target_stack(LabelMap.from_array(lab))[None]
            main, aux = forward(model, Tensor(padded.data[None]))
            losses.append(float(total_loss(main, aux, target, cfg.dice).data))
        return float(np.mean(losses))
    finally:
        model.train()


def train_pipeline_A(
    cases, cfg: TrainConfig, schedule: ScheduleA
) -> tuple[ModelParams, dict]:
    """Flat/cosine phase, then cyclic snapshot averaging; returns the mean model."""
    if not cases:
        raise ValueError("pipeline A needs a non-empty training set")
    rng = np.random.default_rng(cfg.seed)
    prepared = _prepare(cases, cfg.preproc_mode)
    model = build_model(cfg.arch, rng)
    adam = AdamState.init(model.tensors)
    manifest = {
        "pipeline": "A",
        "seed": cfg.seed,
        "epochs": [],
        "snapshot_epochs": [],
        "swa_snapshots": 0,
        "adam_reset_at_swa": True,
    }
    for epoch in range(schedule.epochs_total):
        lr = cosine_lr(epoch, schedule)
        loss = _epoch(model, adam, prepared, cfg, lr, rng, 1, f"phase 1 epoch {epoch}")
        manifest["epochs"].append({"epoch": epoch, "lr": lr, "train_loss": loss})

    # fresh optimizer state for the averaging phase
    adam = AdamState.init(model.tensors)
    swa = SWAState()
    epoch_global = schedule.epochs_total
    for cycle in range(schedule.swa.cycles):
        for e in range(schedule.swa.cycle_epochs):
            lr = swa_cycle_lr(e, schedule.swa)
            loss = _epoch(
                model, adam, prepared, cfg, lr, rng, 1, f"SWA cycle {cycle} epoch {e}"
            )
            manifest["epochs"].append({"epoch": epoch_global, "lr": lr, "train_loss": loss})
            if (e + 1) % schedule.swa.snapshot_every == 0:
                swa_update(swa, model.state_dict())
                manifest["snapshot_epochs"].append(epoch_global)
            epoch_global += 1
    manifest["swa_snapshots"] = swa.count
    model.load_state(swa.params())
    return model, manifest


def train_pipeline_B(
    train_cases, val_cases, cfg: TrainConfig, schedule: ScheduleB
) -> tuple[ModelParams, dict]:
    """Batch-3 cosine training; keeps the lowest-validation-loss checkpoint."""
    if not train_cases:
        raise ValueError("pipeline B needs a non-empty training set")
    if not val_cases:
        raise ValueError("pipeline B needs a non-empty validation set")
    rng = np.random.default_rng(cfg.seed)
    prepared = _prepare(train_cases, cfg.preproc_mode)
    prepared_val = _prepare(val_cases, cfg.preproc_mode)
    model = build_model(cfg.arch, rng)
    adam = AdamState.init(model.tensors)
    manifest = {"pipeline": "B", "seed": cfg.seed, "epochs": [], "selected_epoch": None}
    best_loss = math.inf
    best_epoch = None
    best_state = None
    for epoch in range(schedule.epochs_max):
        lr = schedule.lr_at(epoch)
        loss = _epoch(model, adam, prepared, cfg, lr, rng, schedule.batch, f"epoch {epoch}")
        val = validation_loss(model, prepared_val, cfg)
        if not math.isfinite(val):
            raise TrainError(f"non-finite validation loss at epoch {epoch}")
        manifest["epochs"].append({"epoch": epoch, "lr": lr, "train_loss": loss, "val_loss": val})
        if val < best_loss:  # ties keep the earlier epoch
            best_loss = val
            best_epoch = epoch
            best_state = {n: a.copy() for n, a in model.state_dict().items()}
    manifest["selected_epoch"] = best_epoch
    manifest["selected_val_loss"] = best_loss
    model.load_state(best_state)
    return model, manifest
