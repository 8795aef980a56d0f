"""Masked Adam training, the prune-and-rewind loop, one-shot baselines, evaluation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .data import ImagePair, augment_flip, crop_patch, stack
from .model import MicroPromptNet, init_params, loss_and_grads, predict
from .pruning import (
    PruneConfig,
    SparsityMask,
    apply_mask,
    prune_step_global,
    prune_step_layerwise,
    prune_to_fraction,
    rewind,
    sparsity,
)
from .schedule import ScheduleConfig, cosine_decay, lr_at
from .store import NamedTensorStore


@dataclass
class TrainConfig:
    epochs: int = 120
    warmup: int = 15
    batch_size: int = 8
    eta_start: float = 1e-6
    eta_base: float = 2e-4
    eta_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patch: int = 64
    clamp_eval: bool = True
    finetune_fraction: float = 0.05

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patch % 8:
            raise ValueError(f"patch size {self.patch} must be divisible by 8")
        self.schedule()

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.eta_start, self.eta_base, self.eta_min, self.epochs, self.warmup)

    def finetune_epochs(self) -> int:
        return math.ceil(round(self.finetune_fraction * self.epochs, 9))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, store: NamedTensorStore) -> "AdamState":
        return cls({n: np.zeros_like(a) for n, a in store.items()},
                   {n: np.zeros_like(a) for n, a in store.items()})


@dataclass
class EvalRecord:
    psnr: float
    ssim: float
    epoch_of_best_validation: int
    params_surviving: int

    def to_dict(self) -> dict:
        return asdict(self)


def adam_step(theta: NamedTensorStore, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              mask: SparsityMask | None = None, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place.

    Gradients of masked entries are zeroed before the moment update and the
    mask is re-applied to the weights afterwards, so pruned entries stay
    exactly 0 and their moments never leave 0.
    """
    for n, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {n!r}; aborting run")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for n, w in theta.items():
        g = grads[n]
        keep = mask.bits.get(n) if mask is not None else None
        if keep is not None:
            g = np.where(keep, g, np.zeros((), dtype=g.dtype))
        m, v = state.m[n], state.v[n]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        w -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        if keep is not None:
            w[~keep] = 0


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    val_psnrs: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        trace = self.val_losses or self.losses
        return int(np.argmin(trace)) if trace else -1


def _sample_rng(seed: int, round_index: int, epoch: int, pos: int, aug_seed: int):
    return np.random.default_rng(np.random.SeedSequence(
        [int(seed) % (1 << 63), round_index, epoch, pos, int(aug_seed) % (1 << 63)]))


def make_batch(pairs: Sequence[ImagePair], idx: Sequence[int], patch: int, seed: int,
               round_index: int, epoch: int) -> tuple[np.ndarray, np.ndarray]:
    out = []
    for i in idx:
        rng = _sample_rng(seed, round_index, epoch, int(i), pairs[i].aug_seed)
        p, _ = crop_patch(pairs[i], patch, rng)
        out.append(augment_flip(p, rng))
    return stack(out)


def _predict_full(net: MicroPromptNet, images: np.ndarray, clamp: bool) -> np.ndarray:
    # reflect-pad to a multiple of 8, then crop back
    h, w = images.shape[1:3]
    ph, pw = (-h) % 8, (-w) % 8
    if ph or pw:
        images = np.pad(images, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="reflect")
    return predict(net, images, clamp=clamp)[:, :h, :w]


def predict_pairs(net: MicroPromptNet, pairs: Sequence[ImagePair], clamp: bool = True,
                  chunk: int = 32) -> list[np.ndarray]:
    outs: list[np.ndarray | None] = [None] * len(pairs)
    groups: dict[tuple, list[int]] = {}
    for i, p in enumerate(pairs):
        groups.setdefault(p.degraded.shape, []).append(i)
    for idx in groups.values():
        for s in range(0, len(idx), chunk):
            part = idx[s: s + chunk]
            res = _predict_full(net, np.stack([pairs[i].degraded for i in part]), clamp)
            for i, r in zip(part, res):
                outs[i] = r
    return outs  # type: ignore[return-value]


def _validate(net, val_pairs, clamp: bool) -> tuple[float, float]:
    raw = predict_pairs(net, val_pairs, clamp=False)
    l1 = float(np.mean([np.mean(np.abs(r.astype(np.float64) - p.clean)) for r, p in zip(raw, val_pairs)]))
    shown = [np.clip(r, 0, 1) if clamp else r for r in raw]
    ps = float(np.mean([metrics.psnr(r, p.clean) for r, p in zip(shown, val_pairs)]))
    return l1, ps


def train_epochs(net: MicroPromptNet, train_pairs: Sequence[ImagePair], mask: SparsityMask,
                 cfg: TrainConfig, val_pairs: Sequence[ImagePair] = (), round_index: int = 0,
                 epochs: int | None = None, lr_fn: Callable[[int], float] | None = None,
                 on_step: Callable[[NamedTensorStore, SparsityMask, int], None] | None = None,
                 on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``net`` in place with masked Adam; fresh optimizer state each call."""
    if not train_pairs:
        raise ValueError("training set is empty")
    n_epochs = cfg.epochs if epochs is None else epochs
    sched = cfg.schedule()
    lr_fn = lr_fn or (lambda t: lr_at(t, sched))
    B = cfg.batch_size
    steps = len(train_pairs) // B
    if steps < 1:
        raise ValueError(f"batch size {B} exceeds training set size {len(train_pairs)}")
    state = AdamState.zeros(net.params)
    result = TrainResult()
    survivors = mask.survivors()
    global_step = 0
    for epoch in range(n_epochs):
        lr = lr_fn(epoch)
        perm = np.random.default_rng(np.random.SeedSequence(
            [int(cfg.seed) % (1 << 63), round_index, epoch, 0x5EED])).permutation(len(train_pairs))
        total = 0.0
        for step in range(steps):
            idx = perm[step * B: (step + 1) * B]
            x, y = make_batch(train_pairs, idx, cfg.patch, cfg.seed, round_index, epoch)
            loss, grads = loss_and_grads(net, x, y)
            adam_step(net.params, grads, state, lr, mask, cfg.beta1, cfg.beta2, cfg.eps)
            total += loss
            global_step += 1
            if on_step is not None:
                on_step(net.params, mask, global_step)
        result.losses.append(total / steps)
        result.lrs.append(lr)
        if val_pairs:
            vl, vp = _validate(net, val_pairs, cfg.clamp_eval)
            result.val_losses.append(vl)
            result.val_psnrs.append(vp)
        if on_epoch is not None:
            on_epoch({
                "round": round_index, "epoch": epoch, "loss": result.losses[-1],
                "val_loss": result.val_losses[-1] if val_pairs else None,
                "val_psnr": result.val_psnrs[-1] if val_pairs else None,
                "surviving_params": survivors, "sparsity": sparsity(mask), "lr": lr,
            })
    return result


def evaluate(net: MicroPromptNet, test_pairs: Sequence[ImagePair], mask: SparsityMask | None,
             clamp: bool = True, best_epoch: int = -1) -> EvalRecord:
    """Mean PSNR / SSIM over full test images (outputs clamped to [0, 1])."""
    outs = predict_pairs(net, test_pairs, clamp=clamp)
    ps = [metrics.psnr(o, p.clean) for o, p in zip(outs, test_pairs)]
    ss = [metrics.ssim(o, p.clean) for o, p in zip(outs, test_pairs)]
    surv = mask.survivors() if mask is not None else net.params.prunable_count()
    return EvalRecord(float(np.mean(ps)) if ps else float("nan"),
                      float(np.mean(ss)) if ss else float("nan"), best_epoch, surv)


def degraded_baseline(test_pairs: Sequence[ImagePair]) -> EvalRecord:
    """Metrics of the degraded inputs themselves (no restoration)."""
    ps = [metrics.psnr(p.degraded, p.clean) for p in test_pairs]
    ss = [metrics.ssim(p.degraded, p.clean) for p in test_pairs]
    return EvalRecord(float(np.mean(ps)), float(np.mean(ss)), -1, 0)


# iterative pruning --------------------------------------------------------------

@dataclass
class DataBundle:
    train: list[ImagePair]
    val: list[ImagePair]
    test: dict[str, list[ImagePair]]


@dataclass
class RunCheckpoint:
    theta0: NamedTensorStore
    theta: NamedTensorStore
    mask: SparsityMask
    round: int
    seeds: dict[str, int]
    config_digest: str
    record: dict | None = None


def prune_step(theta: NamedTensorStore, mask: SparsityMask, cfg: PruneConfig) -> SparsityMask:
    if cfg.scope == "global":
        return prune_step_global(theta, mask, cfg.rate)
    return prune_step_layerwise(theta, mask, cfg.rate, cfg.output_layer_factor)


def evaluate_tasks(net, test: dict[str, list[ImagePair]], mask, clamp, best_epoch) -> dict[str, EvalRecord]:
    return {task: evaluate(net, pairs, mask, clamp, best_epoch) for task, pairs in sorted(test.items())}


def round_record(round_index: int, net: MicroPromptNet, mask: SparsityMask,
                 per_task: dict[str, EvalRecord], best_epoch: int) -> dict:
    store = net.params
    nonprunable = store.total_count() - store.prunable_count()
    surv = mask.survivors()
    return {
        "round": round_index,
        "surviving_prunable": surv,
        "prunable_params": store.prunable_count(),
        "surviving_params": surv + nonprunable,
        "total_params": store.total_count(),
        "sparsity": sparsity(mask),
        "total_sparsity": 1.0 - (surv + nonprunable) / store.total_count(),
        "epoch_of_best_validation": best_epoch,
        "psnr": float(np.mean([r.psnr for r in per_task.values()])),
        "ssim": float(np.mean([r.ssim for r in per_task.values()])),
        "tasks": {t: {"psnr": r.psnr, "ssim": r.ssim} for t, r in per_task.items()},
    }


@dataclass
class LTHResult:
    checkpoints: list[RunCheckpoint]
    records: list[dict]


def lth_run(model_cfg, prune_cfg: PruneConfig, train_cfg: TrainConfig, data: DataBundle,
            digest: str = "", resume: RunCheckpoint | None = None,
            on_round: Callable[[RunCheckpoint], None] | None = None,
            on_step: Callable[[NamedTensorStore, SparsityMask, int], None] | None = None,
            on_epoch: Callable[[dict], None] | None = None,
            on_round_start: Callable[[int, NamedTensorStore, NamedTensorStore, SparsityMask], None] | None = None,
            ) -> LTHResult:
    """Train dense, then prune / rewind / retrain until the target sparsity or round cap.

    Round 0 trains the dense net from theta0.  Every later round prunes the
    previous round's trained weights, rewinds survivors to theta0 and retrains
    with fresh Adam state and a restarted schedule.  ``resume`` continues after
    the round stored in the given checkpoint.
    """
    seeds = {"init": int(train_cfg.seed), "train": int(train_cfg.seed)}
    checkpoints: list[RunCheckpoint] = []
    records: list[dict] = []
    if resume is None:
        theta0 = init_params(model_cfg, train_cfg.seed).params
        mask = SparsityMask.ones(theta0)
        round_index = 0
        theta = None
    else:
        theta0, mask, theta = resume.theta0, resume.mask, resume.theta
        round_index = resume.round + 1

    while True:
        if round_index > 0:
            if round_index > prune_cfg.max_rounds or sparsity(mask) >= prune_cfg.target_sparsity:
                break
            mask = prune_step(theta, mask, prune_cfg)
        net = MicroPromptNet(model_cfg, rewind(theta0, mask))
        if on_round_start is not None:
            on_round_start(round_index, net.params, theta0, mask)
        res = train_epochs(net, data.train, mask, train_cfg, data.val, round_index,
                           on_step=on_step, on_epoch=on_epoch)
        per_task = evaluate_tasks(net, data.test, mask, train_cfg.clamp_eval, res.best_epoch)
        rec = round_record(round_index, net, mask, per_task, res.best_epoch)
        ckpt = RunCheckpoint(theta0, net.params, mask, round_index, seeds, digest, rec)
        checkpoints.append(ckpt)
        records.append(rec)
        if on_round is not None:
            on_round(ckpt)
        theta = net.params
        round_index += 1
    return LTHResult(checkpoints, records)


def oneshot_run(net_trained: MicroPromptNet, kind: str, fraction: float, cfg: TrainConfig,
                data: DataBundle, seed: int | None = None,
                on_step: Callable | None = None) -> tuple[MicroPromptNet, SparsityMask, dict[str, EvalRecord]]:
    """Prune ``fraction`` of the trained weights once, fine-tune ``ceil(5% of epochs)``, evaluate.

    ``kind`` is 'magnitude' (global smallest-|w|) or 'random'.  Fine-tuning
    keeps the pruned weights (no rewind) and anneals from ``eta_base`` to
    ``eta_min`` with a cosine over the fine-tune epochs.
    """
    seed = cfg.seed if seed is None else seed
    full = SparsityMask.ones(net_trained.params)
    mask = prune_to_fraction(net_trained.params, full, fraction, kind, seed)
    net = MicroPromptNet(net_trained.config, apply_mask(net_trained.params, mask))
    n_ft = cfg.finetune_epochs()
    res = train_epochs(net, data.train, mask, cfg, data.val, round_index=10_000 + n_ft, epochs=n_ft,
                       lr_fn=lambda t: cosine_decay(t, n_ft, cfg.eta_base, cfg.eta_min),
                       on_step=on_step)
    return net, mask, evaluate_tasks(net, data.test, mask, cfg.clamp_eval, res.best_epoch)


def params_after_rounds(n: int, p: float, k: int) -> int:
    """Survivors of ``k`` exact-count rounds at rate ``p`` starting from ``n``."""
    s = n
    for _ in range(k):
        s -= math.floor(p * s)
    return s


__all__ = [
    "TrainConfig", "AdamState", "EvalRecord", "adam_step", "train_epochs", "evaluate",
    "DataBundle", "RunCheckpoint", "lth_run", "oneshot_run",
]
