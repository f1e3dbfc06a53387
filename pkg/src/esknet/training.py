"""Optimization loop: Adam with a halving-with-floor learning-rate schedule,
validation-loss early stopping, checkpointing, and the ablation runner.

Training is a deterministic function of (network spec, dataset, config,
seed): shuffles, the validation split, and per-sample augmentation seeds all
derive from the config seed, so repeated runs produce identical checkpoints
and logs.
"""

from __future__ import annotations

import hashlib
import io
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import network as N_
from . import tensor as T
from .data import AugmentConfig, DataError, DatasetIndex, SampleRecord, augment, resize
from .metrics import METRIC_NAMES, MetricsReport, evaluate_dataset
from .network import Checkpoint, NetworkParams, NetworkSpec
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_initial: float = 1e-3
    lr_halving_period: int = 10
    lr_floor: float = 1e-4
    epochs: int = 50
    batch_size: int = 12
    validation_fraction: float = 0.2
    early_stop_patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.lr_floor > self.lr_initial:
            raise ValueError("lr_floor must not exceed lr_initial")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Initial rate halved every period, clamped below by the floor."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return max(config.lr_floor,
               config.lr_initial * 0.5 ** (epoch // config.lr_halving_period))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0


def init_adam(params: Dict[str, Tensor]) -> AdamState:
    return AdamState(m={k: np.zeros_like(t.data) for k, t in params.items()},
                     v={k: np.zeros_like(t.data) for k, t in params.items()},
                     step=0)


def adam_step(params: Dict[str, Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update from the gradients currently stored on
    the parameter tensors (a missing gradient counts as zero)."""
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        if p.data.shape != state.m[name].shape:
            raise T.ShapeError(f"optimizer state for {name!r} has shape "
                               f"{state.m[name].shape}, parameter is {p.data.shape}")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def zero_gradients(params: Dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None

# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    rows: List[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    def to_text(self) -> str:
        lines = ["epoch\ttrain_loss\tval_loss\tlr\tseconds"]
        for r in self.rows:
            lines.append(f"{r.epoch}\t{r.train_loss:.9g}\t{r.val_loss:.9g}"
                         f"\t{r.lr:.9g}\t{r.seconds:.3f}")
        lines.append(f"# best_epoch={self.best_epoch} stop_reason={self.stop_reason}")
        return "\n".join(lines) + "\n"

    def loss_columns(self) -> str:
        """Loss columns only (wall time excluded), for determinism audits."""
        return "\n".join(f"{r.epoch}\t{r.train_loss:.9g}\t{r.val_loss:.9g}\t{r.lr:.9g}"
                         for r in self.rows)


def _fitted(record: SampleRecord, size: Tuple[int, int]) -> SampleRecord:
    if record.image.shape[1:] != tuple(size):
        return resize(record, size)
    return record


def _batches(count: int, batch_size: int):
    # The last incomplete batch is kept.
    for start in range(0, count, batch_size):
        yield range(start, min(start + batch_size, count))


def _mean_loss(spec: NetworkSpec, params: NetworkParams,
               records: Sequence[SampleRecord], batch_size: int) -> float:
    N_.set_mode(params, "eval")
    total = 0.0
    with T.no_grad():
        for batch in _batches(len(records), batch_size):
            imgs = np.stack([records[i].image for i in batch])
            masks = np.stack([records[i].mask for i in batch])
            outs = N_.forward(spec, params, Tensor(imgs))
            total += float(N_.total_loss(outs, masks).data)
    return total / max(1, (len(records) + batch_size - 1) // batch_size)


def _snapshot(params: NetworkParams) -> Dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in N_.named_state(params).items()}


def _restore(params: NetworkParams, snapshot: Dict[str, np.ndarray]) -> None:
    for name, t in N_.named_state(params).items():
        t.data = snapshot[name].copy()


def prepare_fold_data(net_spec: NetworkSpec, index: DatasetIndex, fold: int,
                      config: TrainConfig,
                      augment_config: Optional[AugmentConfig] = None
                      ) -> Tuple[List[SampleRecord], List[SampleRecord]]:
    """Split the training pool for one fold into (train, validation) records.

    The validation fraction is drawn from the original (pre-augmentation)
    training samples, and only the remaining originals are augmented, so
    validation never scores augmented copies of its own images. The training
    list holds the augmented variants when an augmentation config is given,
    otherwise the originals.
    """
    if not 0 <= fold < index.k:
        raise DataError(f"fold {fold} out of range for {index.k} folds")
    pool = sorted(index.train_ids(fold))
    if not pool:
        raise DataError("empty training pool")

    split_rng = np.random.default_rng([config.seed, fold, 1])
    order = split_rng.permutation(len(pool))
    n_val = max(1, round(len(pool) * config.validation_fraction)) if len(pool) > 1 else 0
    val_ids = sorted(pool[i] for i in order[:n_val])
    train_ids = sorted(pool[i] for i in order[n_val:])
    if not train_ids:
        raise DataError("validation split left no training samples")

    size = net_spec.input_size
    val_records = [_fitted(index.records[i], size) for i in val_ids]
    originals = [_fitted(index.records[i], size) for i in train_ids]
    if augment_config is not None:
        seed_rng = np.random.default_rng([config.seed, fold, 3])
        train_records: List[SampleRecord] = []
        for rec in originals:
            per_id_seed = int(seed_rng.integers(2 ** 31))
            train_records.extend(augment(rec, augment_config, per_id_seed))
    else:
        train_records = originals
    if not val_records:
        val_records = originals   # degenerate single-sample pool
    return train_records, val_records


def train(net_spec: NetworkSpec, index: DatasetIndex, fold: int, config: TrainConfig,
          augment_config: Optional[AugmentConfig] = None,
          progress=None) -> Tuple[Checkpoint, TrainLog]:
    """Train on every fold except ``fold`` and return the best-validation
    checkpoint plus the per-epoch log."""
    train_records, val_records = prepare_fold_data(net_spec, index, fold, config,
                                                   augment_config)

    params = N_.build(net_spec, config.seed)
    named = dict(N_.named_parameters(params))
    adam = init_adam(named)

    log = TrainLog()
    best_val = float("inf")
    best_snapshot = _snapshot(params)
    best_epoch = -1
    since_best = 0

    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = lr_schedule(epoch, config)
        epoch_rng = np.random.default_rng([config.seed, fold, 2, epoch])
        shuffled = epoch_rng.permutation(len(train_records))

        N_.set_mode(params, "train")
        batch_losses = []
        for batch in _batches(len(shuffled), config.batch_size):
            picks = [train_records[shuffled[i]] for i in batch]
            imgs = np.stack([r.image for r in picks])
            masks = np.stack([r.mask for r in picks])
            outs = N_.forward(net_spec, params, Tensor(imgs))
            loss = N_.total_loss(outs, masks)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}")
            zero_gradients(named)
            loss.backward()
            adam_step(named, adam, lr)
            batch_losses.append(value)

        train_loss = float(np.mean(batch_losses))
        val_loss = _mean_loss(net_spec, params, val_records, config.batch_size)
        log.rows.append(EpochStats(epoch, train_loss, val_loss, lr,
                                   time.perf_counter() - start))
        if progress is not None:
            progress(f"epoch {epoch}: train {train_loss:.5f} val {val_loss:.5f} lr {lr:.6g}")

        if val_loss < best_val:
            best_val = val_loss
            best_snapshot = _snapshot(params)
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                log.stop_reason = "early_stop"
                break
    else:
        log.stop_reason = "completed"

    log.best_epoch = best_epoch
    _restore(params, best_snapshot)
    checkpoint = Checkpoint(spec=net_spec, params=params, epoch=best_epoch,
                            seed=config.seed)
    return checkpoint, log


def predict_probability(spec: NetworkSpec, params: NetworkParams,
                        image: np.ndarray) -> np.ndarray:
    """Final-stage probability mask for one 1,H,W image, tape-free."""
    N_.set_mode(params, "eval")
    with T.no_grad():
        outs = N_.forward(spec, params, Tensor(image))
    return np.asarray(outs[-1].data)


def predict_all_stages(spec: NetworkSpec, params: NetworkParams,
                       image: np.ndarray) -> List[np.ndarray]:
    N_.set_mode(params, "eval")
    with T.no_grad():
        outs = N_.forward(spec, params, Tensor(image))
    return [np.asarray(o.data) for o in outs]


def fit_single_sample(net_spec: NetworkSpec, record: SampleRecord, steps: int,
                      config: Optional[TrainConfig] = None):
    """Overfit one sample for a fixed number of optimizer steps (smoke test)."""
    config = config or TrainConfig()
    record = _fitted(record, net_spec.input_size)
    params = N_.build(net_spec, config.seed)
    named = dict(N_.named_parameters(params))
    adam = init_adam(named)
    img = record.image[None]
    mask = record.mask[None]
    N_.set_mode(params, "train")
    for step in range(steps):
        outs = N_.forward(net_spec, params, Tensor(img))
        loss = N_.total_loss(outs, mask)
        if not np.isfinite(float(loss.data)):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        zero_gradients(named)
        loss.backward()
        adam_step(named, adam, lr_schedule(step // max(1, steps // config.epochs), config))
    return params


# ---------------------------------------------------------------------------
# ablation runner
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = (
    ("baseline", "plain", False),
    ("+sk", "sk", False),
    ("+esk", "esk", False),
    ("+esk+ds", "esk", True),
)


@dataclass
class VariantResult:
    name: str
    param_count: int
    image_count: int
    mean: Dict[str, float]
    std: Dict[str, float]
    manifest_sha256: str


@dataclass
class AblationReport:
    variants: List[VariantResult]

    def to_text(self) -> str:
        header = "variant\tparams\timages\t" + "\t".join(
            f"{m}_mean\t{m}_std" for m in METRIC_NAMES)
        lines = [header]
        for v in self.variants:
            cells = [v.name, str(v.param_count), str(v.image_count)]
            for m in METRIC_NAMES:
                cells.append(f"{v.mean[m]:.2f}")
                cells.append(f"{v.std[m]:.2f}")
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


def evaluate_fold(spec: NetworkSpec, params: NetworkParams, index: DatasetIndex,
                  fold: int, threshold: float = 0.5) -> MetricsReport:
    preds, gts = {}, {}
    for i in index.test_ids(fold):
        rec = _fitted(index.records[i], spec.input_size)
        preds[i] = predict_probability(spec, params, rec.image)
        gts[i] = rec.mask
    return evaluate_dataset(preds, gts, threshold=threshold)


def run_ablation(index: DatasetIndex, base_spec: NetworkSpec, config: TrainConfig,
                 augment_config: Optional[AugmentConfig] = None,
                 progress=None) -> AblationReport:
    """Train the four component variants under identical seeds and fold
    splits and aggregate the per-image held-out metrics across folds."""
    if index.k < 2:
        raise DataError("ablation needs at least 2 folds")
    manifest_hash = hashlib.sha256(index.manifest_text().encode()).hexdigest()

    results = []
    for name, kind, deep in ABLATION_VARIANTS:
        spec = replace(base_spec, block_kind=kind, deep_supervision=deep)
        rows = []
        for fold in range(index.k):
            if progress is not None:
                progress(f"[{name}] fold {fold}/{index.k}")
            checkpoint, _ = train(spec, index, fold, config, augment_config,
                                  progress=progress)
            report = evaluate_fold(spec, checkpoint.params, index, fold)
            rows.extend(report.rows)

        mean = {m: float(np.mean([getattr(r.values, m) for r in rows]))
                for m in METRIC_NAMES}
        std = {m: float(np.std([getattr(r.values, m) for r in rows]))
               for m in METRIC_NAMES}
        results.append(VariantResult(
            name=name, param_count=N_.count_params_flops(spec)[0],
            image_count=len(rows), mean=mean, std=std,
            manifest_sha256=manifest_hash))
    return AblationReport(variants=results)
