"""Training loops, plateau schedule, checkpointing and metrics.

Both networks train with Adam under a reduce-on-plateau learning-rate
schedule that watches validation loss. Every stochastic choice (shuffle
order, dropout masks, label shuffling) comes from a child RNG derived from
(seed, purpose, epoch), so an interrupted run resumed from its last
checkpoint replays the remaining epochs exactly.
"""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .dataset import load_pair_grids, load_transfer_grids, manifest_records
from .dsp import MODEL_FRAMES, StftConfig
from .errors import ConfigError, DataError, NumericError
from .evaluator import EvaluatorHyper, EvaluatorModel, save_evaluator
from .fileio import read_json
from .seeding import child_rng
from .tensor_nn import (
    Adam,
    Tensor,
    backward,
    clip_global_norm,
    cross_entropy,
    load_checkpoint,
    max_over_axis,
    mul,
    no_grad,
    tabs,
    tmean,
    tsum,
    zero_grads,
)
from .transfer_model import TransferHyper, TransferModel, apply_params, save_transfer_model

LOSS_KINDS = ("minmax", "mae", "mse")
METRICS_NAME = "metrics.csv"
LAST_NAME = "last.ckpt"
BEST_NAME = "best.ckpt"


@dataclass
class TrainConfig:
    seed: int
    dataset: str
    checkpoint_dir: str
    batch_size: int = 8
    epochs: int = 100
    lr_init: float = 2e-4
    lr_floor: float = 1e-6
    plateau_patience: int = 3
    plateau_factor: float = 0.5
    min_delta: float = 1e-4
    loss_kind: str = "minmax"
    dropout: float = 0.1
    clip_norm: float = 5.0
    overfit: int = 0  # >0: train AND validate on the first N train examples
    shuffle_labels: bool = False  # null-control: detach train labels from pairs

    @classmethod
    def from_json(cls, path):
        raw = read_json(path)
        if not isinstance(raw, dict):
            raise ConfigError({"<root>": "config must be a JSON object"})
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw):
        spec = {
            "seed": (int, lambda v: v >= 0, "must be a non-negative integer"),
            "dataset": (str, lambda v: bool(v), "must be a non-empty path"),
            "checkpoint_dir": (str, lambda v: bool(v), "must be a non-empty path"),
            "batch_size": (int, lambda v: v >= 1, "must be >= 1"),
            "epochs": (int, lambda v: v >= 1, "must be >= 1"),
            "lr_init": (float, lambda v: v > 0, "must be > 0"),
            "lr_floor": (float, lambda v: v > 0, "must be > 0"),
            "plateau_patience": (int, lambda v: v >= 1, "must be >= 1"),
            "plateau_factor": (float, lambda v: 0 < v < 1, "must be in (0, 1)"),
            "min_delta": (float, lambda v: v >= 0, "must be >= 0"),
            "loss_kind": (str, lambda v: v in LOSS_KINDS, f"must be one of {LOSS_KINDS}"),
            "dropout": (float, lambda v: 0 <= v < 1, "must be in [0, 1)"),
            "clip_norm": (float, lambda v: v > 0, "must be > 0"),
            "overfit": (int, lambda v: v >= 0, "must be >= 0"),
            "shuffle_labels": (bool, lambda v: True, ""),
        }
        errors = {}
        kwargs = {}
        for key in raw:
            if key not in spec:
                errors[key] = "unknown field"
        for name, (typ, check, message) in spec.items():
            if name not in raw:
                if name in ("seed", "dataset", "checkpoint_dir"):
                    errors[name] = "required field missing"
                continue
            value = raw[name]
            if typ is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if not isinstance(value, typ) or isinstance(value, bool) != (typ is bool):
                errors[name] = f"expected {typ.__name__}, got {type(value).__name__}"
                continue
            if not check(value):
                errors[name] = message
                continue
            kwargs[name] = value
        if not errors and kwargs.get("lr_floor", 1e-6) > kwargs.get("lr_init", 2e-4):
            errors["lr_floor"] = "must not exceed lr_init"
        if errors:
            raise ConfigError(errors)
        return cls(**kwargs)


class PlateauScheduler:
    """Halve the lr after `patience` epochs without validation improvement.

    Comparisons run in float32 so a checkpointed scheduler resumes with
    exactly the state an uninterrupted run would have had.
    """

    def __init__(self, lr_init, factor, patience, floor, min_delta):
        self.lr = float(np.float32(lr_init))
        self.factor = factor
        self.patience = patience
        self.floor = floor
        self.min_delta = min_delta
        self.best = math.inf
        self.bad = 0

    def update(self, value):
        value = float(np.float32(value))
        if value < self.best - self.min_delta:
            self.best = value
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr = float(np.float32(max(self.lr * self.factor, self.floor)))
                self.bad = 0
        return self.lr

    def state_arrays(self):
        return {
            "sched.lr": np.float32(self.lr),
            "sched.best": np.float32(self.best),
            "sched.bad": np.float32(self.bad),
        }

    def load_state_arrays(self, state):
        self.lr = float(state["sched.lr"])
        self.best = float(state["sched.best"])
        self.bad = int(state["sched.bad"])


def loss_dispatch(kind, target, predicted):
    """Scalar loss over (..., frames, bins) token Tensors; batch-mean reduced."""
    if target.data.shape != predicted.data.shape:
        raise ValueError(f"shape mismatch: target {target.data.shape} vs predicted {predicted.data.shape}")
    diff = predicted - target
    if kind == "minmax":
        per_frame = max_over_axis(tabs(diff), axis=-1)
        per_example = tsum(per_frame, axis=-1)
        return tmean(per_example) if per_example.ndim else per_example
    if kind == "mae":
        return tmean(tabs(diff))
    if kind == "mse":
        return tmean(mul(diff, diff))
    raise ValueError(f"unknown loss kind {kind!r}")


@dataclass
class TrainResult:
    epochs_run: int
    train_losses: list
    val_losses: list
    lrs: list
    grad_norms: list = field(default_factory=list)
    val_accuracies: list = field(default_factory=list)
    best_val: float = math.inf
    best_path: str = ""
    last_path: str = ""
    metrics_path: str = ""


def _dataset_stft(header):
    cfg = StftConfig(
        fft_size=header["fft_size"],
        hop=header["hop"],
        sample_rate=header["sample_rate"],
        log_floor=header.get("log_floor", StftConfig().log_floor),
    )
    if header["frames"] != MODEL_FRAMES:
        raise DataError(f"dataset frames {header['frames']} != model frames {MODEL_FRAMES}")
    return cfg


def _metrics_writer(path, fresh):
    exists = os.path.exists(path)
    fh = open(path, "w" if fresh else "a", newline="")
    writer = csv.writer(fh, lineterminator="\n")
    if fresh or not exists:
        writer.writerow(["epoch", "split", "loss", "lr", "accuracy"])
    return fh, writer


def _stack_transfer(dataset_dir, records):
    ins, conds, tgts = [], [], []
    for rec in records:
        gi, gc, gt = load_transfer_grids(dataset_dir, rec)
        ins.append(gi)
        conds.append(gc)
        tgts.append(gt)
    to32 = lambda grids: np.stack(grids).astype(np.float32)
    return to32(ins), to32(conds), to32(tgts)


def _check_finite_loss(value, what, epoch, step, lr):
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what} loss {value!r} at epoch {epoch}, step {step}, lr {lr:g}")


def _split_records(cfg, kind):
    _, records = manifest_records(cfg.dataset, kind=kind)
    train = [r for r in records if r["split"] == "train"]
    val = [r for r in records if r["split"] == "val"]
    if cfg.overfit:
        train = train[: cfg.overfit]
        val = list(train)
    if not train or not val:
        raise DataError(f"dataset {cfg.dataset} has no {kind} examples for train/val")
    return train, val


def _transfer_val_loss(model, cfg, val_recs):
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(val_recs), cfg.batch_size):
            chunk = val_recs[start : start + cfg.batch_size]
            ins, conds, tgts = _stack_transfer(cfg.dataset, chunk)
            residual = model.forward_batch(ins, conds)
            pred = Tensor(ins.transpose(0, 2, 1)) + residual
            loss = loss_dispatch(cfg.loss_kind, Tensor(tgts.transpose(0, 2, 1)), pred)
            total += float(loss.data) * len(chunk)
            count += len(chunk)
    return total / count


def train_transfer(cfg, resume=False, progress=None):
    """Train the transfer network; returns a TrainResult, writes checkpoints/metrics."""
    header, _ = manifest_records(cfg.dataset, kind=None)
    stft_cfg = _dataset_stft(header)
    train_recs, val_recs = _split_records(cfg, "transfer")
    hyper = TransferHyper(dropout=cfg.dropout, seed=cfg.seed)
    if stft_cfg.bins != hyper.model_dim:
        raise DataError(f"dataset bins {stft_cfg.bins} != model dim {hyper.model_dim}")
    model = TransferModel(hyper, stft_cfg)
    params = model.named_params()
    opt = Adam(params, cfg.lr_init)
    sched = PlateauScheduler(cfg.lr_init, cfg.plateau_factor, cfg.plateau_patience, cfg.lr_floor, cfg.min_delta)

    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    last_path = os.path.join(cfg.checkpoint_dir, LAST_NAME)
    best_path = os.path.join(cfg.checkpoint_dir, BEST_NAME)
    metrics_path = os.path.join(cfg.checkpoint_dir, METRICS_NAME)

    start_epoch = 1
    best_val = math.inf
    if resume:
        if not os.path.exists(last_path):
            raise DataError(f"cannot resume: {last_path} does not exist")
        loaded_params, state = load_checkpoint(last_path)
        apply_params(params, loaded_params, last_path)
        opt.load_state_arrays(state)
        sched.load_state_arrays(state)
        start_epoch = int(state["train.epoch"]) + 1
        best_val = float(state["train.best_val"])

    result = TrainResult(0, [], [], [], metrics_path=metrics_path, best_path=best_path, last_path=last_path)
    fh, writer = _metrics_writer(metrics_path, fresh=not resume)
    try:
        for epoch in range(start_epoch, cfg.epochs + 1):
            perm = child_rng(cfg.seed, "shuffle", epoch).permutation(len(train_recs))
            drop_rng = child_rng(cfg.seed, "dropout", epoch)
            lr_used = sched.lr
            opt.lr = lr_used
            loss_sum, seen = 0.0, 0
            for step, start in enumerate(range(0, len(perm), cfg.batch_size)):
                chunk = [train_recs[i] for i in perm[start : start + cfg.batch_size]]
                ins, conds, tgts = _stack_transfer(cfg.dataset, chunk)
                residual = model.forward_batch(ins, conds, rng=drop_rng, train=True)
                pred = Tensor(ins.transpose(0, 2, 1)) + residual
                loss = loss_dispatch(cfg.loss_kind, Tensor(tgts.transpose(0, 2, 1)), pred)
                lval = float(loss.data)
                _check_finite_loss(lval, "train", epoch, step, lr_used)
                zero_grads(params.values())
                backward(loss, params.values())
                gnorm = clip_global_norm(params, cfg.clip_norm)
                if not np.isfinite(gnorm):
                    raise NumericError(f"non-finite gradient norm at epoch {epoch}, step {step}")
                result.grad_norms.append(gnorm)
                opt.step()
                loss_sum += lval * len(chunk)
                seen += len(chunk)
            train_loss = loss_sum / seen
            val_loss = _transfer_val_loss(model, cfg, val_recs)
            _check_finite_loss(val_loss, "validation", epoch, -1, lr_used)

            result.epochs_run = epoch
            result.train_losses.append(train_loss)
            result.val_losses.append(val_loss)
            result.lrs.append(lr_used)
            writer.writerow([epoch, "train", repr(train_loss), repr(lr_used), ""])
            writer.writerow([epoch, "val", repr(val_loss), repr(lr_used), ""])
            fh.flush()

            val32 = float(np.float32(val_loss))
            if val32 < best_val:
                best_val = val32
            sched.update(val_loss)
            state = {
                **opt.state_arrays(),
                **sched.state_arrays(),
                "train.epoch": np.float32(epoch),
                "train.best_val": np.float32(best_val),
            }
            save_transfer_model(model, last_path, state)
            if val32 == best_val:
                save_transfer_model(model, best_path, state)
            if progress is not None:
                progress(f"epoch {epoch}/{cfg.epochs} train {train_loss:.4f} val {val_loss:.4f} lr {lr_used:g}")
    finally:
        fh.close()
    result.best_val = best_val
    return result


def _pair_batch(cfg, records, label_of):
    a, b, labels = [], [], []
    for rec in records:
        ga, gb = load_pair_grids(cfg.dataset, rec)
        a.append(ga)
        b.append(gb)
        labels.append(label_of(rec))
    return np.stack(a).astype(np.float32), np.stack(b).astype(np.float32), np.asarray(labels, dtype=np.int64)


def _evaluator_val(model, cfg, val_recs, label_of):
    total, correct, count = 0.0, 0, 0
    with no_grad():
        for start in range(0, len(val_recs), cfg.batch_size):
            chunk = val_recs[start : start + cfg.batch_size]
            g1, g2, labels = _pair_batch(cfg, chunk, label_of)
            logits = model.logits_batch(g1, g2)
            loss = cross_entropy(logits, labels)
            total += float(loss.data) * len(chunk)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            count += len(chunk)
    return total / count, correct / count


def train_evaluator(cfg, resume=False, progress=None):
    """Train the siamese scorer with cross-entropy; tracks held-out accuracy."""
    header, _ = manifest_records(cfg.dataset, kind=None)
    stft_cfg = _dataset_stft(header)
    train_recs, val_recs = _split_records(cfg, "pair")

    if cfg.shuffle_labels:
        fake = child_rng(cfg.seed, "labelshuffle").permutation([r["label"] for r in train_recs])
        train_label_of = {id(r): int(fake[i]) for i, r in enumerate(train_recs)}
        label_of_train = lambda rec: train_label_of[id(rec)]
    else:
        label_of_train = lambda rec: rec["label"]
    label_of_val = lambda rec: rec["label"]

    model = EvaluatorModel(EvaluatorHyper(dropout=cfg.dropout, seed=cfg.seed), stft_cfg)
    params = model.named_params()
    opt = Adam(params, cfg.lr_init)
    sched = PlateauScheduler(cfg.lr_init, cfg.plateau_factor, cfg.plateau_patience, cfg.lr_floor, cfg.min_delta)

    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    last_path = os.path.join(cfg.checkpoint_dir, LAST_NAME)
    best_path = os.path.join(cfg.checkpoint_dir, BEST_NAME)
    metrics_path = os.path.join(cfg.checkpoint_dir, METRICS_NAME)

    start_epoch = 1
    best_val = math.inf
    if resume:
        if not os.path.exists(last_path):
            raise DataError(f"cannot resume: {last_path} does not exist")
        loaded_params, state = load_checkpoint(last_path)
        apply_params(params, loaded_params, last_path)
        opt.load_state_arrays(state)
        sched.load_state_arrays(state)
        start_epoch = int(state["train.epoch"]) + 1
        best_val = float(state["train.best_val"])

    result = TrainResult(0, [], [], [], metrics_path=metrics_path, best_path=best_path, last_path=last_path)
    fh, writer = _metrics_writer(metrics_path, fresh=not resume)
    try:
        for epoch in range(start_epoch, cfg.epochs + 1):
            perm = child_rng(cfg.seed, "shuffle", epoch).permutation(len(train_recs))
            drop_rng = child_rng(cfg.seed, "dropout", epoch)
            lr_used = sched.lr
            opt.lr = lr_used
            loss_sum, seen, correct = 0.0, 0, 0
            for step, start in enumerate(range(0, len(perm), cfg.batch_size)):
                chunk = [train_recs[i] for i in perm[start : start + cfg.batch_size]]
                g1, g2, labels = _pair_batch(cfg, chunk, label_of_train)
                logits = model.logits_batch(g1, g2, rng=drop_rng, train=True)
                loss = cross_entropy(logits, labels)
                lval = float(loss.data)
                _check_finite_loss(lval, "train", epoch, step, lr_used)
                zero_grads(params.values())
                backward(loss, params.values())
                gnorm = clip_global_norm(params, cfg.clip_norm)
                if not np.isfinite(gnorm):
                    raise NumericError(f"non-finite gradient norm at epoch {epoch}, step {step}")
                result.grad_norms.append(gnorm)
                opt.step()
                loss_sum += lval * len(chunk)
                seen += len(chunk)
                correct += int((logits.data.argmax(axis=1) == labels).sum())
            train_loss = loss_sum / seen
            train_acc = correct / seen
            val_loss, val_acc = _evaluator_val(model, cfg, val_recs, label_of_val)
            _check_finite_loss(val_loss, "validation", epoch, -1, lr_used)

            result.epochs_run = epoch
            result.train_losses.append(train_loss)
            result.val_losses.append(val_loss)
            result.val_accuracies.append(val_acc)
            result.lrs.append(lr_used)
            writer.writerow([epoch, "train", repr(train_loss), repr(lr_used), repr(train_acc)])
            writer.writerow([epoch, "val", repr(val_loss), repr(lr_used), repr(val_acc)])
            fh.flush()

            val32 = float(np.float32(val_loss))
            if val32 < best_val:
                best_val = val32
            sched.update(val_loss)
            state = {
                **opt.state_arrays(),
                **sched.state_arrays(),
                "train.epoch": np.float32(epoch),
                "train.best_val": np.float32(best_val),
            }
            save_evaluator(model, last_path, state)
            if val32 == best_val:
                save_evaluator(model, best_path, state)
            if progress is not None:
                progress(
                    f"epoch {epoch}/{cfg.epochs} train {train_loss:.4f} val {val_loss:.4f} "
                    f"acc {val_acc:.3f} lr {lr_used:g}"
                )
    finally:
        fh.close()
    result.best_val = best_val
    return result
