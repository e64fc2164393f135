"""Shared training protocol: standardization, Adam with cosine annealing, run logs."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import TimeSeriesDataset, pad_to_multiple
from .metrics import r2, rmse

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss or gradient became non-finite."""


@dataclass
class Standardizer:
    mean: np.ndarray  # per channel
    std: np.ndarray  # per channel
    y_mean: float

    @classmethod
    def fit(cls, train: TimeSeriesDataset) -> "Standardizer":
        if train.n == 0:
            raise ValueError("cannot fit a standardizer on an empty split")
        mean = train.x.mean(axis=(0, 2))
        std = train.x.std(axis=(0, 2))
        # round-off leaves ~1e-16 on constant channels; treat that as zero variance
        flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        # constant channels must map to exact zeros, so use the value itself as the mean
        mean = np.where(flat, train.x[0, :, 0], mean)
        std = np.where(flat, 1.0, std)
        y_mean = float(train.y.mean())
        if abs(y_mean) < 1e-9:
            raise ValueError("training targets have zero mean; unit-mean scaling is undefined")
        return cls(mean=mean, std=std, y_mean=y_mean)

    def transform_x(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[None, :, None]) / self.std[None, :, None]

    def inverse_x(self, x: np.ndarray) -> np.ndarray:
        return x * self.std[None, :, None] + self.mean[None, :, None]

    def transform_y(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y) / self.y_mean

    def inverse_y(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y) * self.y_mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "y_mean": self.y_mean}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float),
                   float(d["y_mean"]))


def fit_standardizer(train: TimeSeriesDataset) -> Standardizer:
    return Standardizer.fit(train)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch size >= 1 and lr > 0")


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """Half-cosine decay from ``lr0`` at step 0 to 0 at ``total``."""
    if total <= 0:
        return lr0
    step = min(max(step, 0), total)
    return max(0.0, 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total)))


class Adam:
    """Bias-corrected Adam over a name -> Tensor mapping."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient for {name!r} at step {self.t}")
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def adam_step(params: dict, state: Adam, lr: float) -> None:
    """Apply one update using the ``.grad`` already stored on each parameter."""
    state.step(lr)


def _batches(n: int, size: int, rng, shuffle: bool):
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, size):
        yield order[start:start + size]


@dataclass
class PreparedData:
    x: np.ndarray
    y: np.ndarray  # scaled targets
    y_raw: np.ndarray
    valid: int


def prepare(ds: TimeSeriesDataset, scaler: Standardizer) -> PreparedData:
    x, valid = pad_to_multiple(scaler.transform_x(ds.x), 8)
    return PreparedData(x=x, y=scaler.transform_y(ds.y), y_raw=ds.y, valid=valid)


def evaluate_regression(model, data: PreparedData, scaler: Standardizer) -> dict:
    pred = scaler.inverse_y(model.predict(data.x, valid=data.valid))
    out = {"rmse_raw": rmse(data.y_raw, pred)}
    out["r2"] = r2(data.y_raw, pred) if len(pred) >= 2 and np.ptp(data.y_raw) > 0 else float("nan")
    return out


def train(model, train_ds: TimeSeriesDataset, test_ds: TimeSeriesDataset | None,
          cfg: TrainConfig, *, scaler: Standardizer | None = None, log_path=None,
          checkpoint_path=None, progress: bool = False):
    """Fit ``model`` in place and return ``(model, runlog)``.

    ``model`` must expose ``params``, ``loss(x, y, rng, valid)`` returning
    ``(total, parts)``, ``predict(x, valid)`` and ``save(path, extra)``.
    The run log is a list of per-epoch dicts, also written as JSON lines to
    ``log_path`` when given.
    """
    scaler = scaler or Standardizer.fit(train_ds)
    tr = prepare(train_ds, scaler)
    te = prepare(test_ds, scaler) if test_ds is not None and test_ds.n else None
    if hasattr(model, "attach_scaler"):
        model.attach_scaler(scaler)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 202]))
    opt = Adam(model.params, cfg.beta1, cfg.beta2, cfg.eps)
    log: list[dict] = []
    extra = {"scaler": scaler.to_dict(), "train": asdict(cfg)}
    if log_path is not None:
        Path(log_path).write_text("")
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
        sums: dict[str, float] = {}
        seen = 0
        for idx in _batches(len(tr.x), cfg.batch_size, shuffle_rng, cfg.shuffle):
            for p in model.params.values():
                p.grad = None
            with ad.Tape() as tape:
                total, parts = model.loss(tr.x[idx], tr.y[idx], noise_rng, tr.valid)
            value = total.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}")
            tape.backward(total)
            opt.step(lr)
            k = len(idx)
            seen += k
            sums["train_loss"] = sums.get("train_loss", 0.0) + value * k
            for key, val in parts.items():
                sums[key] = sums.get(key, 0.0) + val * k
        rec = {"epoch": epoch + 1, "lr": lr}
        rec.update({key: val / max(seen, 1) for key, val in sums.items()})
        if te is not None:
            metrics = evaluate_regression(model, te, scaler)
            rec["test_rmse_raw"] = metrics["rmse_raw"]
            rec["test_r2"] = metrics["r2"]
        rec["wall_ms"] = round(1000 * (time.perf_counter() - t0), 3)
        log.append(rec)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        if checkpoint_path is not None:
            model.save(checkpoint_path, extra)
        if progress:
            logger.info("epoch %d %s", epoch + 1, {k: round(v, 5) for k, v in rec.items()})
    if checkpoint_path is not None and cfg.epochs == 0:
        model.save(checkpoint_path, extra)
    model.scaler = scaler
    return model, log


def read_runlog(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
