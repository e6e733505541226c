"""Training loop: SGD + polynomial LR, per-epoch CSV log, best-IoU checkpoint."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics as M
from . import network as N
from .data import Sample, augment
from .optim import SgdMomentum, poly_lr
from .tensor import NumericsError, Tensor

__all__ = ["TrainSettings", "TrainAbort", "train_one_seed", "format_float"]


class TrainAbort(RuntimeError):
    """Training hit a non-finite loss; carries (epoch, batch) context."""


@dataclass(frozen=True)
class TrainSettings:
    variant: str = "full"
    input_size: int = 64
    base_channels: int = 16
    stages: int = 4
    epochs: int = 60
    batch_size: int = 4
    lr_init: float = 0.05
    precision: str = "f32"
    augment: bool = True


def format_float(v: float) -> str:
    # shortest representation that round-trips, so logged values can be
    # compared exactly against their defining formulas
    return repr(float(v))


def _batches(n: int, batch_size: int):
    for i in range(0, n, batch_size):
        yield range(i, min(i + batch_size, n))


def train_one_seed(
    settings: TrainSettings,
    train_set: list[Sample],
    val_set: list[Sample],
    seed: int,
    out_dir: str | Path,
    log_cb=None,
) -> dict:
    """Train one model; returns a summary with best val IoU and artifact paths."""
    cfg = N.variant_from_table1(
        settings.variant,
        input_size=settings.input_size,
        base_channels=settings.base_channels,
        stages=settings.stages,
        precision=settings.precision,
    )
    params = N.build(cfg, rng_seed=seed)
    opt = SgdMomentum(params.parameters(), lr=settings.lr_init)
    dtype = cfg.dtype

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / f"ckpt_seed{seed}.spiro"
    log_path = out_dir / f"log_seed{seed}.csv"

    def eval_iou() -> float:
        _, mean, _ = M.evaluate_dataset(params, val_set)
        return mean["iou"]

    best_iou = -1.0
    best_state: dict[str, np.ndarray] | None = None
    log_lines = ["epoch,lr,train_loss,val_iou"]

    for epoch in range(settings.epochs):
        lr = poly_lr(settings.lr_init, epoch, settings.epochs)
        opt.lr = lr
        erng = np.random.default_rng([seed, 2, epoch])
        order = erng.permutation(len(train_set))
        losses = []
        for bi, idxs in enumerate(_batches(len(order), settings.batch_size)):
            batch = [train_set[order[i]] for i in idxs]
            if settings.augment:
                batch = [augment(s, erng) for s in batch]
            x = Tensor(np.stack([s.image for s in batch])[:, None].astype(dtype))
            y = np.stack([s.mask for s in batch])[:, None]
            opt.zero_grad()
            try:
                loss = N.loss_bce(N.forward(params, x, train=True), y)
                lv = float(loss.data)
                if not math.isfinite(lv):
                    raise NumericsError("non-finite loss")
                loss.backward()
            except NumericsError as exc:
                raise TrainAbort(f"{exc} at epoch {epoch}, batch {bi}") from exc
            opt.step()
            losses.append(lv)
        train_loss = float(np.mean(losses))
        val_iou = eval_iou()
        if val_iou > best_iou:
            best_iou = val_iou
            best_state = {
                **{f"param.{k}": t.data.copy() for k, t in params.named_parameters().items()},
                **{f"buffer.{k}": a.copy() for k, a in params.named_buffers().items()},
            }
        line = f"{epoch},{format_float(lr)},{format_float(train_loss)},{format_float(val_iou)}"
        log_lines.append(line)
        if log_cb:
            log_cb(epoch, lr, train_loss, val_iou)

    if best_state is not None:
        N.assign_state(params, best_state)
    N.save_checkpoint(ckpt_path, params, extra={"seed": str(seed)})
    log_path.write_text("\n".join(log_lines) + "\n")
    return {
        "seed": seed,
        "best_val_iou": best_iou,
        "checkpoint": str(ckpt_path),
        "log": str(log_path),
        "n_params": N.count_params(params),
    }
