"""Mini-batch Adam training, history export and checkpoint files."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import Dataset, WindowBatch, dataset_windows
from .evaluation import evaluate
from .model import ModelParams, backward, forward, init_params, loss
from .numerics import Adam
from .seeding import rng_for, sub_seed

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sakt-checkpoint"
CHECKPOINT_VERSION = 1
# fixed zip timestamp so identical content gives identical bytes
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float
    test_auc: float
    seconds: float


class TrainHistory(list):
    """One EpochRecord per completed epoch."""

    def best(self) -> EpochRecord | None:
        scored = [r for r in self if not np.isnan(r.test_auc)]
        return max(scored, key=lambda r: r.test_auc) if scored else None

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "test_loss", "test_auc", "seconds"])
            for r in self:
                w.writerow(
                    [r.epoch, repr(r.train_loss), repr(r.test_loss), repr(r.test_auc), f"{r.seconds:.3f}"]
                )
        return path


def _batch_gradient(params, batch, config, seed, step, threads, pool):
    """Mean loss, gradient and valid count for one batch, optionally fanned out."""
    train_mode = config.dropout_rate > 0

    def work(part: int, sub: WindowBatch):
        rng = rng_for(seed, "dropout", step, part) if train_mode else None
        trace = forward(params, sub, config, rng)
        mean, _ = loss(trace.p, sub.targets, sub.valid)
        return mean, backward(params, trace), int(sub.valid.sum())

    if threads <= 1 or len(batch) < 2:
        return work(0, batch)
    pieces = [
        batch.take(idx)
        for idx in np.array_split(np.arange(len(batch)), min(threads, len(batch)))
    ]
    pieces = [p for p in pieces if p.valid.any()]
    results = list(pool.map(work, range(len(pieces)), pieces))
    total = sum(c for _, _, c in results)
    mean = sum(m * c for m, _, c in results) / total
    grads = {k: sum(g[k] * (c / total) for _, g, c in results) for k in results[0][1]}
    return mean, grads, total


def train(
    train_set: Dataset | WindowBatch,
    test_set: Dataset | WindowBatch | None,
    config: TrainConfig,
    num_exercises: int | None = None,
    threads: int = 1,
    keep_best: bool = True,
    init: ModelParams | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Fit the model with Adam on the mean valid-position loss.

    Windows are built once and reshuffled every epoch. The test set, when
    given, is scored every ``eval_every`` epochs; with ``keep_best`` the
    returned parameters are those of the best-scoring evaluation.
    ``threads > 1`` splits each batch across worker threads, which changes
    float summation order (results stay reproducible for a fixed thread count).
    """
    if isinstance(train_set, Dataset):
        num_exercises = train_set.num_exercises
        windows = dataset_windows(train_set, config.n)
    else:
        if num_exercises is None:
            raise ValueError("num_exercises is required when passing raw windows")
        windows = train_set
    if len(windows) == 0:
        raise TrainingError("training set is empty")
    test_windows = None
    if test_set is not None:
        test_windows = dataset_windows(test_set, config.n) if isinstance(test_set, Dataset) else test_set

    params = init.copy() if init is not None else init_params(
        config, num_exercises, rng_for(config.seed, "init")
    )
    history = TrainHistory()
    if config.epochs == 0:
        return params, history

    opt = Adam(learning_rate=config.learning_rate)
    shuffle_rng = rng_for(config.seed, "shuffle")
    best_auc = -np.inf
    best_params = params.copy()
    step = 0
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            order = shuffle_rng.permutation(len(windows))
            loss_sum = 0.0
            loss_count = 0
            for b, start in enumerate(range(0, len(windows), config.batch_size)):
                batch = windows.take(order[start : start + config.batch_size])
                if not batch.valid.any():
                    continue
                mean, grads, count = _batch_gradient(
                    params, batch, config, config.seed, step, threads, pool
                )
                if not np.isfinite(mean):
                    norm = max(float(np.linalg.norm(v)) for v in params.tensors.values())
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {b}; "
                        f"largest parameter norm {norm:.4g}"
                    )
                opt.step(params.tensors, grads)
                step += 1
                loss_sum += mean * count
                loss_count += count
            train_loss = loss_sum / max(loss_count, 1)
            test_auc = test_loss = float("nan")
            due = epoch % config.eval_every == 0 or epoch == config.epochs
            if test_windows is not None and due:
                test_auc, test_loss = evaluate(params, test_windows, config)
                if test_auc > best_auc:
                    best_auc = test_auc
                    best_params = params.copy()
            rec = EpochRecord(epoch, train_loss, test_loss, test_auc, time.perf_counter() - t0)
            history.append(rec)
            log.info(
                "epoch %d  train_loss %.4f  test_loss %.4f  test_auc %.4f  (%.1fs)",
                epoch, train_loss, test_loss, test_auc, rec.seconds,
            )  # fmt: skip
    finally:
        if pool is not None:
            pool.shutdown()
    if keep_best and np.isfinite(best_auc):
        return best_params, history
    return params, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(
    params: ModelParams,
    config: TrainConfig,
    path: str | Path,
    history: TrainHistory | None = None,
    extra: dict | None = None,
) -> Path:
    """Write a zip of .npy tensors plus a JSON header; replaced atomically.

    ``extra`` is stored verbatim under the header's "extra" key and must be
    JSON-serializable.
    """
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "num_exercises": params.num_exercises,
        "shapes": {k: list(v.shape) for k, v in params.tensors.items()},
        "seeds": {s: sub_seed(config.seed, s) for s in ("init", "dropout", "shuffle")},
        # wall-clock timings are left out so reruns give identical bytes
        "history": [
            {k: v for k, v in asdict(r).items() if k != "seconds"} for r in (history or [])
        ],
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_member(zf, "header.json", json.dumps(header, sort_keys=True).encode())
        for name in sorted(params.tensors):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(params.tensors[name], order="C"))
            _write_member(zf, f"tensors/{name}.npy", buf.getvalue())
    os.replace(tmp, path)
    return path


def _read_header(zf: zipfile.ZipFile, path: Path) -> dict:
    header = json.loads(zf.read("header.json"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {header.get('version')} (expected {CHECKPOINT_VERSION})"
        )
    return header


def _open_checkpoint(path: str | Path, with_tensors: bool) -> tuple[dict, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = _read_header(zf, path)
            tensors = {}
            if with_tensors:
                for name in header["shapes"]:
                    raw = zf.read(f"tensors/{name}.npy")
                    tensors[name] = np.lib.format.read_array(io.BytesIO(raw))
    except CheckpointError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError, OSError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    return header, tensors


def read_checkpoint_header(path: str | Path) -> dict:
    """The JSON header alone: config, shapes, seeds, history and extra."""
    return _open_checkpoint(path, with_tensors=False)[0]


def load_checkpoint(path: str | Path) -> tuple[ModelParams, TrainConfig, TrainHistory]:
    header, tensors = _open_checkpoint(path, with_tensors=True)
    config = TrainConfig.from_dict(header["config"])
    try:
        params = ModelParams(
            header["num_exercises"], config.d, config.n, config.heads, config.blocks, tensors
        )
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    history = TrainHistory(
        EpochRecord(seconds=float("nan"), **r) for r in header.get("history", [])
    )
    return params, config, history
