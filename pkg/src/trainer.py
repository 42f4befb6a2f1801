import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm
from transformers import get_linear_schedule_with_warmup

import tensorcore as tc
from config import AblationFlags, ModelConfig
from dataset import window_loader
from errors import ConfigError, DivergenceError, InsufficientDataError
from fusion import mse_loss
from graphio import TrafficDataset, TrafficGraph, WindowSample, make_windows
from metrics import evaluate
from model import TSFusion, build_model

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "train_loss", "val_mae", "val_rmse"]

# (model, history, target) -> perturbed history
Perturb = Callable[[TSFusion, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float = float("nan")
    val_rmse: float = float("nan")


@dataclass
class TrainResult:
    model: TSFusion
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.history], columns=HISTORY_COLUMNS)

    def write_history(self, path) -> None:
        self.history_frame().to_csv(path, index=False, float_format="%.17g")


def worker_count(limit: Optional[int] = None) -> int:
    raw = os.environ.get("TSFUSION_THREADS")
    try:
        workers = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f"TSFUSION_THREADS must be an integer, got {raw!r}") from None
    workers = max(1, workers)
    return min(workers, limit) if limit else workers


def split_validation(windows: Sequence[WindowSample],
                     val_fraction: float) -> Tuple[List[WindowSample], List[WindowSample]]:
    """Hold out the chronologically last share of the training windows."""
    windows = list(windows)
    if val_fraction <= 0:
        return windows, []
    count = max(1, int(round(val_fraction * len(windows))))
    if count >= len(windows):
        raise InsufficientDataError(f"{len(windows)} training windows leave nothing after validation")
    return windows[:-count], windows[-count:]


def batch_loss(model: TSFusion, batch: Mapping[str, Any], perturb: Optional[Perturb] = None,
               mix: float = 1.0) -> tc.Tensor:
    """Mean per-window MSE; with ``perturb`` mixed as mix·clean + (1−mix)·perturbed."""
    losses = []
    for history, target in zip(batch["history"], batch["target"]):
        loss = mse_loss(model(history), target)
        if perturb is not None and mix < 1.0:
            adversarial = perturb(model, history, target)
            loss = tc.add(tc.scale(loss, mix), tc.scale(mse_loss(model(adversarial), target), 1.0 - mix))
        losses.append(loss)
    total = losses[0]
    for loss in losses[1:]:
        total = tc.add(total, loss)
    return tc.scale(total, 1.0 / len(losses))


def make_optimizer(model: TSFusion, learning_rate: float) -> Tuple[torch.optim.Adam, List[torch.Tensor]]:
    # torch views share memory with the numpy buffers, so Adam updates them in place
    views = [torch.from_numpy(p.data) for p in model.parameters()]
    optimizer = torch.optim.Adam(views, lr=learning_rate, betas=(0.9, 0.999), eps=1e-8)
    return optimizer, views


def optimizer_step(model: TSFusion, optimizer: torch.optim.Optimizer, views: List[torch.Tensor],
                   grads: tc.GradientMap) -> None:
    for param, view in zip(model.parameters(), views):
        view.grad = torch.from_numpy(np.array(grads.of(param)))
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def _validate(model: TSFusion, dataset: TrafficDataset, windows: Sequence[WindowSample]) -> Tuple[float, float]:
    if not windows:
        return float("nan"), float("nan")
    maes, rmses = evaluate(model, dataset, windows, range(1, model.config.horizon + 1))
    return float(np.mean(maes)), float(np.sqrt(np.mean(np.square(rmses))))


def train(
    model: TSFusion,
    dataset: TrafficDataset,
    config: Optional[ModelConfig] = None,
    windows: Optional[Sequence[WindowSample]] = None,
    perturb: Optional[Perturb] = None,
    mix: float = 1.0,
    progress: bool = True,
) -> TrainResult:
    """Mini-batch Adam on the mean per-window MSE.

    ``windows`` defaults to the training split of ``dataset``; the last
    ``val_fraction`` of them are held out for the per-epoch validation columns.
    """
    config = config or model.config
    if windows is None:
        windows = make_windows(dataset, config.history, config.horizon, config.target_ids()).train
    fit, val = split_validation(windows, config.val_fraction)
    if not fit:
        raise InsufficientDataError("no training windows")

    model.set_feature_scale(dataset.feature_stds)
    model.reseed(config.seed)
    model.train()
    loader = window_loader(fit, config.batch_size, shuffle=True, seed=config.seed)
    optimizer, views = make_optimizer(model, config.learning_rate)
    scheduler = None
    if config.lr_schedule == "linear":
        total_steps = len(loader) * config.epochs
        scheduler = get_linear_schedule_with_warmup(
            optimizer, num_warmup_steps=int(config.warmup_fraction * total_steps), num_training_steps=total_steps
        )

    result = TrainResult(model=model)
    best_mae, best_state, stale = np.inf, None, 0
    for epoch in range(1, config.epochs + 1):
        running_loss = 0.0
        for batch in tqdm(loader, desc=f"Epoch {epoch}/{config.epochs}", disable=not progress, leave=False):
            with tc.Tape():
                loss = batch_loss(model, batch, perturb, mix)
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(epoch, optimizer.param_groups[0]["lr"], value)
                grads = tc.backward(loss)
            optimizer_step(model, optimizer, views, grads)
            if scheduler is not None:
                scheduler.step()
            running_loss += value

        avg_loss = running_loss / max(1, len(loader))
        val_mae, val_rmse = _validate(model, dataset, val)
        model.train()
        result.history.append(EpochRecord(epoch, avg_loss, val_mae, val_rmse))
        logger.info("Epoch %d average loss: %.6f val MAE %.4f", epoch, avg_loss, val_mae)

        if config.patience > 0 and val:
            if val_mae < best_mae:
                best_mae, best_state, stale = val_mae, {k: v.copy() for k, v in model.state_dict().items()}, 0
                result.best_epoch = epoch
            else:
                stale += 1
                if stale >= config.patience:
                    logger.info("Stopping early at epoch %d; best epoch %d", epoch, result.best_epoch)
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result


def fit_model(config: ModelConfig, flags: AblationFlags, dataset: TrafficDataset, graph: TrafficGraph,
              windows: Optional[Sequence[WindowSample]] = None, progress: bool = False, **kwargs) -> TrainResult:
    model = build_model(config, flags, graph, dataset.num_features)
    return train(model, dataset, config, windows, progress=progress, **kwargs)


def expand_grid(base: ModelConfig, axes: Mapping[str, Sequence[Any]]) -> List[ModelConfig]:
    """Cartesian product of ``axes`` over ``base``, last axis varying fastest."""
    names = list(axes)
    unknown = [n for n in names if n not in asdict(base)]
    if unknown:
        raise ConfigError(f"unknown grid keys {unknown}")
    return [replace(base, **dict(zip(names, values))).validate()
            for values in itertools.product(*(axes[n] for n in names))]


def grid_search(
    grid: Sequence[ModelConfig],
    dataset: TrafficDataset,
    graph: TrafficGraph,
    flags: Optional[AblationFlags] = None,
    val_fraction: float = 0.1,
) -> Tuple[ModelConfig, pd.DataFrame]:
    """Train every cell and keep the lowest validation MAE (then RMSE, then grid order)."""
    grid = list(grid)
    if not grid:
        raise ConfigError("grid is empty")
    flags = flags or AblationFlags()
    if val_fraction <= 0:
        raise ConfigError("grid search needs a validation fraction above zero")

    def run(cell: Tuple[int, ModelConfig]) -> Dict[str, Any]:
        index, config = cell
        config = replace(config, val_fraction=val_fraction)
        result = fit_model(config, flags, dataset, graph)
        last = result.history[-1]
        if result.best_epoch is not None:
            last = result.history[result.best_epoch - 1]
        logger.info("grid cell %d: val MAE %.4f RMSE %.4f", index, last.val_mae, last.val_rmse)
        return {"index": index, **asdict(config), "val_mae": last.val_mae, "val_rmse": last.val_rmse}

    with ThreadPoolExecutor(max_workers=worker_count(len(grid))) as pool:
        rows = list(pool.map(run, enumerate(grid)))
    table = pd.DataFrame(rows)
    ranked = table.sort_values(["val_mae", "val_rmse", "index"], kind="mergesort", na_position="last")
    best = grid[int(ranked.iloc[0]["index"])]
    return best, table


@dataclass
class RepeatResult:
    horizons: List[int]
    mae: np.ndarray
    rmse: np.ndarray
    results: List[TrainResult]

    @property
    def models(self) -> List[TSFusion]:
        return [r.model for r in self.results]

    def mean(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.mae.mean(axis=0), self.rmse.mean(axis=0)

    def std(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.mae.std(axis=0), self.rmse.std(axis=0)


def run_repeats(
    config: ModelConfig,
    flags: AblationFlags,
    dataset: TrafficDataset,
    graph: TrafficGraph,
    repeats: Optional[int] = None,
    trainer: Optional[Callable[[ModelConfig], TrainResult]] = None,
) -> RepeatResult:
    """Train ``repeats`` models with seeds seed, seed+1, ... and score each on the test split."""
    repeats = repeats or config.repeats
    windows = make_windows(dataset, config.history, config.horizon, config.target_ids())
    if not windows.test:
        raise InsufficientDataError("no test windows to score")
    trainer = trainer or (lambda c: fit_model(c, flags, dataset, graph, windows.train))

    def run(r: int) -> Tuple[TrainResult, List[float], List[float]]:
        result = trainer(replace(config, seed=config.seed + r))
        maes, rmses = evaluate(result.model, dataset, windows.test, config.horizons)
        return result, maes, rmses

    with ThreadPoolExecutor(max_workers=worker_count(repeats)) as pool:
        runs = list(pool.map(run, range(repeats)))
    return RepeatResult(
        horizons=list(config.horizons),
        mae=np.array([m for _, m, _ in runs]),
        rmse=np.array([r for _, _, r in runs]),
        results=[res for res, _, _ in runs],
    )
