from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import ShapeError
from graphio import TrafficDataset, WindowSample


def metrics(pred: np.ndarray, target: np.ndarray) -> Tuple[float, float]:
    """(MAE, RMSE) over every element. Score raw units, not normalized ones."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"metrics: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(np.abs(diff))), float(np.sqrt(np.mean(diff * diff)))


def horizon_metrics(pred: np.ndarray, target: np.ndarray,
                    horizons: Sequence[int]) -> Tuple[List[float], List[float]]:
    """Score each reporting step on its own; step h reads index h - 1 of the last axis."""
    maes, rmses = [], []
    for h in horizons:
        mae, rmse = metrics(pred[..., h - 1], target[..., h - 1])
        maes.append(mae)
        rmses.append(rmse)
    return maes, rmses


def stack_targets(windows: Sequence[WindowSample]) -> np.ndarray:
    return np.stack([w.target for w in windows])


def predict_windows(model, windows: Sequence[WindowSample],
                    inputs: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
    """Eval-mode forecasts [W×N×F_target×H] in normalized units.

    ``inputs`` replaces each window's history (perturbed copies); targets are
    always the window's own.
    """
    histories = inputs if inputs is not None else [w.history for w in windows]
    was_training = model.training
    model.eval()
    try:
        preds = [model(h).data.copy() for h in histories]
    finally:
        model.train(was_training)
    return np.stack(preds)


def evaluate(model, dataset: TrafficDataset, windows: Sequence[WindowSample], horizons: Sequence[int],
             inputs: Optional[Sequence[np.ndarray]] = None) -> Tuple[List[float], List[float]]:
    features = model.config.target_ids()
    pred = dataset.denormalize(predict_windows(model, windows, inputs), features)
    target = dataset.denormalize(stack_targets(windows), features)
    return horizon_metrics(pred, target, horizons)
