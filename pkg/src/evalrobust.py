"""Forecast scoring, the historical-average baseline and the robustness protocols.

Perturbations only ever touch window histories (model inputs). Targets and the
scoring pipeline are shared with the clean evaluation, so a sweep at level 0
reproduces the unperturbed numbers exactly.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

import tensorcore as tc
from config import AblationFlags, ModelConfig
from errors import ConfigError, NumericError
from fusion import mse_loss
from graphio import TrafficDataset, TrafficGraph, WindowSample, make_windows
from metrics import evaluate, horizon_metrics, stack_targets
from model import TSFusion
from trainer import TrainResult, fit_model, worker_count

logger = logging.getLogger(__name__)

PROTOCOLS = ("none", "gaussian", "missing", "adversarial")
REPORT_COLUMNS = ["protocol", "level", "horizon_min", "mae", "rmse", "std_mae", "std_rmse", "repeats"]
DEFAULT_ALPHA = 0.05


@dataclass
class ForecastReport:
    horizon_minutes: List[int]
    mae: List[float]
    rmse: List[float]
    perturbation: str = "none"
    level: float = 0.0
    repeats: int = 1
    std_mae: List[float] = field(default_factory=list)
    std_rmse: List[float] = field(default_factory=list)
    model: str = "TSFusion"

    def __post_init__(self):
        if not self.std_mae:
            self.std_mae = [0.0] * len(self.mae)
        if not self.std_rmse:
            self.std_rmse = [0.0] * len(self.rmse)
        for minutes, mae, rmse in zip(self.horizon_minutes, self.mae, self.rmse):
            if mae < 0 or rmse < mae * (1 - 1e-12):
                raise NumericError(f"{minutes}-minute row breaks rmse >= mae >= 0: mae={mae} rmse={rmse}")

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {"protocol": self.perturbation, "level": self.level, "horizon_min": minutes,
             "mae": mae, "rmse": rmse, "std_mae": s_mae, "std_rmse": s_rmse, "repeats": self.repeats}
            for minutes, mae, rmse, s_mae, s_rmse in zip(
                self.horizon_minutes, self.mae, self.rmse, self.std_mae, self.std_rmse)
        ]


def _minutes(dataset: TrafficDataset, horizons: Sequence[int]) -> List[int]:
    return [int(h) * dataset.step_minutes for h in horizons]


def evaluate_report(model: TSFusion, dataset: TrafficDataset, windows: Sequence[WindowSample],
                    horizons: Optional[Sequence[int]] = None, name: str = "TSFusion") -> ForecastReport:
    horizons = list(horizons or model.config.horizons)
    maes, rmses = evaluate(model, dataset, windows, horizons)
    return ForecastReport(_minutes(dataset, horizons), maes, rmses, model=name)


# ---------------------------------------------------------------------------
# historical average
# ---------------------------------------------------------------------------

def slot_means(dataset: TrafficDataset, features: Sequence[int] = (0,)) -> np.ndarray:
    """Training mean per time-of-day slot, [N×F_target×slots], in raw units."""
    raw = dataset.raw_values()[:, list(features), :dataset.split]
    slots = dataset.slot_of(np.arange(dataset.split))
    table = np.zeros(raw.shape[:2] + (dataset.slots_per_day,))
    counts = np.bincount(slots, minlength=dataset.slots_per_day)
    np.add.at(table, (slice(None), slice(None), slots), raw)
    empty = counts == 0
    if empty.any():
        logger.warning("%d time-of-day slots have no training data; using each station's all-slot training mean",
                       int(empty.sum()))
        table[:, :, empty] = raw.mean(axis=2, keepdims=True)
    table[:, :, ~empty] /= counts[~empty]
    return table


def ha_baseline(dataset: TrafficDataset, history: int, horizon: int,
                windows: Optional[Sequence[WindowSample]] = None,
                features: Sequence[int] = (0,)) -> np.ndarray:
    """HA forecasts [W×N×F_target×H] in raw units for ``windows`` (default: test split).

    The forecast for an absolute step depends on its slot alone, never on the
    horizon that reaches it.
    """
    if windows is None:
        windows = make_windows(dataset, history, horizon, features).test
    table = slot_means(dataset, features)
    steps = np.array([[w.t0 + k for k in range(horizon)] for w in windows], dtype=np.int64)
    slots = dataset.slot_of(steps)
    return np.moveaxis(table[:, :, slots], 2, 0)


def evaluate_ha(dataset: TrafficDataset, windows: Sequence[WindowSample], horizon: int,
                horizons: Sequence[int], features: Sequence[int] = (0,)) -> ForecastReport:
    pred = ha_baseline(dataset, 0, horizon, windows, features)
    target = dataset.denormalize(stack_targets(windows), features)
    maes, rmses = horizon_metrics(pred, target, horizons)
    return ForecastReport(_minutes(dataset, horizons), maes, rmses, model="HA")


# ---------------------------------------------------------------------------
# perturbations
# ---------------------------------------------------------------------------

def gaussian_perturb(x: np.ndarray, eta: float, feature_std: np.ndarray, seed: int) -> np.ndarray:
    """x + eta * eps, eps ~ N(0, std_f^2) per feature; the feature axis is second to last."""
    if eta < 0:
        raise ConfigError(f"noise level must be non-negative, got {eta}")
    x = np.array(x, dtype=np.float64)
    if eta == 0:
        return x
    rng = np.random.default_rng(seed)
    scale = np.asarray(feature_std, dtype=np.float64)[:, None]
    return x + eta * rng.standard_normal(x.shape) * scale


def mask_missing(x: np.ndarray, ratio: float, seed: int) -> np.ndarray:
    """Zero a uniformly chosen ``ratio`` of the entries (zero is the feature mean)."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"missing ratio must lie in [0, 1), got {ratio}")
    x = np.array(x, dtype=np.float64)
    count = int(round(ratio * x.size))
    if count:
        rng = np.random.default_rng(seed)
        x.reshape(-1)[rng.choice(x.size, size=count, replace=False)] = 0.0
    return x


def adversarial_perturb(model: TSFusion, history: np.ndarray, target: np.ndarray, alpha: float) -> np.ndarray:
    """Fast gradient sign step: x + alpha * sign(d loss / d x); parameters are not touched."""
    if alpha < 0:
        raise ConfigError(f"attack strength must be non-negative, got {alpha}")
    history = np.array(history, dtype=np.float64)
    if alpha == 0:
        return history
    attacked = tc.Tensor(history.copy(), requires_grad=True)
    with tc.Tape():
        loss = mse_loss(model(attacked), target)
        grad = tc.backward(loss).of(attacked)
    return history + alpha * np.sign(grad)


def adversarial_train(
    config: ModelConfig,
    flags: AblationFlags,
    dataset: TrafficDataset,
    graph: TrafficGraph,
    alpha: float = DEFAULT_ALPHA,
    mix: float = 0.5,
    windows: Optional[Sequence[WindowSample]] = None,
    progress: bool = False,
) -> TrainResult:
    """Train on mix·clean + (1−mix)·FGSM loss per window (the "-adv" models)."""
    if not 0.0 <= mix <= 1.0:
        raise ConfigError(f"mix must lie in [0, 1], got {mix}")

    def perturb(model, history, target):
        return adversarial_perturb(model, history, target, alpha)

    return fit_model(config, flags, dataset, graph, windows, progress=progress, perturb=perturb, mix=mix)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def perturb_inputs(model: TSFusion, dataset: TrafficDataset, windows: Sequence[WindowSample],
                   protocol: str, level: float, seed: int) -> List[np.ndarray]:
    if protocol == "none":
        return [w.history for w in windows]
    if protocol == "gaussian":
        return [gaussian_perturb(w.history, level, dataset.feature_stds, seed + i) for i, w in enumerate(windows)]
    if protocol == "missing":
        return [mask_missing(w.history, level, seed + i) for i, w in enumerate(windows)]
    if protocol == "adversarial":
        return [adversarial_perturb(model, w.history, w.target, level) for w in windows]
    raise ConfigError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")


def robustness_sweep(
    model: TSFusion,
    dataset: TrafficDataset,
    protocol: str,
    levels: Sequence[float],
    repeats: int = 5,
    seed: int = 0,
    windows: Optional[Sequence[WindowSample]] = None,
    horizons: Optional[Sequence[int]] = None,
    name: str = "TSFusion",
) -> List[ForecastReport]:
    """One report per level. Window i of draw r uses noise seed seed·1000003 + r·W + i."""
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    config = model.config
    horizons = list(horizons or config.horizons)
    if windows is None:
        windows = make_windows(dataset, config.history, config.horizon, config.target_ids()).test
    levels = [0.0] if protocol == "none" else [float(v) for v in levels]
    # the attack is deterministic, so one draw per level suffices
    draws = 1 if protocol in ("none", "adversarial") else repeats
    model.eval()

    def run(cell):
        level, r = cell
        inputs = perturb_inputs(model, dataset, windows, protocol, level, seed * 1000003 + r * len(windows))
        return evaluate(model, dataset, windows, horizons, inputs)

    cells = [(level, r) for level in levels for r in range(draws)]
    with model.inspection_paused(), ThreadPoolExecutor(max_workers=worker_count(len(cells))) as pool:
        scores = list(pool.map(run, cells))

    reports = []
    for i, level in enumerate(levels):
        block = scores[i * draws:(i + 1) * draws]
        maes = np.array([m for m, _ in block])
        rmses = np.array([r for _, r in block])
        reports.append(ForecastReport(
            _minutes(dataset, horizons), maes.mean(axis=0).tolist(), rmses.mean(axis=0).tolist(),
            perturbation=protocol, level=level, repeats=draws,
            std_mae=maes.std(axis=0).tolist(), std_rmse=rmses.std(axis=0).tolist(), model=name,
        ))
        logger.info("%s %s level %g: MAE %s", name, protocol, level, np.round(reports[-1].mae, 4).tolist())
    return reports


def compare_robustness(models: Mapping[str, TSFusion], dataset: TrafficDataset, protocol: str,
                       levels: Sequence[float], repeats: int = 5, seed: int = 0) -> Dict[str, List[ForecastReport]]:
    """Same protocol, same seeds, several models."""
    return {name: robustness_sweep(model, dataset, protocol, levels, repeats, seed, name=name)
            for name, model in models.items()}


def level_trend(reports: Sequence[ForecastReport], horizon_index: int = -1) -> float:
    """Spearman correlation between perturbation level and MAE."""
    frame = pd.DataFrame({"level": [r.level for r in reports],
                          "mae": [r.mae[horizon_index] for r in reports]})
    ranked = frame.rank()
    return float(ranked["level"].corr(ranked["mae"]))


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def reports_frame(reports: Sequence[ForecastReport], **extra_columns) -> pd.DataFrame:
    rows = [row for report in reports for row in report.rows()]
    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    for name, value in extra_columns.items():
        frame.insert(0, name, value)
    return frame


def write_report(reports: Sequence[ForecastReport], csv_path: Union[str, Path],
                 provenance: Optional[Dict[str, Any]] = None, **extra_columns) -> List[Path]:
    """CSV plus a JSON mirror (same stem) carrying the run provenance."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    reports_frame(reports, **extra_columns).to_csv(csv_path, index=False, float_format="%.17g")
    json_path = csv_path.with_suffix(".json")
    payload = {"provenance": provenance or {}, "reports": [asdict(r) for r in reports]}
    json_path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return [csv_path, json_path]
