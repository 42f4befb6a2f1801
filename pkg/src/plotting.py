import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

logger = logging.getLogger(__name__)

sns.set_theme(style="whitegrid")


def _long_format(frame: pd.DataFrame, x: str, hue: str) -> pd.DataFrame:
    return frame.melt(id_vars=[c for c in (x, hue) if c in frame], value_vars=["mae", "rmse"],
                      var_name="metric", value_name="error")


def _save(path: Union[str, Path]) -> Path:
    path = Path(path)
    plt.tight_layout()
    plt.savefig(path, format="svg")
    plt.close()
    logger.info("Saved %s", path)
    return path


def plot_horizons(frame: pd.DataFrame, path: Union[str, Path], hue: str = "model") -> Path:
    """MAE and RMSE against forecast horizon, one line per ``hue`` value."""
    data = _long_format(frame, "horizon_min", hue)
    plt.figure(figsize=(8, 5))
    sns.lineplot(data=data, x="horizon_min", y="error", hue=hue if hue in data else None,
                 style="metric", markers=True, palette="viridis" if hue in data else None)
    plt.xlabel("Horizon (minutes)")
    plt.ylabel("Error (raw units)")
    plt.title("Forecast error by horizon", fontsize=14, fontweight="bold")
    return _save(path)


def plot_sweep(frame: pd.DataFrame, path: Union[str, Path], horizon_min: Optional[int] = None, hue: str = "model") -> Path:
    """MAE and RMSE against perturbation level at one horizon (default: the longest)."""
    horizon_min = horizon_min or int(frame["horizon_min"].max())
    data = _long_format(frame[frame["horizon_min"] == horizon_min], "level", hue)
    protocol = ", ".join(sorted(set(frame["protocol"])))
    plt.figure(figsize=(8, 5))
    sns.lineplot(data=data, x="level", y="error", hue=hue if hue in data else None,
                 style="metric", markers=True, palette="viridis" if hue in data else None)
    plt.xlabel(f"{protocol} level")
    plt.ylabel("Error (raw units)")
    plt.title(f"Robustness at {horizon_min} minutes", fontsize=14, fontweight="bold")
    return _save(path)


def plot_loss(history: pd.DataFrame, path: Union[str, Path], columns: Sequence[str] = ("train_loss",)) -> Path:
    plt.figure(figsize=(8, 5))
    for column in columns:
        plt.plot(history["epoch"], history[column], label=column)
    plt.xlabel("Epoch")
    plt.legend(loc="upper right")
    return _save(path)
