"""Command-line entry point: ``python src/cli.py <command> ...``."""
import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import pandas as pd

import evalrobust
import plotting
from config import AblationFlags, ModelConfig, dump_config, load_config
from errors import ConfigError, TSFusionError, ValidationError
from features import VARIANT_ALIASES, VARIANTS
from graphio import (
    GraphConfig,
    SynthConfig,
    TrafficDataset,
    TrafficGraph,
    load_dataset,
    make_windows,
    synth_generate,
    write_synthetic,
)
from model import TSFusion, read_pretrained
from trainer import expand_grid, fit_model, grid_search, run_repeats

logger = logging.getLogger(__name__)

VERSION = "0.1.0"
MANIFEST_NAME = "run_manifest.json"
DEFAULT_LEVELS = {
    "gaussian": [0.1, 0.2, 0.3, 0.4, 0.5],
    "missing": [0.1, 0.3, 0.5],
    "adversarial": [evalrobust.DEFAULT_ALPHA],
}


def sha256_of(path: Path) -> str:
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    return digest.hexdigest()


@dataclass
class RunManifest:
    command: List[str]
    config: Dict[str, Any] = field(default_factory=dict)
    digests: Dict[str, str] = field(default_factory=dict)
    seed: Optional[int] = None
    version: str = VERSION
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished: Optional[str] = None
    outputs: List[str] = field(default_factory=list)

    def add_outputs(self, paths: Sequence[Path]) -> None:
        self.outputs.extend(str(p) for p in paths)

    def write(self, out_dir: Path) -> Path:
        missing = [p for p in self.outputs if not Path(p).exists()]
        if missing:
            raise ValidationError(f"manifest lists outputs that were not written: {missing}")
        self.finished = datetime.now(timezone.utc).isoformat()
        path = out_dir / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, default=str), encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _overrides(args) -> Dict[str, Any]:
    targets = args.target_features.split(",") if getattr(args, "target_features", None) else None
    return {
        "epochs": getattr(args, "epochs", None),
        "learning_rate": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None),
        "seed": getattr(args, "seed", None),
        "history": getattr(args, "history", None),
        "horizon": getattr(args, "horizon", None),
        "repeats": getattr(args, "repeats", None),
        "patience": getattr(args, "patience", None),
        "lr_schedule": getattr(args, "lr_schedule", None),
        "target_features": targets,
        "sigma2": getattr(args, "sigma2", None),
        "eps": getattr(args, "eps", None),
        "mask_unreachable": True if getattr(args, "mask_unreachable", False) else None,
        "train_days": getattr(args, "train_days", None),
        "min_spacing_miles": getattr(args, "min_spacing", None),
        "binary": True if getattr(args, "binary", False) else None,
    }


def graph_config_for(data_dir: Path, config: ModelConfig, graph_values: Dict[str, Any]) -> GraphConfig:
    """Dataset manifest, then config-file graph section, then the model's sigma2/eps."""
    values: Dict[str, Any] = {}
    manifest = data_dir / "manifest.json"
    if manifest.exists():
        try:
            payload = json.loads(manifest.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read {manifest}: {exc}") from None
        if not isinstance(payload, dict) or not isinstance(payload.get("graph", {}), dict):
            raise ValidationError(f"{manifest} must be an object with an optional 'graph' object")
        values.update(payload.get("graph", {}))
    values.update(graph_values)
    if config.sigma2 is not None:
        values["sigma2"] = config.sigma2
    if config.eps is not None:
        values["eps"] = config.eps
    known = {f.name for f in fields(GraphConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown graph keys {unknown}")
    return GraphConfig(**values)


def load_data(data_dir: str, config: ModelConfig,
              graph_values: Dict[str, Any]) -> Tuple[TrafficDataset, TrafficGraph, Dict[str, str]]:
    data_dir = Path(data_dir)
    graph_config = graph_config_for(data_dir, config, graph_values)
    data_path = data_dir / ("data.bin" if graph_config.binary else "data.csv")
    distances_path = data_dir / "distances.csv"
    dataset, graph = load_dataset(data_path, distances_path, graph_config)
    digests = {str(p): sha256_of(p) for p in (data_path, distances_path)}
    return dataset, graph, digests


def _write_plots(enabled: bool, plots: Sequence[Tuple[Any, ...]]) -> List[Path]:
    if not enabled:
        return []
    return [fn(*rest) for fn, *rest in plots]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, manifest: RunManifest) -> Path:
    pairs = None
    if args.long_range:
        pairs = [tuple(int(v) for v in pair.split("-")) for pair in args.long_range.split(",")]
    config = SynthConfig(nodes=args.nodes, steps=args.steps, num_pairs=args.pairs, long_range_pairs=pairs,
                         noise=args.noise, seed=args.seed, period=args.period)
    dataset, graph = synth_generate(config)
    out_dir = Path(args.out)
    manifest.config = {"synth": asdict(config)}
    manifest.seed = config.seed
    manifest.add_outputs(write_synthetic(out_dir, dataset, graph, config))
    print(f"Wrote {dataset.num_nodes} nodes x {dataset.num_steps} steps to {out_dir}")
    return out_dir


def cmd_train(args, manifest: RunManifest) -> Path:
    config, flags, graph_values = load_config(args.config, _overrides(args))
    if args.variant:
        flags = AblationFlags.from_variant(args.variant)
    dataset, graph, digests = load_data(args.data, config, graph_values)
    manifest.config, manifest.digests, manifest.seed = dump_config(config, flags), digests, config.seed

    if args.adversarial is not None:
        result = evalrobust.adversarial_train(config, flags, dataset, graph, args.adversarial, args.mix,
                                              progress=not args.quiet)
    else:
        result = fit_model(config, flags, dataset, graph, progress=not args.quiet)
    out_dir = Path(args.out)
    result.model.save_pretrained(out_dir)
    history_path = out_dir / "loss_history.csv"
    result.write_history(history_path)

    windows = make_windows(dataset, config.history, config.horizon, config.target_ids())
    report = evalrobust.evaluate_report(result.model, dataset, windows.test, name=flags.variant_name())
    baseline = evalrobust.evaluate_ha(dataset, windows.test, config.horizon, config.horizons, config.target_ids())
    outputs = [out_dir / "config.json", out_dir / "model.tsfu", history_path]
    outputs += evalrobust.write_report([report], out_dir / "report.csv", manifest.config)
    outputs += evalrobust.write_report([baseline], out_dir / "ha_report.csv", manifest.config)
    frame = pd.concat([evalrobust.reports_frame([report], model=report.model),
                       evalrobust.reports_frame([baseline], model="HA")])
    outputs += _write_plots(args.plot, [
        (plotting.plot_loss, result.history_frame(), out_dir / "loss.svg"),
        (plotting.plot_horizons, frame, out_dir / "horizons.svg"),
    ])
    manifest.add_outputs(outputs)
    print(f"Saved model + config to {out_dir}")
    return out_dir


def cmd_eval(args, manifest: RunManifest) -> Path:
    payload = read_pretrained(args.model)
    config = ModelConfig(**payload["model"])
    _, _, graph_values = load_config(args.config, _overrides(args))
    dataset, graph, digests = load_data(args.data, config, graph_values)
    weights = Path(args.model) / "model.tsfu"
    digests[str(weights)] = sha256_of(weights)
    model = TSFusion.from_pretrained(args.model, graph)
    manifest.config, manifest.digests, manifest.seed = payload, digests, config.seed

    windows = make_windows(dataset, config.history, config.horizon, config.target_ids())
    report = evalrobust.evaluate_report(model, dataset, windows.test, name=model.flags.variant_name())
    out_dir = Path(args.out)
    manifest.add_outputs(evalrobust.write_report([report], out_dir / "report.csv", payload))
    for minutes, mae, rmse in zip(report.horizon_minutes, report.mae, report.rmse):
        print(f"{minutes:3d} min  MAE={mae:.4f}  RMSE={rmse:.4f}")
    return out_dir


def cmd_ablate(args, manifest: RunManifest) -> Path:
    config, _, graph_values = load_config(args.config, _overrides(args))
    dataset, graph, digests = load_data(args.data, config, graph_values)
    variants = list(VARIANTS) if args.variant == "all" else [args.variant]
    manifest.config, manifest.digests, manifest.seed = dump_config(config, AblationFlags()), digests, config.seed
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    frames, outputs = [], []
    for name in variants:
        flags = AblationFlags.from_variant(name)
        repeats = run_repeats(config, flags, dataset, graph)
        mae, rmse = repeats.mean()
        std_mae, std_rmse = repeats.std()
        report = evalrobust.ForecastReport(
            [h * dataset.step_minutes for h in repeats.horizons], mae.tolist(), rmse.tolist(),
            repeats=len(repeats.results), std_mae=std_mae.tolist(), std_rmse=std_rmse.tolist(), model=name)
        outputs += evalrobust.write_report([report], out_dir / f"report_{name}.csv",
                                           dump_config(config, flags))
        frames.append(evalrobust.reports_frame([report], variant=name))
    if len(variants) > 1:
        windows = make_windows(dataset, config.history, config.horizon, config.target_ids())
        baseline = evalrobust.evaluate_ha(dataset, windows.test, config.horizon, config.horizons,
                                          config.target_ids())
        frames.append(evalrobust.reports_frame([baseline], variant="HA"))
        summary = pd.concat(frames, ignore_index=True)
        summary_path = out_dir / "summary.csv"
        summary.to_csv(summary_path, index=False, float_format="%.17g")
        outputs.append(summary_path)
        outputs += _write_plots(args.plot, [(plotting.plot_horizons, summary, out_dir / "ablation.svg", "variant")])
    manifest.add_outputs(outputs)
    print(f"Wrote {len(variants)} variant report(s) to {out_dir}")
    return out_dir


def _named_dirs(items: Sequence[str]) -> Dict[str, str]:
    named = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--compare expects NAME=DIR, got {item!r}")
        named[name] = path
    return named


def cmd_robust(args, manifest: RunManifest) -> Path:
    payload = read_pretrained(args.model)
    config = ModelConfig(**payload["model"])
    _, _, graph_values = load_config(args.config, _overrides(args))
    dataset, graph, digests = load_data(args.data, config, graph_values)
    dirs = {args.name: args.model, **_named_dirs(args.compare)}
    models = {name: TSFusion.from_pretrained(path, graph) for name, path in dirs.items()}
    protocols = ["gaussian", "missing", "adversarial"] if args.protocol == "all" else [args.protocol]
    seed = config.seed if args.seed is None else args.seed
    manifest.config = {"models": dirs, "protocols": protocols, "levels": args.levels, "repeats": args.repeats}
    manifest.digests, manifest.seed = digests, seed

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames, outputs = [], []
    for protocol in protocols:
        levels = args.levels or DEFAULT_LEVELS[protocol]
        results = evalrobust.compare_robustness(models, dataset, protocol, levels, args.repeats, seed)
        for name, reports in results.items():
            extra = {"model": name} if len(models) > 1 else {}
            frames.append(evalrobust.reports_frame(reports, **extra))
            if protocol == "gaussian":
                logger.info("%s noise trend (Spearman): %.3f", name, evalrobust.level_trend(reports))
    table = pd.concat(frames, ignore_index=True)
    csv_path = out_dir / "robust.csv"
    table.to_csv(csv_path, index=False, float_format="%.17g")
    json_path = csv_path.with_suffix(".json")
    json_path.write_text(json.dumps({"provenance": manifest.config, "rows": table.to_dict(orient="records")},
                                    indent=2), encoding="utf-8")
    outputs += [csv_path, json_path]
    hue = "model" if len(models) > 1 else None
    outputs += _write_plots(args.plot, [
        (plotting.plot_sweep, table[table["protocol"] == p], out_dir / f"robust_{p}.svg", None, hue or "model")
        for p in protocols
    ])
    manifest.add_outputs(outputs)
    print(f"Wrote {len(table)} rows to {csv_path}")
    return out_dir


def cmd_gridsearch(args, manifest: RunManifest) -> Path:
    config, flags, graph_values = load_config(args.config, _overrides(args))
    try:
        axes = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read grid {args.grid}: {exc}") from None
    if not isinstance(axes, dict) or not all(isinstance(v, list) and v for v in axes.values()):
        raise ConfigError("grid file must map config keys to non-empty lists")
    dataset, graph, digests = load_data(args.data, config, graph_values)
    grid = expand_grid(config, axes)
    manifest.config = {"base": dump_config(config, flags), "grid": axes}
    manifest.digests, manifest.seed = digests, config.seed

    best, table = grid_search(grid, dataset, graph, flags, args.val_fraction)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trials_path = out_dir / "trials.csv"
    table.to_csv(trials_path, index=False, float_format="%.17g")
    best_path = out_dir / "best_config.json"
    best_path.write_text(json.dumps(dump_config(best, flags), indent=2), encoding="utf-8")
    manifest.add_outputs([trials_path, best_path])
    print(f"Best of {len(grid)} configs written to {best_path}")
    return out_dir


def graph_stats(graph: TrafficGraph) -> Dict[str, Any]:
    reachable = graph.reachable & ~np.eye(graph.num_nodes, dtype=bool)
    hops = graph.hop_count[reachable]
    return {
        "nodes": graph.num_nodes,
        "edges": len(graph.edges),
        "in_degree_histogram": np.bincount(graph.in_degree).tolist(),
        "out_degree_histogram": np.bincount(graph.out_degree).tolist(),
        "components": nx.number_weakly_connected_components(graph.to_networkx()),
        "unreachable_pairs": int((~graph.reachable).sum()),
        "hop_diameter": int(hops.max()) if hops.size else 0,
        "symmetric": bool(np.array_equal(graph.adjacency, graph.adjacency.T)),
    }


def cmd_inspect_graph(args, manifest: RunManifest) -> Path:
    config, _, graph_values = load_config(args.config, _overrides(args))
    _, graph, digests = load_data(args.data, config, graph_values)
    stats = graph_stats(graph)
    manifest.config, manifest.digests = stats, digests
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "graph_stats.json"
    path.write_text(json.dumps(stats, indent=2), encoding="utf-8")
    manifest.add_outputs([path])
    print(f"{stats['nodes']} nodes, {stats['edges']} edges, {stats['components']} component(s), "
          f"hop diameter {stats['hop_diameter']}")
    return out_dir


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--data", required=True, help="directory with data.csv, distances.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch_size", "--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--history", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr_schedule", "--lr-schedule", choices=["none", "linear"])
    p.add_argument("--target_features", "--target-features", help="comma-separated, e.g. flow,speed")
    p.add_argument("--sigma2", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--mask_unreachable", "--mask-unreachable", action="store_true")
    p.add_argument("--train_days", "--train-days", type=int)
    p.add_argument("--min_spacing", "--min-spacing", type=float, help="drop stations closer than this (miles)")
    p.add_argument("--binary", action="store_true", help="read data.bin instead of data.csv")
    p.add_argument("--plot", action="store_true", help="also write SVG charts")
    p.add_argument("--quiet", action="store_true", help="no progress bars")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tsfusion")
    ap.add_argument("--log_level", "--log-level", default="INFO")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic long-range benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--nodes", type=int, default=24)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--pairs", type=int, default=3)
    p.add_argument("--long_range", "--long-range", default=None, help="explicit pairs, e.g. 0-7,3-12")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--period", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model and score it on the test split")
    _add_model_flags(p)
    p.add_argument("--variant", choices=sorted(VARIANTS) + sorted(VARIANT_ALIASES))
    p.add_argument("--adversarial", type=float, default=None, help="FGSM strength for adversarial training")
    p.add_argument("--mix", type=float, default=0.5)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a saved model")
    _add_model_flags(p)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train ablation variants with repeats")
    _add_model_flags(p)
    p.add_argument("--variant", default="all", choices=["all"] + sorted(VARIANTS) + sorted(VARIANT_ALIASES))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("robust", help="perturbation sweeps on saved models")
    _add_model_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--name", default="TSFusion")
    p.add_argument("--compare", action="append", help="NAME=DIR of another saved model")
    p.add_argument("--protocol", default="gaussian", choices=["gaussian", "missing", "adversarial", "all"])
    p.add_argument("--levels", type=_floats, default=None)
    p.set_defaults(func=cmd_robust, repeats=5)

    p = sub.add_parser("gridsearch", help="exhaustive search over a JSON grid")
    _add_model_flags(p)
    p.add_argument("--grid", required=True, help='JSON like {"learning_rate": [1e-3, 1e-2]}')
    p.add_argument("--val_fraction", "--val-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("inspect-graph", help="graph statistics for a dataset")
    _add_model_flags(p)
    p.set_defaults(func=cmd_inspect_graph)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(command=["tsfusion", *argv])
    try:
        try:
            out_dir = args.func(args, manifest)
            manifest.write(Path(out_dir))
        except OSError as exc:
            raise ValidationError(f"{exc.strerror or exc}: {exc.filename}") from exc
    except TSFusionError as exc:
        message = str(exc).replace("\n", " ")
        print(f"error={type(exc).__name__} code={exc.exit_code} message={message}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
