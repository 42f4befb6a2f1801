"""Traffic data ingestion, graph construction and the synthetic benchmark generator."""
import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import pandas as pd

from errors import (
    ConfigError,
    ConsistencyError,
    InsufficientDataError,
    UnrecoverableSeriesError,
    ValidationError,
)
from features import FEATURES, STEP_MINUTES, slots_per_day

logger = logging.getLogger(__name__)

DATA_COLUMNS = ["time", "node_id"] + FEATURES
DISTANCE_COLUMNS = ["from", "to", "distance_miles"]


@dataclass
class GraphConfig:
    sigma2: float = 10.0
    eps: float = 0.5
    # squared distances are divided by this before the kernel is applied
    distance_scale: float = 1e4
    split_fraction: float = 0.8
    train_days: Optional[int] = None
    step_minutes: int = STEP_MINUTES
    slots_per_day: Optional[int] = None
    mask_unreachable: bool = False
    min_spacing_miles: Optional[float] = None
    binary: bool = False

    def day_slots(self) -> int:
        return self.slots_per_day or slots_per_day(self.step_minutes)


@dataclass(frozen=True)
class TrafficGraph:
    adjacency: np.ndarray
    normalized: np.ndarray
    in_degree: np.ndarray
    out_degree: np.ndarray
    hop_count: np.ndarray
    hop_paths: Tuple[Tuple[Optional[Tuple[int, ...]], ...], ...]
    edge_features: np.ndarray
    path_features: np.ndarray
    distances: Optional[np.ndarray] = None
    mask_unreachable: bool = False
    planted_pairs: Tuple[Tuple[int, int], ...] = ()

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def edges(self) -> List[Tuple[int, int]]:
        src, dst = np.nonzero(self.adjacency)
        return list(zip(src.tolist(), dst.tolist()))

    @property
    def reachable(self) -> np.ndarray:
        return self.hop_count >= 0

    def path_edges(self, i: int, j: int) -> Optional[List[Tuple[int, int]]]:
        nodes = self.hop_paths[i][j]
        if nodes is None:
            return None
        return list(zip(nodes[:-1], nodes[1:]))

    def attention_mask(self) -> Optional[np.ndarray]:
        """Pairs excluded from attention, or None when unreachable pairs stay visible."""
        if not self.mask_unreachable:
            return None
        return ~self.reachable

    def to_networkx(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(range(self.num_nodes))
        g.add_weighted_edges_from((i, j, self.adjacency[i, j]) for i, j in self.edges)
        return g


@dataclass
class TrafficDataset:
    values: np.ndarray
    feature_means: np.ndarray
    feature_stds: np.ndarray
    split: int
    step_minutes: int = STEP_MINUTES
    slots_per_day: int = 288
    first_time: int = 0
    feature_names: List[str] = field(default_factory=lambda: list(FEATURES))
    node_ids: List[int] = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def num_features(self) -> int:
        return self.values.shape[1]

    @property
    def num_steps(self) -> int:
        return self.values.shape[2]

    def raw_values(self) -> np.ndarray:
        return self.values + self.feature_means[None, :, None]

    def denormalize(self, x: np.ndarray, features: Sequence[int]) -> np.ndarray:
        """Add the feature means back; ``x`` has the feature axis second to last."""
        return x + self.feature_means[list(features)][:, None]

    def slot_of(self, t: Union[int, np.ndarray]):
        return (self.first_time + np.asarray(t)) % self.slots_per_day


@dataclass(frozen=True)
class WindowSample:
    history: np.ndarray
    target: np.ndarray
    t0: int


@dataclass
class WindowSet:
    train: List[WindowSample]
    test: List[WindowSample]
    excluded: int

    def __len__(self) -> int:
        return len(self.train) + len(self.test) + self.excluded


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------

def normalize_adjacency(adjacency: np.ndarray) -> np.ndarray:
    a_tilde = adjacency + np.eye(adjacency.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return d_inv_sqrt[:, None] * a_tilde * d_inv_sqrt[None, :]


def shortest_paths(graph: Union[TrafficGraph, np.ndarray]):
    """Minimum-hop node sequences for every ordered pair.

    Breadth-first search expands neighbours in ascending index order, so among
    equally short paths the lexicographically smallest one is kept. Returns the
    path table (``None`` for unreachable pairs) and the hop-count matrix (-1).
    """
    adjacency = graph.adjacency if isinstance(graph, TrafficGraph) else graph
    n = adjacency.shape[0]
    neighbours = [np.flatnonzero(adjacency[i]).tolist() for i in range(n)]
    hop_count = np.full((n, n), -1, dtype=np.int64)
    table = []
    for source in range(n):
        parent = {source: None}
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for v in neighbours[u]:
                if v not in parent:
                    parent[v] = u
                    queue.append(v)
        row = []
        for target in range(n):
            if target not in parent:
                row.append(None)
                continue
            path = [target]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            path.reverse()
            hop_count[source, target] = len(path) - 1
            row.append(tuple(path))
        table.append(tuple(row))
    return tuple(table), hop_count


def _path_features(hop_paths, edge_features: np.ndarray) -> np.ndarray:
    n, _, width = edge_features.shape
    out = np.zeros((n, n, width))
    for i in range(n):
        for j in range(n):
            nodes = hop_paths[i][j]
            if nodes is None or len(nodes) < 2:
                continue
            src, dst = np.asarray(nodes[:-1]), np.asarray(nodes[1:])
            out[i, j] = edge_features[src, dst].mean(axis=0)
    return out


def graph_from_adjacency(
    adjacency: np.ndarray,
    edge_features: Optional[np.ndarray] = None,
    distances: Optional[np.ndarray] = None,
    mask_unreachable: bool = False,
) -> TrafficGraph:
    adjacency = np.asarray(adjacency, dtype=np.float64)
    if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
        raise ValidationError(f"adjacency must be square, got {adjacency.shape}")
    if np.any(adjacency < 0):
        i, j = np.argwhere(adjacency < 0)[0]
        raise ValidationError(f"negative adjacency weight at ({i}, {j})")
    if np.any(np.diag(adjacency) != 0):
        raise ValidationError("adjacency diagonal must be zero")
    if edge_features is None:
        edge_features = adjacency[:, :, None].copy()
    hop_paths, hop_count = shortest_paths(adjacency)
    edges = adjacency > 0
    return TrafficGraph(
        adjacency=adjacency,
        normalized=normalize_adjacency(adjacency),
        in_degree=edges.sum(axis=0).astype(np.int64),
        out_degree=edges.sum(axis=1).astype(np.int64),
        hop_count=hop_count,
        hop_paths=hop_paths,
        edge_features=edge_features,
        path_features=_path_features(hop_paths, edge_features),
        distances=distances,
        mask_unreachable=mask_unreachable,
    )


def gaussian_kernel(distances: np.ndarray, sigma2: float, eps: float, scale: float = 1.0) -> np.ndarray:
    distances = np.asarray(distances, dtype=np.float64)
    if sigma2 <= 0:
        raise ConfigError(f"kernel width sigma2 must be positive, got {sigma2}")
    if not 0.0 <= eps < 1.0:
        raise ConfigError(f"sparsity threshold eps must lie in [0, 1), got {eps}")
    bad = np.isnan(distances) | (distances < 0)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValidationError(f"invalid distance {distances[i, j]} at entry ({i}, {j})")
    with np.errstate(over="ignore"):
        weights = np.exp(-(distances ** 2) / scale / sigma2)
    weights[weights < eps] = 0.0
    np.fill_diagonal(weights, 0.0)
    return weights


def build_adjacency(
    distances: np.ndarray,
    sigma2: float,
    eps: float,
    scale: float = 1.0,
    mask_unreachable: bool = False,
) -> TrafficGraph:
    """Gaussian-kernel traffic graph; missing pairs carry an infinite distance."""
    adjacency = gaussian_kernel(distances, sigma2, eps, scale)
    return graph_from_adjacency(adjacency, distances=np.asarray(distances, dtype=np.float64),
                                mask_unreachable=mask_unreachable)


# ---------------------------------------------------------------------------
# file ingestion
# ---------------------------------------------------------------------------

def interpolate_series(series: np.ndarray) -> np.ndarray:
    """Fill NaNs linearly in time; boundary gaps take the nearest observation."""
    observed = np.isfinite(series)
    if observed.all():
        return series
    if not observed.any():
        raise UnrecoverableSeriesError("series has no observed values")
    steps = np.arange(series.shape[0])
    return np.interp(steps, steps[observed], series[observed])


def _read_csv(path: Union[str, Path]) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None


def _read_records(path: Union[str, Path], binary: bool) -> pd.DataFrame:
    if binary:
        try:
            raw = np.fromfile(path, dtype="<f8")
        except OSError as exc:
            raise ValidationError(f"cannot read {path}: {exc}") from None
        if raw.size % len(DATA_COLUMNS):
            raise ValidationError(f"{path}: {raw.size} values is not a whole number of records")
        return pd.DataFrame(raw.reshape(-1, len(DATA_COLUMNS)), columns=DATA_COLUMNS)
    frame = _read_csv(path)
    missing = [c for c in DATA_COLUMNS if c not in frame.columns]
    if missing:
        raise ValidationError(f"{path}: missing columns {missing}")
    return frame[DATA_COLUMNS]


def records_to_array(frame: pd.DataFrame) -> Tuple[np.ndarray, List[int], int]:
    """Pivot ``time,node_id,<features>`` records to a [N×F×T] array with NaN gaps."""
    frame = frame.astype({"time": np.int64, "node_id": np.int64})
    if frame.duplicated(["node_id", "time"]).any():
        dup = frame[frame.duplicated(["node_id", "time"])].iloc[0]
        raise ValidationError(f"duplicate record for node {dup.node_id} at time {dup.time}")
    node_ids = sorted(frame["node_id"].unique().tolist())
    first, last = int(frame["time"].min()), int(frame["time"].max())
    index = pd.MultiIndex.from_product([node_ids, range(first, last + 1)], names=["node_id", "time"])
    full = frame.set_index(["node_id", "time"]).reindex(index)[FEATURES]
    values = full.to_numpy(dtype=np.float64).reshape(len(node_ids), last - first + 1, len(FEATURES))
    return values.transpose(0, 2, 1).copy(), node_ids, first


def read_distances(path: Union[str, Path], node_ids: Sequence[int]) -> np.ndarray:
    frame = _read_csv(path)
    missing = [c for c in DISTANCE_COLUMNS if c not in frame.columns]
    if missing:
        raise ValidationError(f"{path}: missing columns {missing}")
    position = {node: i for i, node in enumerate(node_ids)}
    unknown = sorted((set(frame["from"].astype(int)) | set(frame["to"].astype(int))) - set(position))
    if unknown:
        raise ConsistencyError(
            f"distance file names {len(unknown)} nodes absent from the data (first: {unknown[:5]})"
        )
    n = len(node_ids)
    listed = set(frame["from"].astype(int)) | set(frame["to"].astype(int))
    uncovered = [node for node in node_ids if node not in listed]
    if n > 1 and uncovered:
        raise ConsistencyError(
            f"distance file has no rows for {len(uncovered)} stations in the data (first: {uncovered[:5]})"
        )
    distances = np.full((n, n), np.inf)
    np.fill_diagonal(distances, 0.0)
    for src, dst, miles in frame[DISTANCE_COLUMNS].itertuples(index=False):
        distances[position[int(src)], position[int(dst)]] = float(miles)
    return distances


def thin_stations(distances: np.ndarray, min_spacing: float) -> np.ndarray:
    """Indices of stations kept when neighbours closer than ``min_spacing`` are dropped."""
    closest = np.minimum(distances, distances.T)
    kept: List[int] = []
    for i in range(distances.shape[0]):
        if all(closest[i, j] >= min_spacing for j in kept):
            kept.append(i)
    return np.asarray(kept, dtype=np.int64)


def _split_index(num_steps: int, config: GraphConfig) -> int:
    if config.train_days is not None:
        split = config.train_days * config.day_slots()
    else:
        split = int(round(config.split_fraction * num_steps))
    if not 0 < split < num_steps:
        raise InsufficientDataError(f"split index {split} leaves no train or test data in {num_steps} steps")
    return split


def make_dataset(
    raw: np.ndarray,
    config: GraphConfig,
    node_ids: Optional[List[int]] = None,
    first_time: int = 0,
) -> TrafficDataset:
    """Interpolate gaps and subtract train-split feature means."""
    raw = np.array(raw, dtype=np.float64)
    nodes, features, steps = raw.shape
    for i in range(nodes):
        for f in range(features):
            try:
                raw[i, f] = interpolate_series(raw[i, f])
            except UnrecoverableSeriesError:
                label = node_ids[i] if node_ids else i
                raise UnrecoverableSeriesError(
                    f"node {label} feature {FEATURES[f] if f < len(FEATURES) else f} has no observed values"
                ) from None
    split = _split_index(steps, config)
    train = raw[:, :, :split]
    means = train.mean(axis=(0, 2))
    stds = train.std(axis=(0, 2))
    return TrafficDataset(
        values=raw - means[None, :, None],
        feature_means=means,
        feature_stds=stds,
        split=split,
        step_minutes=config.step_minutes,
        slots_per_day=config.day_slots(),
        first_time=first_time,
        feature_names=list(FEATURES[:features]),
        node_ids=list(node_ids) if node_ids is not None else list(range(nodes)),
    )


def load_dataset(
    data_path: Union[str, Path],
    distances_path: Union[str, Path],
    config: Optional[GraphConfig] = None,
) -> Tuple[TrafficDataset, TrafficGraph]:
    config = config or GraphConfig()
    raw, node_ids, first_time = records_to_array(_read_records(data_path, config.binary))
    distances = read_distances(distances_path, node_ids)
    if config.min_spacing_miles:
        kept = thin_stations(distances, config.min_spacing_miles)
        logger.info("Kept %d of %d stations at %.2f-mile spacing", len(kept), len(node_ids),
                    config.min_spacing_miles)
        raw, distances = raw[kept], distances[np.ix_(kept, kept)]
        node_ids = [node_ids[i] for i in kept]
    dataset = make_dataset(raw, config, node_ids, first_time)
    graph = build_adjacency(distances, config.sigma2, config.eps, config.distance_scale,
                            mask_unreachable=config.mask_unreachable)
    logger.info("Loaded %d nodes x %d features x %d steps, %d edges, split at %d",
                dataset.num_nodes, dataset.num_features, dataset.num_steps,
                len(graph.edges), dataset.split)
    return dataset, graph


def make_windows(
    dataset: TrafficDataset,
    history: int,
    horizon: int,
    target_features: Sequence[int] = (0,),
) -> WindowSet:
    """Stride-1 windows; a window whose target straddles the split belongs to neither side."""
    if history < 1 or horizon < 1:
        raise ConfigError(f"history ({history}) and horizon ({horizon}) must be at least 1")
    steps = dataset.num_steps
    if history + horizon > steps:
        raise InsufficientDataError(f"history {history} + horizon {horizon} exceeds {steps} steps")
    target_features = list(target_features)
    lo = target_features[0]
    contiguous = target_features == list(range(lo, lo + len(target_features)))
    values = dataset.values
    windows = WindowSet(train=[], test=[], excluded=0)
    for t0 in range(history, steps - horizon + 1):
        block = values[:, :, t0:t0 + horizon]
        target = block[:, lo:lo + len(target_features)] if contiguous else block[:, target_features]
        sample = WindowSample(history=values[:, :, t0 - history:t0], target=target, t0=t0)
        if t0 + horizon <= dataset.split:
            windows.train.append(sample)
        elif t0 >= dataset.split:
            windows.test.append(sample)
        else:
            windows.excluded += 1
    return windows


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------

SYNTH_EQUATIONS = """\
s(t)      = t mod P
base_i(t) = a_i + b_i * sin(2*pi*s(t)/P + phi_i)
x_i(t)    = base_i(t) + kappa * mean_{j in N(i)} base_j(t - 1)
          + gamma * z_k(t)        for the leading node u of planted pair k
          + gamma * z_k(t - lag)  for the trailing node v of planted pair k
z_k(t)    = rho * z_k(t - 1) + sqrt(1 - rho^2) * xi_k(t),  xi ~ N(0, 1)
flow      = 200 + 50 * (x + noise * e_flow)
speed     = 60 - 5 * (x + noise * e_speed)
occupancy = 0.1 + 0.02 * (x + noise * e_occ),  e ~ N(0, 1)
"""

FEATURE_MAPS = np.array([[200.0, 50.0], [60.0, -5.0], [0.1, 0.02]])


@dataclass
class SynthConfig:
    nodes: int = 24
    steps: int = 2000
    long_range_pairs: Optional[List[Tuple[int, int]]] = None
    num_pairs: int = 3
    min_pair_hops: int = 3
    noise: float = 0.1
    seed: int = 0
    period: int = 48
    radius: float = 0.3
    diffusion: float = 0.4
    latent_scale: float = 1.0
    pair_lag: int = 3
    ar_coef: float = 0.95
    miles_per_unit: float = 10.0
    kernel_eps: float = 0.0
    split_fraction: float = 0.8


def _geometric_graph(config: SynthConfig) -> Tuple[nx.Graph, np.ndarray]:
    g = nx.random_geometric_graph(config.nodes, config.radius, seed=config.seed)
    pos = np.array([g.nodes[i]["pos"] for i in range(config.nodes)])
    # join components through their closest node pair until the graph is connected
    while not nx.is_connected(g):
        components = sorted((sorted(c) for c in nx.connected_components(g)), key=lambda c: c[0])
        base, rest = components[0], [v for c in components[1:] for v in c]
        gaps = np.linalg.norm(pos[base][:, None] - pos[rest][None], axis=-1)
        i, j = np.unravel_index(np.argmin(gaps), gaps.shape)
        g.add_edge(base[i], rest[j])
    return g, pos


def _choose_pairs(config: SynthConfig, hops: np.ndarray, rng: np.random.Generator) -> List[Tuple[int, int]]:
    if config.long_range_pairs is not None:
        pairs = [tuple(p) for p in config.long_range_pairs]
        for u, v in pairs:
            if hops[u, v] == 1:
                logger.warning("long-range pair (%d, %d) is graph-adjacent; it tests nothing", u, v)
        return pairs
    used, pairs = set(), []
    candidates = [(u, v) for u in range(config.nodes) for v in range(u + 1, config.nodes)
                  if hops[u, v] >= config.min_pair_hops]
    for k in rng.permutation(len(candidates)):
        if len(pairs) == config.num_pairs:
            break
        u, v = candidates[k]
        if u not in used and v not in used:
            pairs.append((u, v))
            used.update((u, v))
    if len(pairs) < config.num_pairs:
        raise ConfigError(
            f"could not place {config.num_pairs} pairs at least {config.min_pair_hops} hops apart"
        )
    return pairs


def synth_generate(config: SynthConfig) -> Tuple[TrafficDataset, TrafficGraph]:
    rng = np.random.default_rng(config.seed)
    g, pos = _geometric_graph(config)
    n, steps, period = config.nodes, config.steps, config.period

    distances = np.full((n, n), np.inf)
    np.fill_diagonal(distances, 0.0)
    for u, v in g.edges():
        distances[u, v] = distances[v, u] = config.miles_per_unit * np.linalg.norm(pos[u] - pos[v])
    finite = distances[np.isfinite(distances) & (distances > 0)]
    sigma2 = float(np.mean(finite ** 2)) if finite.size else 1.0
    graph = build_adjacency(distances, sigma2, config.kernel_eps)
    pairs = _choose_pairs(config, graph.hop_count, rng)

    amplitude_offset = rng.uniform(-0.5, 0.5, size=n)
    amplitude = rng.uniform(0.5, 1.0, size=n)
    phase = rng.uniform(0.0, 2 * np.pi, size=n)
    slots = np.arange(steps) % period
    prev_slots = (np.arange(steps) - 1) % period
    base = amplitude_offset[:, None] + amplitude[:, None] * np.sin(2 * np.pi * slots / period + phase[:, None])
    prev = amplitude_offset[:, None] + amplitude[:, None] * np.sin(2 * np.pi * prev_slots / period + phase[:, None])
    neighbours = (graph.adjacency > 0).astype(np.float64)
    degree = np.maximum(neighbours.sum(axis=1, keepdims=True), 1.0)
    x = base + config.diffusion * (neighbours @ prev) / degree

    lag = config.pair_lag
    for u, v in pairs:
        z = np.empty(steps + lag)
        z[0] = rng.standard_normal()
        shocks = rng.standard_normal(steps + lag) * np.sqrt(1 - config.ar_coef ** 2)
        for t in range(1, steps + lag):
            z[t] = config.ar_coef * z[t - 1] + shocks[t]
        x[u] += config.latent_scale * z[lag:]
        x[v] += config.latent_scale * z[:steps]

    raw = np.empty((n, len(FEATURES), steps))
    for f, (offset, gain) in enumerate(FEATURE_MAPS):
        noise = config.noise * rng.standard_normal((n, steps)) if config.noise > 0 else 0.0
        raw[:, f] = offset + gain * (x + noise)

    graph_config = GraphConfig(split_fraction=config.split_fraction, slots_per_day=period)
    dataset = make_dataset(raw, graph_config)
    logger.info("Generated %d nodes x %d steps with planted pairs %s", n, steps, pairs)
    return dataset, replace(graph, planted_pairs=tuple(pairs))


def write_synthetic(out_dir: Union[str, Path], dataset: TrafficDataset, graph: TrafficGraph,
                    config: SynthConfig) -> List[Path]:
    """Write data.csv, distances.csv and manifest.json in the ingestion formats."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = dataset.raw_values()
    n, _, steps = raw.shape
    records = pd.DataFrame({
        "time": np.tile(np.arange(steps), n),
        "node_id": np.repeat(np.arange(n), steps),
        **{name: raw[:, f].reshape(-1) for f, name in enumerate(FEATURES)},
    })
    data_path = out_dir / "data.csv"
    records.to_csv(data_path, index=False, float_format="%.17g")

    src, dst = np.nonzero(np.isfinite(graph.distances) & ~np.eye(n, dtype=bool))
    distances_path = out_dir / "distances.csv"
    pd.DataFrame({"from": src, "to": dst, "distance_miles": graph.distances[src, dst]}).to_csv(
        distances_path, index=False, float_format="%.17g")

    finite = graph.distances[src, dst]
    manifest = {
        "seed": config.seed,
        "generator": asdict(config) | {"long_range_pairs": [list(p) for p in graph.planted_pairs]},
        "graph": {
            "sigma2": float(np.mean(finite ** 2)) if finite.size else 1.0,
            "eps": config.kernel_eps,
            "distance_scale": 1.0,
            "split_fraction": config.split_fraction,
            "slots_per_day": config.period,
        },
        "equations": SYNTH_EQUATIONS,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return [data_path, distances_path, manifest_path]
