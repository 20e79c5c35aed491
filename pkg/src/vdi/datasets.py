"""Multi-domain datasets: Circle, DG-15/DG-60 generators and TPT-48 ingestion.

Ground-truth domain indices and graphs live in :class:`GroundTruth`, which the
training loop never receives (see :meth:`MultiDomainDataset.without_truth`).
"""
from __future__ import annotations

import csv
import json
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay

log = logging.getLogger(__name__)

# Circle: 30 domains on a half circle; label 1 outside the circle.
CIRCLE_DOMAINS = 30
CIRCLE_POINTS = 100
CIRCLE_RADIUS = 3.0
CIRCLE_RADIAL_STD = 0.5
CIRCLE_TANGENT_STD = 0.2
CIRCLE_SOURCES = 6

# DG-15 / DG-60: each domain holds two class clusters on either side of a line
# through its graph node; the line's normal angle grows smoothly left to right.
DG_POINTS = 100
DG_CLUSTER_OFFSET = 0.4
DG_NORMAL_STD = 0.15
DG_LINE_STD = 0.15
DG_SOURCES = 6
DG15_LAYOUT = np.array([
    [0.0, 0.0], [0.2, 1.1], [0.1, 2.2],
    [1.1, -0.2], [1.0, 0.9], [1.2, 2.0],
    [2.1, 0.1], [2.2, 1.2], [2.0, 2.3],
    [3.2, -0.1], [3.0, 1.0], [3.1, 2.1],
    [4.1, 0.2], [4.2, 1.1], [4.0, 2.2],
])
DG15_MAX_EDGE = 1.35
DG60_SIDE = 7.0
DG60_MAX_EDGE = 1.5
DG60_MIN_GAP = 0.55


@dataclass
class GroundTruth:
    index: np.ndarray | None = None       # (N,) or (N, d) true domain index
    graph: np.ndarray | None = None       # (N, N) 0/1 adjacency
    levels: np.ndarray | None = None      # (N,) hop level of each target domain, 0 for sources
    positions: np.ndarray | None = None   # (N, 2) layout used to draw the graph
    names: list[str] | None = None


@dataclass
class NormStats:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray | None = None
    y_std: np.ndarray | None = None
    clamped: list[str] = field(default_factory=list)


@dataclass
class MultiDomainDataset:
    name: str
    x: np.ndarray
    y: np.ndarray                 # int labels (M,) or real targets (M, d)
    k: np.ndarray                 # (M,) domain identity in [0, N)
    n_domains: int
    source_domains: np.ndarray    # sorted ids in K_s
    task: str = "classification"
    n_classes: int = 2
    truth: GroundTruth | None = None
    norm: NormStats | None = None

    def __post_init__(self):
        if len(self.x) != len(self.y) or len(self.x) != len(self.k):
            raise ValueError("x, y and k must have the same number of rows")
        if self.k.min() < 0 or self.k.max() >= self.n_domains:
            raise ValueError("domain identities out of range")

    @property
    def x_dim(self) -> int:
        return self.x.shape[1]

    @property
    def y_dim(self) -> int:
        return 1 if self.y.ndim == 1 else self.y.shape[1]

    @property
    def source_mask(self) -> np.ndarray:
        return np.isin(self.k, self.source_domains)

    @property
    def target_domains(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_domains), self.source_domains)

    def domain_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.k == k)

    def without_truth(self) -> MultiDomainDataset:
        return replace(self, truth=None)


# ---------------------------------------------------------------------------
# synthetic generators


def gen_circle(seed: int = 0) -> MultiDomainDataset:
    rng = np.random.default_rng(seed)
    xs, ys, ks = [], [], []
    angles = np.pi * np.arange(CIRCLE_DOMAINS) / (CIRCLE_DOMAINS - 1)
    for d, theta in enumerate(angles):
        radial = np.array([np.cos(theta), np.sin(theta)])
        tangent = np.array([-np.sin(theta), np.cos(theta)])
        r = rng.normal(0.0, CIRCLE_RADIAL_STD, CIRCLE_POINTS)
        t = rng.normal(0.0, CIRCLE_TANGENT_STD, CIRCLE_POINTS)
        pts = CIRCLE_RADIUS * radial + r[:, None] * radial + t[:, None] * tangent
        xs.append(pts)
        ys.append((np.linalg.norm(pts, axis=1) > CIRCLE_RADIUS).astype(np.int64))
        ks.append(np.full(CIRCLE_POINTS, d))
    return MultiDomainDataset(
        name="circle",
        x=np.concatenate(xs),
        y=np.concatenate(ys),
        k=np.concatenate(ks),
        n_domains=CIRCLE_DOMAINS,
        source_domains=np.arange(CIRCLE_SOURCES),
        truth=GroundTruth(index=angles, positions=CIRCLE_RADIUS * np.c_[np.cos(angles), np.sin(angles)]),
    )


def _delaunay_graph(pos: np.ndarray, max_edge: float) -> np.ndarray:
    n = len(pos)
    adj = np.zeros((n, n), dtype=np.int64)
    for simplex in Delaunay(pos).simplices:
        for a in range(3):
            for b in range(a + 1, 3):
                i, j = simplex[a], simplex[b]
                if np.linalg.norm(pos[i] - pos[j]) <= max_edge:
                    adj[i, j] = adj[j, i] = 1
    return adj


def is_connected(adj: np.ndarray, nodes=None) -> bool:
    nodes = list(range(len(adj))) if nodes is None else list(nodes)
    if not nodes:
        return True
    allowed = set(nodes)
    seen = {nodes[0]}
    queue = deque([nodes[0]])
    while queue:
        a = queue.popleft()
        for b in np.flatnonzero(adj[a]):
            if b in allowed and b not in seen:
                seen.add(int(b))
                queue.append(int(b))
    return len(seen) == len(allowed)


def hop_distances(adj: np.ndarray, sources) -> np.ndarray:
    dist = np.full(len(adj), -1)
    queue = deque()
    for s in sources:
        dist[s] = 0
        queue.append(int(s))
    while queue:
        a = queue.popleft()
        for b in np.flatnonzero(adj[a]):
            if dist[b] < 0:
                dist[b] = dist[a] + 1
                queue.append(int(b))
    return dist


def _pick_sources(adj: np.ndarray, pos: np.ndarray, n_src: int) -> np.ndarray:
    """BFS from the left-most node, nearest neighbours first, until n_src nodes."""
    start = int(np.argmin(pos[:, 0]))
    chosen = [start]
    frontier = set(np.flatnonzero(adj[start]).tolist())
    while len(chosen) < n_src:
        nxt = min(frontier, key=lambda j: (pos[j, 0], j))
        chosen.append(nxt)
        frontier |= set(np.flatnonzero(adj[nxt]).tolist())
        frontier -= set(chosen)
    return np.array(sorted(chosen))


def _poisson_disk(rng: np.random.Generator, n: int, side: float, gap: float) -> np.ndarray:
    pts: list[np.ndarray] = []
    while len(pts) < n:
        p = rng.uniform(0.0, side, 2)
        if all(np.linalg.norm(p - q) >= gap for q in pts):
            pts.append(p)
    return np.array(pts)


def gen_dg(n_domains: int, seed: int = 0) -> MultiDomainDataset:
    if n_domains not in (15, 60):
        raise ValueError(f"gen_dg: n_domains must be 15 or 60, got {n_domains}")
    rng = np.random.default_rng(seed)
    if n_domains == 15:
        pos = DG15_LAYOUT.copy()
        adj = _delaunay_graph(pos, DG15_MAX_EDGE)
    else:
        while True:
            pos = _poisson_disk(rng, 60, DG60_SIDE, DG60_MIN_GAP)
            adj = _delaunay_graph(pos, DG60_MAX_EDGE)
            if is_connected(adj):
                break
    span = pos[:, 0].max() - pos[:, 0].min()
    omega = np.pi * (pos[:, 0] - pos[:, 0].min()) / span
    xs, ys, ks = [], [], []
    for d in range(n_domains):
        normal = np.array([np.cos(omega[d]), np.sin(omega[d])])
        along = np.array([-normal[1], normal[0]])
        side = 2 * (np.arange(DG_POINTS) % 2) - 1
        a = side * DG_CLUSTER_OFFSET + rng.normal(0.0, DG_NORMAL_STD, DG_POINTS)
        b = rng.normal(0.0, DG_LINE_STD, DG_POINTS)
        xs.append(pos[d] + a[:, None] * normal + b[:, None] * along)
        ys.append((a > 0).astype(np.int64))
        ks.append(np.full(DG_POINTS, d))
    sources = _pick_sources(adj, pos, DG_SOURCES)
    return MultiDomainDataset(
        name=f"dg{n_domains}",
        x=np.concatenate(xs),
        y=np.concatenate(ys),
        k=np.concatenate(ks),
        n_domains=n_domains,
        source_domains=sources,
        truth=GroundTruth(index=omega, graph=adj, positions=pos),
    )


# ---------------------------------------------------------------------------
# TPT-48

STATES = {
    # state: (latitude, longitude, neighbours)
    "AL": (32.8, -86.8, "FL GA MS TN"),
    "AZ": (34.3, -111.7, "CA NV UT NM"),
    "AR": (34.9, -92.4, "LA MS MO OK TN TX"),
    "CA": (37.2, -119.5, "AZ NV OR"),
    "CO": (39.0, -105.5, "KS NE NM OK UT WY"),
    "CT": (41.6, -72.7, "MA NY RI"),
    "DE": (39.0, -75.5, "MD NJ PA"),
    "FL": (28.6, -82.4, "AL GA"),
    "GA": (32.7, -83.4, "AL FL NC SC TN"),
    "ID": (44.4, -114.6, "MT NV OR UT WA WY"),
    "IL": (40.0, -89.2, "IN IA KY MO WI"),
    "IN": (39.9, -86.3, "IL KY MI OH"),
    "IA": (42.1, -93.5, "IL MN MO NE SD WI"),
    "KS": (38.5, -98.4, "CO MO NE OK"),
    "KY": (37.5, -85.3, "IL IN MO OH TN VA WV"),
    "LA": (31.1, -92.0, "AR MS TX"),
    "ME": (45.4, -69.2, "NH"),
    "MD": (39.0, -76.8, "DE PA VA WV"),
    "MA": (42.3, -71.8, "CT NH NY RI VT"),
    "MI": (44.3, -85.4, "IN OH WI"),
    "MN": (46.3, -94.3, "IA ND SD WI"),
    "MS": (32.7, -89.7, "AL AR LA TN"),
    "MO": (38.4, -92.5, "AR IL IA KS KY NE OK TN"),
    "MT": (47.0, -109.6, "ID ND SD WY"),
    "NE": (41.5, -99.8, "CO IA KS MO SD WY"),
    "NV": (39.3, -116.6, "AZ CA ID OR UT"),
    "NH": (43.7, -71.6, "ME MA VT"),
    "NJ": (40.2, -74.7, "DE NY PA"),
    "NM": (34.4, -106.1, "AZ CO OK TX"),
    "NY": (42.9, -75.5, "CT MA NJ PA VT"),
    "NC": (35.6, -79.4, "GA SC TN VA"),
    "ND": (47.5, -100.5, "MN MT SD"),
    "OH": (40.3, -82.8, "IN KY MI PA WV"),
    "OK": (35.6, -97.5, "AR CO KS MO NM TX"),
    "OR": (43.9, -120.6, "CA ID NV WA"),
    "PA": (40.9, -77.8, "DE MD NJ NY OH WV"),
    "RI": (41.7, -71.5, "CT MA"),
    "SC": (33.9, -80.9, "GA NC"),
    "SD": (44.4, -100.2, "IA MN MT NE ND WY"),
    "TN": (35.9, -86.4, "AL AR GA KY MS MO NC VA"),
    "TX": (31.5, -99.3, "AR LA NM OK"),
    "UT": (39.3, -111.7, "AZ CO ID NV WY"),
    "VT": (44.1, -72.7, "MA NH NY"),
    "VA": (37.5, -78.9, "KY MD NC TN WV"),
    "WA": (47.4, -120.5, "ID OR"),
    "WV": (38.6, -80.6, "KY MD OH PA VA"),
    "WI": (44.6, -89.9, "IL IA MI MN"),
    "WY": (43.0, -107.6, "CO ID MT NE SD UT"),
}
STATE_NAMES = sorted(STATES)
TPT_TASKS = {
    "W6E42": ["WA", "OR", "CA", "NV", "ID", "UT"],
    # the 24 states with the highest centroid latitude
    "N24S24": sorted(STATE_NAMES, key=lambda s: -STATES[s][0])[:24],
}
TPT_YEARS = range(2008, 2020)
TPT_MONTHS = 12 * len(TPT_YEARS)
TPT_WINDOW = 12


def state_graph() -> np.ndarray:
    idx = {s: i for i, s in enumerate(STATE_NAMES)}
    adj = np.zeros((48, 48), dtype=np.int64)
    for s, (_, _, nbrs) in STATES.items():
        for t in nbrs.split():
            adj[idx[s], idx[t]] = adj[idx[t], idx[s]] = 1
    return adj


def read_tpt48_csv(path) -> dict[str, np.ndarray]:
    """Monthly series per state from ``state,year,month,temperature`` rows."""
    series = {s: np.full(TPT_MONTHS, np.nan) for s in STATE_NAMES}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        want = {"state", "year", "month", "temperature"}
        if reader.fieldnames is None or not want <= set(reader.fieldnames):
            raise ValueError(f"{path}: header must contain {sorted(want)}, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                state = row["state"].strip()
                year, month = int(row["year"]), int(row["month"])
                temp = float(row["temperature"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row {row}: {exc}") from None
            if state not in series:
                raise ValueError(f"{path}:{lineno}: unknown state {state!r}")
            if year not in TPT_YEARS or not 1 <= month <= 12:
                raise ValueError(f"{path}:{lineno}: year/month out of range: {year}-{month}")
            series[state][(year - TPT_YEARS.start) * 12 + month - 1] = temp
    missing = [(s, TPT_YEARS.start + i // 12, i % 12 + 1)
               for s, v in series.items() for i in np.flatnonzero(np.isnan(v))]
    if missing:
        head = ", ".join(f"{s} {y}-{m:02d}" for s, y, m in missing[:5])
        raise ValueError(f"{path}: {len(missing)} missing state-months, e.g. {head}")
    return series


def load_tpt48(csv_path, task: str = "W6E42") -> MultiDomainDataset:
    """Sliding 12-month windows: months 1-6 are inputs, months 7-12 targets.

    Each series is edge-padded by 11 months so a stride-1 window starts at
    every one of the 144 months: 48 x 144 = 6912 rows.
    """
    if task not in TPT_TASKS:
        raise ValueError(f"unknown TPT-48 task {task!r}; choose from {sorted(TPT_TASKS)}")
    series = read_tpt48_csv(csv_path)
    xs, ys, ks = [], [], []
    for d, state in enumerate(STATE_NAMES):
        padded = np.pad(series[state], (0, TPT_WINDOW - 1), mode="edge")
        windows = np.lib.stride_tricks.sliding_window_view(padded, TPT_WINDOW)[:TPT_MONTHS]
        xs.append(windows[:, :6])
        ys.append(windows[:, 6:])
        ks.append(np.full(len(windows), d))
    adj = state_graph()
    sources = np.array(sorted(STATE_NAMES.index(s) for s in TPT_TASKS[task]))
    hops = hop_distances(adj, sources)
    levels = np.minimum(hops, 3)
    lat_lon = np.array([STATES[s][:2] for s in STATE_NAMES])
    return MultiDomainDataset(
        name=f"tpt48-{task}",
        x=np.concatenate(xs),
        y=np.concatenate(ys),
        k=np.concatenate(ks),
        n_domains=48,
        source_domains=sources,
        task="regression",
        n_classes=0,
        truth=GroundTruth(index=lat_lon, graph=adj, levels=levels,
                          positions=lat_lon[:, ::-1], names=list(STATE_NAMES)),
    )


def write_tpt48_surrogate(path, seed: int = 0) -> Path:
    """Write a synthetic climate CSV in the TPT-48 input schema.

    Monthly means follow a seasonal cycle whose level falls with latitude and
    altitude and whose amplitude grows with latitude and distance from the
    coasts, plus spatially smooth year-to-year anomalies and local noise.
    It stands in for the real NOAA series, which are not bundled.
    """
    rng = np.random.default_rng(seed)
    lat = np.array([STATES[s][0] for s in STATE_NAMES])
    lon = np.array([STATES[s][1] for s in STATE_NAMES])
    mountain = np.array([s in {"CO", "WY", "UT", "MT", "ID", "NV"} for s in STATE_NAMES])
    inland = np.exp(-((lon + 97.0) / 14.0) ** 2)
    west_coast = np.exp(-((lon + 121.0) / 5.0) ** 2)
    annual_mean = 71.0 - 1.45 * (lat - 28.6) - 7.0 * mountain + 3.0 * west_coast
    amplitude = 9.0 + 0.75 * (lat - 28.6) + 7.0 * inland - 5.0 * west_coast
    lag = 0.35 + 0.4 * west_coast  # months
    # smooth anomaly fields: a few random planar waves over (lat, lon)
    n_waves = 6
    kx = rng.normal(0.0, 0.08, n_waves)
    ky = rng.normal(0.0, 0.08, n_waves)
    phase_field = rng.uniform(0, 2 * np.pi, n_waves)
    basis = np.cos(np.outer(lat, kx) + np.outer(lon, ky) + phase_field) / np.sqrt(n_waves)
    rows = []
    t = np.arange(TPT_MONTHS)
    month = t % 12
    coef = rng.normal(0.0, 2.5, size=(TPT_MONTHS, n_waves))
    # anomalies persist for a couple of months
    for i in range(1, TPT_MONTHS):
        coef[i] = 0.6 * coef[i - 1] + 0.8 * coef[i]
    anomaly = coef @ basis.T  # (months, states)
    for d, state in enumerate(STATE_NAMES):
        seasonal = -np.cos(2 * np.pi * (month - lag[d]) / 12.0)
        temp = annual_mean[d] + amplitude[d] * seasonal + anomaly[:, d] + rng.normal(0, 1.2, TPT_MONTHS)
        for i in t:
            rows.append((state, TPT_YEARS.start + i // 12, i % 12 + 1, round(float(temp[i]), 2)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["state", "year", "month", "temperature"])
        w.writerows(rows)
    return path


# ---------------------------------------------------------------------------
# normalisation


def normalize(ds: MultiDomainDataset, stats: NormStats | None = None) -> tuple[MultiDomainDataset, NormStats]:
    """Standardise x (and regression y) with global per-feature mean/std.

    A dataset that already carries stats is returned unchanged.
    """
    if ds.norm is not None:
        return ds, ds.norm
    if stats is None:
        x_mean, x_std = ds.x.mean(axis=0), ds.x.std(axis=0)
        clamped = [f"x_{i}" for i in np.flatnonzero(x_std < 1e-12)]
        x_std = np.where(x_std < 1e-12, 1.0, x_std)
        y_mean = y_std = None
        if ds.task == "regression":
            y_mean, y_std = ds.y.mean(axis=0), ds.y.std(axis=0)
            clamped += [f"y_{i}" for i in np.flatnonzero(np.atleast_1d(y_std) < 1e-12)]
            y_std = np.where(y_std < 1e-12, 1.0, y_std)
        if clamped:
            log.warning("zero-variance features clamped to unit std: %s", clamped)
        stats = NormStats(x_mean, x_std, y_mean, y_std, clamped)
    x = (ds.x - stats.x_mean) / stats.x_std
    y = ds.y if stats.y_mean is None else (ds.y - stats.y_mean) / stats.y_std
    return replace(ds, x=x, y=y, norm=stats), stats


def denormalize_x(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return x * stats.x_std + stats.x_mean


def denormalize_y(y: np.ndarray, stats: NormStats) -> np.ndarray:
    if stats.y_mean is None:
        return y
    return y * stats.y_std + stats.y_mean


# ---------------------------------------------------------------------------
# CSV export / import


def _truth_to_json(t: GroundTruth | None) -> dict | None:
    if t is None:
        return None
    out = {}
    for key in ("index", "graph", "levels", "positions"):
        v = getattr(t, key)
        out[key] = None if v is None else np.asarray(v).tolist()
    out["names"] = t.names
    return out


def _truth_from_json(d: dict | None) -> GroundTruth | None:
    if d is None:
        return None
    kw = {k: (None if d.get(k) is None else np.asarray(d[k])) for k in ("index", "graph", "levels", "positions")}
    return GroundTruth(names=d.get("names"), **kw)


def save_dataset(ds: MultiDomainDataset, path) -> Path:
    """CSV ``x_0..x_{Bx-1},y,k,is_source`` plus a ``.meta.json`` sidecar.

    Regression targets with several outputs use columns ``y_0..y_{d-1}``.
    """
    path = Path(path)
    y_cols = ["y"] if ds.y.ndim == 1 else [f"y_{i}" for i in range(ds.y_dim)]
    src = ds.source_mask
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x_{i}" for i in range(ds.x_dim)] + y_cols + ["k", "is_source"])
        y2 = ds.y[:, None] if ds.y.ndim == 1 else ds.y
        for xi, yi, ki, si in zip(ds.x, y2, ds.k, src):
            w.writerow([repr(float(v)) for v in xi] + [repr(v.item()) for v in yi] + [int(ki), int(si)])
    meta = {
        "name": ds.name,
        "n_domains": ds.n_domains,
        "source_domains": ds.source_domains.tolist(),
        "task": ds.task,
        "n_classes": ds.n_classes,
        "truth": _truth_to_json(ds.truth),
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(meta))
    return path


def load_dataset(path) -> MultiDomainDataset:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".meta.json").read_text())
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    x_idx = [i for i, h in enumerate(header) if h.startswith("x_")]
    y_idx = [i for i, h in enumerate(header) if h == "y" or h.startswith("y_")]
    k_idx = header.index("k")
    arr = np.array(rows, dtype=object)
    x = arr[:, x_idx].astype(np.float64)
    if meta["task"] == "classification":
        y = arr[:, y_idx[0]].astype(np.float64).astype(np.int64)
    else:
        y = arr[:, y_idx].astype(np.float64)
        if header[y_idx[0]] == "y":
            y = y[:, 0]
    return MultiDomainDataset(
        name=meta["name"],
        x=x,
        y=y,
        k=arr[:, k_idx].astype(np.int64),
        n_domains=meta["n_domains"],
        source_domains=np.array(meta["source_domains"], dtype=np.int64),
        task=meta["task"],
        n_classes=meta["n_classes"],
        truth=_truth_from_json(meta["truth"]),
    )


def make_dataset(name: str, seed: int = 0, csv_path=None) -> MultiDomainDataset:
    """Build a dataset by name: circle, dg15, dg60, tpt48-W6E42, tpt48-N24S24."""
    if name == "circle":
        return gen_circle(seed)
    if name in ("dg15", "dg60"):
        return gen_dg(int(name[2:]), seed)
    if name.startswith("tpt48"):
        task = name.split("-", 1)[1] if "-" in name else "W6E42"
        if csv_path is None:
            raise ValueError("TPT-48 needs csv_path")
        return load_tpt48(csv_path, task)
    raise ValueError(f"unknown dataset {name!r}")
