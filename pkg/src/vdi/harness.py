"""Training loop, Source-Only baseline, evaluation metrics and checkpoints."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import MultiDomainDataset, NormStats, denormalize_y, make_dataset, normalize
from .model import DomainBatch, VdiConfig, VdiModel
from .nn import AdamState, Mlp, NonFiniteGradient, adam_step, zero_grad

log = logging.getLogger(__name__)

LR_RANGE = (1e-5, 1e-4)
WARMUP_RANGE = (20, 70)
LAMBDA_RANGE = (0.1, 1.0)


class Divergence(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class TrainConfig:
    dataset: str = "circle"
    seed: int = 0
    data_seed: int = 0
    csv_path: str | None = None
    lr: float = 1e-4
    warmup_steps: int = 50
    lambda_d: float = 0.5
    batch_per_domain: int = 32
    max_steps: int = 2000
    eval_every: int = 500
    out_dir: str | None = None
    allow_out_of_range: bool = False
    # model
    u_dim: int = 4
    beta_dim: int = 2
    z_dim: int = 8
    hidden: tuple[int, ...] = (64, 64)
    contrastive_weight: float = 1.0
    tau: float = 1.0
    sigma_x: float = 0.1
    sigma_u: float = 0.1
    index_momentum: float = 0.9
    init_log_sigma: float = -2.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.allow_out_of_range:
            return
        checks = [("lr", self.lr, LR_RANGE), ("warmup_steps", self.warmup_steps, WARMUP_RANGE),
                  ("lambda_d", self.lambda_d, LAMBDA_RANGE)]
        for name, val, (lo, hi) in checks:
            if not lo <= val <= hi:
                raise ValueError(f"{name}={val} outside [{lo}, {hi}]; set allow_out_of_range to override")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    if "," in raw:
        return [_parse_value(p) for p in raw.split(",") if p.strip()]
    for conv in (int, float):
        try:
            return conv(raw)
        except ValueError:
            pass
    return raw


def load_config(path) -> TrainConfig:
    """Flat ``key = value`` file; ``#`` comments; lists are comma-separated."""
    text = Path(path).read_text(encoding="utf-8")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[run]\n" + text)
    d = {k: _parse_value(v) for k, v in parser["run"].items()}
    if "hidden" in d and not isinstance(d["hidden"], list):
        d["hidden"] = [d["hidden"]]
    return TrainConfig.from_dict(d)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(i) for i in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class RunReport:
    history: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    beta: list[list[float]] = field(default_factory=list)
    graph_auc: float | None = None
    index_correlation: float | None = None
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def canonical(self) -> dict:
        """Everything except timing, for reproducibility comparisons."""
        d = dataclasses.asdict(self)
        d.pop("wall_clock")
        return d

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> RunReport:
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# model construction and batching


def model_config_for(cfg: TrainConfig, ds: MultiDomainDataset) -> VdiConfig:
    return VdiConfig(
        x_dim=ds.x_dim, n_domains=ds.n_domains, task=ds.task,
        n_classes=max(ds.n_classes, 2) if ds.task == "classification" else 0,
        y_dim=ds.y_dim, u_dim=cfg.u_dim, beta_dim=cfg.beta_dim, z_dim=cfg.z_dim,
        hidden=cfg.hidden, lambda_d=cfg.lambda_d, tau=cfg.tau,
        contrastive_weight=cfg.contrastive_weight, sigma_x=cfg.sigma_x, sigma_u=cfg.sigma_u,
        index_momentum=cfg.index_momentum, init_log_sigma=cfg.init_log_sigma,
    )


def sample_batch(ds: MultiDomainDataset, b: int, rng: np.random.Generator,
                 rows_by_domain: list[np.ndarray] | None = None) -> DomainBatch:
    """b rows from every domain, grouped domain-major."""
    if rows_by_domain is None:
        rows_by_domain = [ds.domain_rows(kk) for kk in range(ds.n_domains)]
    idx = np.concatenate([rng.choice(r, size=b, replace=len(r) < b) for r in rows_by_domain])
    src = ds.source_mask[idx]
    return DomainBatch(x=ds.x[idx], k=ds.k[idx], y=ds.y[idx], source_mask=src, per_domain=b)


def prepare_dataset(cfg: TrainConfig) -> tuple[MultiDomainDataset, NormStats]:
    ds = make_dataset(cfg.dataset, cfg.data_seed, cfg.csv_path)
    return normalize(ds)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    model: VdiModel
    opt: AdamState
    rng: np.random.Generator
    step: int = 0


def _snapshot(model: VdiModel) -> dict:
    return {"params": {n: p.data.copy() for n, p in model.named_parameters().items()},
            "ref": None if model.index_reference is None else model.index_reference.copy()}


def _restore(model: VdiModel, snap: dict) -> None:
    for n, p in model.named_parameters().items():
        p.data[...] = snap["params"][n]
    model.index_reference = snap["ref"]


def train(cfg: TrainConfig, ds: MultiDomainDataset | None = None, stats: NormStats | None = None,
          source_only: bool = False, checkpoint_path=None) -> tuple[RunReport, TrainState]:
    """Optimise the model on ``ds`` (normalised) and return a report and final state.

    Each step samples ``batch_per_domain`` rows per domain, encodes them,
    recomputes global indices from the batch's local indices, and takes one
    Adam step. The adversarial term is off for the first ``warmup_steps``.
    """
    t0 = time.perf_counter()
    if ds is None:
        ds, stats = prepare_dataset(cfg)
    full = ds
    train_ds = ds.without_truth()
    rng = np.random.default_rng(cfg.seed)
    model = VdiModel(model_config_for(cfg, train_ds), rng)
    params = model.parameters()
    opt = AdamState(lr=cfg.lr)
    state = TrainState(model, opt, rng)
    rows_by_domain = [train_ds.domain_rows(kk) for kk in range(train_ds.n_domains)]
    report = RunReport(config={**cfg.to_dict(), "source_only": source_only})
    last_good = _snapshot(model)
    for step in range(cfg.max_steps):
        batch = sample_batch(train_ds, cfg.batch_per_domain, rng, rows_by_domain)
        adversarial = step >= cfg.warmup_steps
        loss, br, lat = model.total_loss(batch, rng, adversarial=adversarial, source_only=source_only)
        if not np.isfinite(br.total):
            _abort(state, last_good, checkpoint_path, cfg, stats, step, "non-finite loss")
        zero_grad(params)
        ad.backward(loss)
        try:
            adam_step(params, opt)
        except NonFiniteGradient as exc:
            _abort(state, last_good, checkpoint_path, cfg, stats, step, str(exc))
        model.update_reference(lat.index.beta_raw)
        state.step = step + 1
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.max_steps:
            last_good = _snapshot(model)
            entry = {"step": step + 1, "loss": br.total, "elbo": br.elbo, "rec_x": br.rec_x,
                     "pred_y": br.pred_y, "rec_u": br.rec_u, "reg": br.reg, "disc": br.disc,
                     "contrastive": br.contrastive}
            entry.update(_headline(evaluate(model, full, stats)))
            report.history.append(entry)
            log.info("step %d %s", step + 1, entry)
    if model.index_reference is None:
        # zero-step run: take the indices of one noise-free batch so evaluation works
        batch = sample_batch(train_ds, cfg.batch_per_domain, rng, rows_by_domain)
        model.update_reference(model.encode(batch, None).index.beta_raw)
    metrics = evaluate(model, full, stats)
    report.final = metrics
    report.beta = model.beta_table().tolist()
    truth = full.truth
    if truth is not None and truth.graph is not None:
        report.graph_auc = reconstruct_graph_auc(np.array(report.beta), truth.graph)
    if truth is not None and truth.index is not None:
        idx = np.asarray(truth.index)
        r = index_correlation(np.array(report.beta), idx if idx.ndim == 1 else idx[:, 0])
        report.index_correlation = r
    report.wall_clock = time.perf_counter() - t0
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state, cfg, stats)
    return report, state


def _abort(state, last_good, checkpoint_path, cfg, stats, step, message):
    _restore(state.model, last_good)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state, cfg, stats)
    raise Divergence(step, message)


def source_only_baseline(cfg: TrainConfig, ds=None, stats=None, checkpoint_path=None):
    """Same encoder/predictor stack trained only on the source label term."""
    return train(cfg, ds, stats, source_only=True, checkpoint_path=checkpoint_path)


def _headline(metrics: dict) -> dict:
    keys = ("target_accuracy", "source_accuracy", "target_mse", "source_mse")
    return {k: metrics[k] for k in keys if k in metrics}


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: VdiModel, ds: MultiDomainDataset, stats: NormStats | None = None) -> dict:
    if model.config.task == "classification":
        return evaluate_classification(model, ds)
    out = evaluate_regression_levels(model, ds, stats, require_levels=False)
    return out


def evaluate_classification(model: VdiModel, ds: MultiDomainDataset, beta: np.ndarray | None = None) -> dict:
    if model.config.task != "classification" or ds.task != "classification":
        raise ValueError("evaluate_classification needs a classification model and dataset")
    beta = model.beta_table() if beta is None else beta
    pred = model.predict(ds.x, ds.k, beta)
    return accuracy_report(pred, ds.y, ds.k, ds.n_domains, ds.source_domains)


def accuracy_report(pred, y, k, n_domains: int, source_domains) -> dict:
    pred, y, k = np.asarray(pred), np.asarray(y), np.asarray(k)
    correct = pred == y
    per_domain = [float(correct[k == d].mean()) if np.any(k == d) else float("nan") for d in range(n_domains)]
    src = np.isin(k, source_domains)
    return {
        "per_domain_accuracy": per_domain,
        "target_accuracy": float(correct[~src].mean()) if (~src).any() else float("nan"),
        "source_accuracy": float(correct[src].mean()) if src.any() else float("nan"),
        "accuracy": float(correct.mean()),
    }


def evaluate_regression_levels(model: VdiModel, ds: MultiDomainDataset, stats: NormStats | None = None,
                               beta: np.ndarray | None = None, require_levels: bool = True) -> dict:
    if model.config.task != "regression":
        raise ValueError("evaluate_regression_levels needs a regression model")
    beta = model.beta_table() if beta is None else beta
    pred = model.predict(ds.x, ds.k, beta)
    levels = None if ds.truth is None else ds.truth.levels
    if levels is None and require_levels:
        raise ValueError("dataset has no level tags")
    out = mse_report(pred, ds.y, ds.k, ds.n_domains, ds.source_domains, levels)
    if stats is not None and stats.y_mean is not None:
        raw = mse_report(denormalize_y(pred, stats), denormalize_y(ds.y, stats), ds.k,
                         ds.n_domains, ds.source_domains, levels)
        out.update({f"{key}_denorm": val for key, val in raw.items()})
    return out


def mse_report(pred, y, k, n_domains: int, source_domains, levels=None) -> dict:
    pred = np.asarray(pred).reshape(len(y), -1)
    y = np.asarray(y).reshape(len(y), -1)
    err = ((pred - y) ** 2).mean(axis=1)
    per_domain = np.array([err[k == d].mean() if np.any(k == d) else np.nan for d in range(n_domains)])
    targets = np.setdiff1d(np.arange(n_domains), source_domains)
    out = {
        "per_domain_mse": per_domain.tolist(),
        "target_mse": float(per_domain[targets].mean()),
        "source_mse": float(per_domain[np.asarray(source_domains)].mean()),
    }
    if levels is not None:
        levels = np.asarray(levels)
        for lv in (1, 2, 3):
            doms = targets[levels[targets] == lv]
            out[f"level{lv}_mse"] = float(per_domain[doms].mean()) if doms.size else float("nan")
            out[f"level{lv}_count"] = int(doms.size)
    return out


def auc_score(scores, labels) -> float:
    """ROC AUC via the rank-sum statistic (ties count one half)."""
    scores, labels = np.asarray(scores, float), np.asarray(labels, bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative pairs")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def reconstruct_graph_auc(beta, graph) -> float:
    """AUC of -||beta_k - beta_j|| as a score for the true edges, over all pairs."""
    if graph is None:
        raise ValueError("reconstruct_graph_auc: no ground-truth graph")
    beta = np.asarray(beta, float)
    graph = np.asarray(graph)
    iu = np.triu_indices(len(beta), k=1)
    d = np.linalg.norm(beta[:, None, :] - beta[None, :, :], axis=-1)
    return auc_score(-d[iu], graph[iu] > 0)


def pca_1d(beta) -> np.ndarray:
    beta = np.asarray(beta, float)
    centered = beta - beta.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[0]


def index_correlation(beta, true_index) -> float:
    """|Pearson r| between the first principal component of beta and a scalar index.

    Returns 0.0 when beta has no variance.
    """
    beta = np.asarray(beta, float)
    if beta.ndim == 1:
        beta = beta[:, None]
    if np.allclose(beta.std(axis=0), 0.0):
        log.warning("index_correlation: degenerate beta (zero variance)")
        return 0.0
    proj = pca_1d(beta)
    return float(abs(np.corrcoef(proj, np.asarray(true_index, float))[0, 1]))


# ---------------------------------------------------------------------------
# probes on frozen encodings


def _fit_probe(features: np.ndarray, labels: np.ndarray, n_classes: int, hidden: list[int],
               rng: np.random.Generator, steps: int = 1500, lr: float = 3e-3) -> Mlp:
    net = Mlp([features.shape[1], *hidden, n_classes], rng, name="probe")
    params = net.parameters()
    opt = AdamState(lr=lr)
    rows = np.arange(len(features))
    for _ in range(steps):
        idx = rng.choice(rows, size=min(256, len(rows)), replace=False)
        lsm = ad.log_softmax(net(Tensor(features[idx])), axis=1)
        loss = ad.scale(ad.mean(lsm[(np.arange(len(idx)), labels[idx])]), -1.0)
        zero_grad(params)
        ad.backward(loss)
        adam_step(params, opt)
    return net


def probe_domain_accuracy(model: VdiModel, ds: MultiDomainDataset, seed: int = 0,
                          hidden=(64, 64), steps: int = 1500, z: str = "sample") -> dict:
    """Train a fresh discriminator on frozen z; accuracy on held-out rows.

    ``z="sample"`` draws one encoding per row from the model's posterior (the
    variable the adversary plays against); ``z="mean"`` uses posterior means.
    """
    rng = np.random.default_rng(seed)
    beta = model.beta_table()
    if z == "sample":
        feats = model.encode_sample(ds.x, ds.k, beta, rng)
    elif z == "mean":
        feats = model.encode_mean(ds.x, ds.k, beta)
    else:
        raise ValueError(f"z must be 'sample' or 'mean', got {z!r}")
    perm = rng.permutation(len(feats))
    half = len(feats) // 2
    tr, te = perm[:half], perm[half:]
    net = _fit_probe(feats[tr], ds.k[tr], ds.n_domains, list(hidden), rng, steps)
    acc = float((net(Tensor(feats[te])).data.argmax(1) == ds.k[te]).mean())
    return {"accuracy": acc, "chance": 1.0 / ds.n_domains}


def probe_label_accuracy(model: VdiModel, ds: MultiDomainDataset, seed: int = 0, steps: int = 1500) -> dict:
    """Linear probe on frozen z for source labels vs. the model's own source accuracy."""
    rng = np.random.default_rng(seed)
    src = np.flatnonzero(ds.source_mask)
    beta = model.beta_table()
    z = model.encode_mean(ds.x[src], ds.k[src], beta)
    y = ds.y[src].astype(np.int64)
    perm = rng.permutation(len(src))
    half = len(src) // 2
    tr, te = perm[:half], perm[half:]
    net = _fit_probe(z[tr], y[tr], model.config.n_classes, [], rng, steps)
    probe_acc = float((net(Tensor(z[te])).data.argmax(1) == y[te]).mean())
    model_acc = float((model.predict(ds.x[src][te], ds.k[src][te], beta) == y[te]).mean())
    return {"probe_accuracy": probe_acc, "model_accuracy": model_acc}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: TrainState, cfg: TrainConfig, stats: NormStats | None) -> Path:
    """Single ``.npz`` with named parameters, Adam moments, RNG state and metadata."""
    path = Path(path)
    model = state.model
    arrays = {f"param/{n}": p.data for n, p in model.named_parameters().items()}
    names = list(model.named_parameters())
    if state.opt.m:
        for n, m, v in zip(names, state.opt.m, state.opt.v):
            arrays[f"adam_m/{n}"] = m
            arrays[f"adam_v/{n}"] = v
    if model.index_reference is not None:
        arrays["index_reference"] = model.index_reference
    if stats is not None:
        for key in ("x_mean", "x_std", "y_mean", "y_std"):
            val = getattr(stats, key)
            if val is not None:
                arrays[f"norm/{key}"] = np.asarray(val)
    meta = {
        "model_config": model.config.to_dict(),
        "train_config": cfg.to_dict(),
        "step": state.step,
        "adam": {"lr": state.opt.lr, "beta1": state.opt.beta1, "beta2": state.opt.beta2,
                 "eps": state.opt.eps, "t": state.opt.t},
        "rng": state.rng.bit_generator.state,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[TrainState, TrainConfig, NormStats | None]:
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode("utf-8"))
    mc = meta["model_config"]
    mc["hidden"] = tuple(mc["hidden"])
    model = VdiModel(VdiConfig(**mc), None)
    for n, p in model.named_parameters().items():
        p.data[...] = arrays[f"param/{n}"]
    model.index_reference = arrays.get("index_reference")
    a = meta["adam"]
    opt = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"])
    names = list(model.named_parameters())
    if f"adam_m/{names[0]}" in arrays:
        opt.m = [arrays[f"adam_m/{n}"].copy() for n in names]
        opt.v = [arrays[f"adam_v/{n}"].copy() for n in names]
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    stats = None
    if "norm/x_mean" in arrays:
        stats = NormStats(arrays["norm/x_mean"], arrays["norm/x_std"],
                          arrays.get("norm/y_mean"), arrays.get("norm/y_std"))
    return TrainState(model, opt, rng, meta["step"]), TrainConfig.from_dict(meta["train_config"]), stats


# ---------------------------------------------------------------------------
# run outputs


def write_beta_csv(path, beta) -> Path:
    beta = np.asarray(beta, float)
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["domain"] + [f"beta_{i}" for i in range(beta.shape[1])])
        for k, row in enumerate(beta):
            w.writerow([k] + [repr(float(v)) for v in row])
    return path


def write_metrics_csv(path, history: list[dict]) -> Path:
    path = Path(path)
    keys: list[str] = []
    for entry in history:
        keys += [k for k in entry if k not in keys]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(history)
    return path


def write_outputs(out_dir, report: RunReport, state: TrainState | None = None,
                  cfg: TrainConfig | None = None, stats: NormStats | None = None) -> Path:
    """``report.json``, ``beta.csv``, ``metrics.csv`` and, given a state, ``checkpoint.npz``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    write_beta_csv(out / "beta.csv", report.beta)
    write_metrics_csv(out / "metrics.csv", report.history)
    if state is not None and cfg is not None:
        save_checkpoint(out / "checkpoint.npz", state, cfg, stats)
        (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    return out
