"""Experiment surface behind the CLI: data sources, single runs, sweeps with
Pareto extraction, the two reference baselines, and the robustness audit.

Sweep cells persist to one JSON file each, so an interrupted sweep resumes by
skipping completed cells, and every table is regenerable from the cell files
alone.
"""

from __future__ import annotations

import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import kernels
from . import nn
from .augment import attr_grad
from .census import census_schema, generate_census_table
from .data import (DataError, DatasetSchema, EncodedDataset, SynthSpec,
                   group_balanced_batch, fit_encode, load_csv, synth_generate)
from .disentangle import FairCdaArch, FairCdaNetwork, _as_col
from .metrics import (EvalSlice, auc_roc, average_precision, delta_dp,
                      delta_eo, metric_report)
from .trainer import (BASELINE_METHODS, KNOWN_METHODS, RunRecord, SelectionFront,
                      TrainConfig, TrainingError, _init_seed, _spawn_rngs,
                      aggregate_summaries, evaluate_net, train_full)

ALL_METHODS = KNOWN_METHODS

PARETO_COLUMNS = ("method", "lambda", "seed_count", "task_mean", "task_std",
                  "gap_metric", "gap_mean", "gap_std", "dominated")

# Published census-income results, kept for report annotation only; the
# harness always compares its own runs against its own baselines.
REFERENCE_RESULTS = {
    "fair-cda": [
        {"dp": 0.022, "ap_at_dp": 0.783, "eo": 0.010, "ap_at_eo": 0.783},
        {"dp": 0.046, "ap_at_dp": 0.786, "eo": 0.013, "ap_at_eo": 0.785},
        {"dp": 0.104, "ap_at_dp": 0.788, "eo": 0.032, "ap_at_eo": 0.787},
    ],
    "fair-cda-no-orth": [
        {"dp": 0.087, "ap_at_dp": 0.778, "eo": 0.057, "ap_at_eo": 0.782},
        {"dp": 0.097, "ap_at_dp": 0.782, "eo": 0.175, "ap_at_eo": 0.785},
    ],
    "parameter_counts": {"backbone": 64_601, "fair-cda": 146_005},
}


# ---------------------------------------------------------------------------
# data sources
# ---------------------------------------------------------------------------

@dataclass
class DataSource:
    """Recipe for building an EncodedDataset; picklable and cheap to ship to
    worker processes, which rebuild the data deterministically."""

    kind: str = "census"          # "csv" | "synth" | "census"
    path: str | None = None       # csv file
    schema_path: str | None = None
    synth: dict | None = None     # SynthSpec kwargs
    n: int = 45000                # census row count
    gen_seed: int = 7
    encode_seed: int = 13
    include_sensitive_feature: bool = False
    fracs: tuple = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if self.kind not in ("csv", "synth", "census"):
            raise DataError(f"unknown data source kind '{self.kind}'")
        self.fracs = tuple(self.fracs)

    def resolve(self) -> EncodedDataset:
        if self.kind == "csv":
            if not self.path or not self.schema_path:
                raise DataError("csv data source needs 'path' and 'schema_path'")
            schema = DatasetSchema.load(self.schema_path)
            schema.include_sensitive_feature = self.include_sensitive_feature
            table = load_csv(self.path, schema)
            return fit_encode(table, schema, seed=self.encode_seed, fracs=self.fracs)
        if self.kind == "census":
            table = generate_census_table(self.n, self.gen_seed,
                                          self.include_sensitive_feature)
            return fit_encode(table, seed=self.encode_seed, fracs=self.fracs)
        spec = SynthSpec(**{**(self.synth or {}), "fracs": self.fracs})
        return synth_generate(spec, self.gen_seed)

    # zero-arg provider protocol used by run_multi_seed
    def __call__(self) -> EncodedDataset:
        return self.resolve()

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "DataSource":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown data source keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FullConfig:
    train: TrainConfig
    data: DataSource

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "data": self.data.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "FullConfig":
        return cls(train=TrainConfig.from_dict(d.get("train", {})),
                   data=DataSource.from_dict(d.get("data", {})))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "FullConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# single runs (cmd_train)
# ---------------------------------------------------------------------------

def run_once(train_cfg: TrainConfig, source: DataSource, out_dir=None,
             stem: str = "run") -> RunRecord:
    """One training run routed by method; optionally persists artifacts."""
    dataset = source.resolve()
    ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, f"{stem}.ckpt.npz")
    if train_cfg.method in BASELINE_METHODS:
        record = _run_baseline(train_cfg, dataset, ckpt_path)
    else:
        _, record = train_full(train_cfg, dataset, checkpoint_path=ckpt_path)
    if out_dir is not None:
        record.write(out_dir, stem=stem)
    return record


def cmd_train(config_path, out_dir, **overrides) -> RunRecord:
    cfg = FullConfig.load(config_path)
    train_cfg = cfg.train
    if overrides:
        train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), **overrides})
    return run_once(train_cfg, cfg.data, out_dir=out_dir)


# ---------------------------------------------------------------------------
# baselines on the plain backbone
# ---------------------------------------------------------------------------

def batch_gap_estimate(preds: ad.Tensor, y: np.ndarray, a: np.ndarray,
                       metric: str) -> ad.Tensor:
    """Differentiable batch estimate of the fairness gap from group means.

    For "eo" the per-label cells are used; a label value missing from either
    group contributes zero for that label.
    """
    def group_mean(sel: np.ndarray) -> ad.Tensor:
        w = np.zeros((len(a), 1))
        w[sel, 0] = 1.0 / sel.sum()
        return ad.sum_all(ad.mul(preds, ad.constant(w)))

    if metric == "dp":
        g0, g1 = a == 0.0, a == 1.0
        if not g0.any() or not g1.any():
            raise DataError("both attribute groups must be present in the batch")
        return ad.absolute(ad.sub(group_mean(g0), group_mean(g1)))
    total = None
    for yv in (0.0, 1.0):
        c0 = (a == 0.0) & (y == yv)
        c1 = (a == 1.0) & (y == yv)
        if not c0.any() or not c1.any():
            continue
        term = ad.absolute(ad.sub(group_mean(c0), group_mean(c1)))
        total = term if total is None else ad.add(total, term)
    return total if total is not None else ad.constant(np.asarray(0.0))


class _PlainModel:
    """Backbone MLP wrapper that quacks like FairCdaNetwork for evaluate_net."""

    def __init__(self, store: nn.ParameterStore, layers):
        self.store = store
        self.layers = layers

    def predict_proba(self, x: np.ndarray, use_aug_head: bool = False) -> np.ndarray:
        return nn.mlp_forward(self.store, self.layers, ad.constant(np.atleast_2d(x))).data.ravel()


def _run_plain(config: TrainConfig, dataset: EncodedDataset, *, gap_weight: float = 0.0,
               flip_p: float | None = None, method: str = "gapreg",
               checkpoint_path=None) -> RunRecord:
    """Single-stage training of the undecomposed backbone.

    gap_weight > 0 adds the differentiable batch fairness gap (GapReg);
    flip_p resamples each example's sensitive input bit with that probability
    every time it is drawn (Attribute-Level flip).
    """
    import time as _time
    t0 = _time.perf_counter()
    arch = FairCdaArch(dataset.dim, config.hidden_dim, config.branch_dim)
    layers = arch.backbone_specs()
    store = nn.init_parameters(layers, _init_seed(config.seed))
    model = _PlainModel(store, layers)
    adam = nn.AdamState.create(store, lr=config.lr_stage1)
    rngs = _spawn_rngs(config.seed)
    record = RunRecord(config=config.to_dict(), seed=config.seed, method=method)
    front = SelectionFront()
    train_view, val_view = dataset.view("train"), dataset.view("val")

    flip_col = None
    if flip_p is not None:
        if dataset.encoder is None or dataset.encoder.sensitive_feature_index is None:
            raise DataError("attribute-level flip needs the sensitive attribute "
                            "encoded as an input feature (include_sensitive_feature)")
        flip_col = dataset.encoder.sensitive_feature_index

    for t in range(config.iterations_stage1):
        batch = group_balanced_batch(train_view, config.per_group, rngs["batch1"])
        x = batch.x
        if flip_col is not None and flip_p > 0.0:
            x = x.copy()
            flips = rngs["alpha"].random(len(x)) < flip_p
            x[flips, flip_col] = 1.0 - x[flips, flip_col]
        preds = nn.mlp_forward(store, layers, ad.constant(x))
        loss = ad.mean_all(ad.bce(preds, _as_col(batch.y)))
        if gap_weight > 0.0:
            loss = ad.add(loss, ad.scale(
                batch_gap_estimate(preds, batch.y, batch.a, config.metric), gap_weight))
        gm = ad.backward(loss)
        nn.adam_step(adam, store, gm)
        rec = {"stage": 1, "iteration": t, "losses": {"total": loss.item()}}
        if (t + 1) % config.eval_every_stage1 == 0 or t + 1 == config.iterations_stage1:
            rec["val"] = evaluate_net(model, val_view, config.metric, use_aug_head=False)
        record.iterations.append(rec)

    # single-stage baselines report their final model; the trade-off axis is
    # the method weight across runs, not within-run checkpoint selection
    record.stage1_final = evaluate_net(model, val_view, config.metric, False)
    front.consider(record.stage1_final["gap"], record.stage1_final["ap"], 1,
                   config.iterations_stage1 - 1, store.state_dict())
    entry = front.select(config.selection_slack)
    record.selected = {
        "stage": 1, "iteration": entry.iteration, "eval_head": "task",
        "val": record.stage1_final,
        "test": evaluate_net(model, dataset.view("test"), config.metric, False),
    }
    record.wall_clock_s = _time.perf_counter() - t0
    if checkpoint_path is not None:
        meta = {"arch": arch.to_dict(), "model_kind": "backbone",
                "config": config.to_dict(), "config_digest": config.digest(),
                "eval_head": "task", "method": method}
        nn.save_checkpoint(checkpoint_path, meta=meta, params=store.state_dict(),
                           adam_m=adam.m, adam_v=adam.v)
        record.checkpoint_path = str(checkpoint_path)
    return record


def baseline_gapreg(config: TrainConfig, dataset: EncodedDataset, weight: float,
                    checkpoint_path=None) -> RunRecord:
    if weight < 0:
        raise ValueError("gap weight must be >= 0")
    return _run_plain(config, dataset, gap_weight=weight, method="gapreg",
                      checkpoint_path=checkpoint_path)


def baseline_attribute_flip(config: TrainConfig, dataset: EncodedDataset, p: float,
                            checkpoint_path=None) -> RunRecord:
    if not (0.0 <= p <= 1.0):
        raise ValueError("flip probability must be in [0, 1]")
    return _run_plain(config, dataset, flip_p=p, method="attribute-level",
                      checkpoint_path=checkpoint_path)


def _run_baseline(config: TrainConfig, dataset: EncodedDataset,
                  checkpoint_path=None) -> RunRecord:
    # baseline knob rides in config.lam (the sweep axis for every method)
    if config.method == "gapreg":
        return baseline_gapreg(config, dataset, weight=config.lam,
                               checkpoint_path=checkpoint_path)
    return baseline_attribute_flip(config, dataset, p=config.lam,
                                   checkpoint_path=checkpoint_path)


# ---------------------------------------------------------------------------
# sweeps and Pareto extraction
# ---------------------------------------------------------------------------

@dataclass
class ParetoPoint:
    method: str
    lam: float
    seed_count: int
    task_mean: float
    task_std: float | None
    gap_metric: str
    gap_mean: float
    gap_std: float | None
    dominated: bool = False

    def row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else f"{v:.10g}"
        return [self.method, fmt(self.lam), str(self.seed_count), fmt(self.task_mean),
                fmt(self.task_std), self.gap_metric, fmt(self.gap_mean),
                fmt(self.gap_std), str(int(self.dominated))]


def default_lambda_grid(lo: float = 0.0, hi: float = 1000.0, points: int = 20) -> list[float]:
    return [float(v) for v in np.linspace(lo, hi, points)]


def pareto_dominated_flags(points: list[tuple[float, float]]) -> list[bool]:
    """points are (gap, task); True where some other point weakly dominates
    with at least one strict improvement."""
    flags = []
    for i, (g_i, t_i) in enumerate(points):
        dom = any(
            (g_j <= g_i and t_j >= t_i) and (g_j < g_i or t_j > t_i)
            for j, (g_j, t_j) in enumerate(points) if j != i)
        flags.append(dom)
    return flags


def _cell_path(out_dir, method: str, lam: float, seed: int) -> str:
    return os.path.join(out_dir, "cells", f"{method}_lam{lam:.6g}_seed{seed}.json")


def _sweep_worker(args) -> tuple[str, dict]:
    config_dict, provider, method, lam, seed, path = args
    try:
        config = TrainConfig.from_dict(config_dict)
        dataset = provider()
        if method in BASELINE_METHODS:
            record = _run_baseline(config, dataset)
        else:
            _, record = train_full(config, dataset)
        payload = {"ok": True, "method": method, "lambda": lam, "seed": seed,
                   "summary": record.summary()}
    except Exception as exc:  # isolate cell failures; the sweep continues
        payload = {"ok": False, "method": method, "lambda": lam, "seed": seed,
                   "error": f"{type(exc).__name__}: {exc}"}
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
    os.replace(tmp, path)
    return path, payload


def cmd_sweep(train_cfg: TrainConfig, source: DataSource, grid: list[float],
              seeds: list[int], out_dir, method: str | None = None,
              jobs: int = 1) -> list[ParetoPoint]:
    """One cell per (lambda, seed); completed cells are never re-run."""
    if not grid:
        raise ValueError("lambda grid must be non-empty")
    method = method or train_cfg.method
    if method not in ALL_METHODS:
        raise ValueError(f"unknown method '{method}'")
    os.makedirs(os.path.join(out_dir, "cells"), exist_ok=True)

    tasks = []
    for lam in grid:
        for seed in seeds:
            path = _cell_path(out_dir, method, lam, seed)
            if os.path.exists(path):
                with open(path, encoding="utf-8") as fh:
                    if json.load(fh).get("ok"):
                        continue  # done; failed cells get retried
            mdict = {**train_cfg.to_dict(), "lam": float(lam), "seed": int(seed)}
            if method not in BASELINE_METHODS:
                mdict["method"] = method
            tasks.append((mdict, source, method, float(lam), int(seed), path))

    if tasks:
        if jobs <= 1 or len(tasks) == 1:
            for t in tasks:
                _sweep_worker(t)
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                list(pool.map(_sweep_worker, tasks))
    points = aggregate_sweep(out_dir, method, grid, seeds, train_cfg.metric)
    write_pareto_table(os.path.join(out_dir, f"pareto_{method}.tsv"), points)
    return points


def aggregate_sweep(out_dir, method: str, grid: list[float], seeds: list[int],
                    gap_metric: str) -> list[ParetoPoint]:
    points = []
    for lam in grid:
        summaries = []
        for seed in seeds:
            path = _cell_path(out_dir, method, lam, seed)
            if not os.path.exists(path):
                continue
            with open(path, encoding="utf-8") as fh:
                payload = json.load(fh)
            if payload.get("ok"):
                summaries.append(payload["summary"])
        if not summaries:
            continue
        agg = aggregate_summaries(summaries)
        many = agg["seed_count"] > 1
        points.append(ParetoPoint(
            method=method, lam=float(lam), seed_count=agg["seed_count"],
            task_mean=agg["ap_mean"], task_std=agg["ap_std"] if many else None,
            gap_metric=gap_metric, gap_mean=agg[f"{gap_metric}_mean"],
            gap_std=agg[f"{gap_metric}_std"] if many else None))
    flags = pareto_dominated_flags([(p.gap_mean, p.task_mean) for p in points])
    for p, f in zip(points, flags):
        p.dominated = f
    return points


def write_pareto_table(path, points: list[ParetoPoint]):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(PARETO_COLUMNS) + "\n")
        for p in points:
            fh.write("\t".join(p.row()) + "\n")


def read_pareto_table(path) -> list[ParetoPoint]:
    points = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != PARETO_COLUMNS:
            raise DataError(f"unexpected pareto table header in {path}")
        for line in fh:
            m, lam, n, tm, ts, gm_name, gm, gs, dom = line.rstrip("\n").split("\t")
            points.append(ParetoPoint(
                method=m, lam=float(lam), seed_count=int(n), task_mean=float(tm),
                task_std=float(ts) if ts else None, gap_metric=gm_name,
                gap_mean=float(gm), gap_std=float(gs) if gs else None,
                dominated=bool(int(dom))))
    return points


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------

@dataclass
class AuditReport:
    alpha_star: np.ndarray   # per-sample minimal flipping perturbation (inf sentinel)
    cap: float
    step: float
    training_lambda: float

    def summary(self) -> dict:
        finite = self.alpha_star[np.isfinite(self.alpha_star)]
        qs = {}
        for q in (0, 25, 50, 75, 100):
            qs[f"q{q}"] = float(np.percentile(self.alpha_star, q)) \
                if len(self.alpha_star) else float("nan")
        return {
            "n": int(len(self.alpha_star)),
            "cap": self.cap,
            "step": self.step,
            "training_lambda": self.training_lambda,
            "quantiles": qs,
            "frac_never_flipped": float(np.mean(~np.isfinite(self.alpha_star))),
            "frac_exceeding_training_lambda": float(np.mean(
                self.alpha_star > self.training_lambda)),
            "median_finite": float(np.median(finite)) if len(finite) else None,
        }


def audit_network(net: FairCdaNetwork, view, cap: float, step: float,
                  training_lambda: float, use_aug_head: bool = True) -> AuditReport:
    """Smallest grid perturbation of the attribute features that flips the
    task prediction across 0.5, per sample; inf when none within the cap."""
    if cap < 0 or step <= 0:
        raise ValueError("audit needs cap >= 0 and step > 0")
    if cap == 0:
        warnings.warn("audit cap is 0: every sample reports the infinity sentinel")
    _, z_y, z_a = net.extract(ad.constant(view.x))
    grad = attr_grad(net, z_a, view.a)
    unit = kernels.perturb_delta(grad, np.ones(len(view.x)), 1e-12)
    alphas = np.arange(0.0, cap + step / 2.0, step) if cap > 0 else np.array([0.0])
    p0 = net.task_head(z_y, z_a, use_aug_head=use_aug_head).data.ravel()
    side0 = p0 >= 0.5
    alpha_star = np.full(len(p0), np.inf)
    undecided = np.ones(len(p0), dtype=bool)
    for alpha in alphas[1:]:
        z_t = ad.constant(z_a.data + alpha * unit)
        p = net.task_head(z_y, z_t, use_aug_head=use_aug_head).data.ravel()
        crossed = undecided & ((p >= 0.5) != side0)
        alpha_star[crossed] = alpha
        undecided &= ~crossed
        if not undecided.any():
            break
    return AuditReport(alpha_star=alpha_star, cap=cap, step=step,
                       training_lambda=training_lambda)


# ---------------------------------------------------------------------------
# checkpoint-backed evaluation and audit entry points
# ---------------------------------------------------------------------------

def rebuild_from_checkpoint(path):
    """Returns (model, meta); model is FairCdaNetwork or _PlainModel."""
    ckpt = nn.load_checkpoint(path)
    arch = FairCdaArch.from_dict(ckpt.meta["arch"])
    if ckpt.meta.get("model_kind") == "backbone":
        layers = arch.backbone_specs()
        store = nn.init_parameters(layers, 0)
        store.load_state_dict(ckpt.params)
        return _PlainModel(store, layers), ckpt.meta
    net = FairCdaNetwork.build(arch, seed=0)
    net.store.load_state_dict(ckpt.params)
    imp = {k.split("/", 1)[1]: v for k, v in ckpt.extra_arrays.items()
           if k.startswith("imp/")}
    if imp:
        net.load_imputation_state(imp)
    return net, ckpt.meta


def cmd_evaluate(checkpoint_path, source: DataSource, split: str, seed: int = 0) -> dict:
    model, meta = rebuild_from_checkpoint(checkpoint_path)
    dataset = source.resolve()
    view = dataset.view(split)
    preds = model.predict_proba(view.x, use_aug_head=meta.get("eval_head") == "aug")
    return metric_report(EvalSlice(preds, view.y, view.a), split=split, seed=seed)


def cmd_audit(checkpoint_path, source: DataSource, split: str, cap: float,
              step: float) -> AuditReport:
    model, meta = rebuild_from_checkpoint(checkpoint_path)
    if not isinstance(model, FairCdaNetwork):
        raise TrainingError("audit needs a decomposed-network checkpoint; "
                            "this one holds a plain backbone")
    dataset = source.resolve()
    view = dataset.view(split)
    lam = float(meta.get("config", {}).get("lam", 0.0))
    return audit_network(model, view, cap=cap, step=step, training_lambda=lam,
                         use_aug_head=meta.get("eval_head") == "aug")
