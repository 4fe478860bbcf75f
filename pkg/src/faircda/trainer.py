"""Two-stage training: fit the imputation model, freeze it, fine-tune on
augmented features.  Also owns model selection, checkpoint/resume, and the
multi-seed orchestrator.

One "iteration" is one optimizer step on one group-balanced batch.  Stage 1
minimizes the task loss plus the weighted branch/orthogonality penalties;
the end-of-stage parameters become the frozen imputation model.  Stage 2
re-labels perturbed attribute features with that frozen model and fine-tunes
the spare task head (and everything upstream) with a fresh, slower optimizer.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .augment import augment_batch, stage2_objective
from .data import EncodedDataset, group_balanced_batch
from .disentangle import (FairCdaArch, FairCdaNetwork, resolve_beta,
                          stage1_objective)
from .metrics import (EvalSlice, auc_roc, average_precision, delta_dp,
                      delta_eo)


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


TRAINER_METHODS = ("fair-cda", "fair-cda-no-im", "fair-cda-no-orth", "erm")
BASELINE_METHODS = ("gapreg", "attribute-level")  # run by the harness, not Trainer
KNOWN_METHODS = TRAINER_METHODS + BASELINE_METHODS


@dataclass(frozen=True)
class TrainConfig:
    """Mirrors the structured config file; see README for the file format."""

    iterations_stage1: int = 450
    iterations_stage2: int = 10
    lr_stage1: float = 1e-3
    lr_stage2: float = 5e-4
    lam: float = 500.0
    gamma: float = 0.9
    beta: float | None = None  # None resolves from the first batch
    per_group: int = 500
    seed: int = 0
    metric: str = "dp"  # fairness target: "dp" | "eo"
    hidden_dim: int = 200
    branch_dim: int = 200
    eval_every_stage1: int = 10
    eval_every_stage2: int = 1
    selection_slack: float = 1.1
    method: str = "fair-cda"
    include_task_loss_stage2: bool = False
    supplement_original: bool = False
    hard_impute: bool = False

    def __post_init__(self):
        if self.iterations_stage1 < 0 or self.iterations_stage2 < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.lr_stage1 <= 0 or self.lr_stage2 <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not (0.0 <= self.gamma <= 1.0):
            raise ConfigError("gamma must be in [0, 1]")
        if self.beta is not None and self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.per_group <= 0:
            raise ConfigError("per_group must be positive")
        if self.metric not in ("dp", "eo"):
            raise ConfigError(f"unknown metric target '{self.metric}'")
        if self.method not in KNOWN_METHODS:
            raise ConfigError(f"unknown method '{self.method}'")
        if self.eval_every_stage1 <= 0 or self.eval_every_stage2 <= 0:
            raise ConfigError("eval cadences must be positive")
        if self.selection_slack < 1.0:
            raise ConfigError("selection slack must be >= 1.0")

    def resolved(self) -> "TrainConfig":
        """Apply method-implied overrides (ablations are config degenerations)."""
        if self.method == "erm":
            return replace(self, beta=0.0, lam=0.0, iterations_stage2=0)
        if self.method == "fair-cda-no-im":
            return replace(self, gamma=1.0)
        return self

    @property
    def orth_enabled(self) -> bool:
        return self.method != "fair-cda-no-orth"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# evaluation and model selection
# ---------------------------------------------------------------------------

def evaluate_net(net: FairCdaNetwork, view, metric: str,
                 use_aug_head: bool) -> dict[str, float]:
    preds = net.predict_proba(view.x, use_aug_head=use_aug_head)
    sl = EvalSlice(preds, view.y, view.a)
    out = {
        "ap": average_precision(sl),
        "auc": auc_roc(sl),
        "dp": delta_dp(sl),
        "eo": delta_eo(sl),
    }
    out["gap"] = out[metric]
    return out


@dataclass
class FrontEntry:
    gap: float
    task: float
    stage: int
    iteration: int
    params: dict[str, np.ndarray]


class SelectionFront:
    """Non-dominated (gap down, task up) validation checkpoints.

    The selected model maximizes the task metric among entries whose gap is
    within ``slack`` times the best gap seen; that winner is always on this
    front, so dominated snapshots can be dropped as they arise.
    """

    MAX_ENTRIES = 64

    def __init__(self):
        self.entries: list[FrontEntry] = []

    def consider(self, gap: float, task: float, stage: int, iteration: int,
                 params: dict[str, np.ndarray]):
        for e in self.entries:
            if e.gap <= gap and e.task >= task:
                return  # dominated by an existing entry
        self.entries = [e for e in self.entries if not (gap <= e.gap and task >= e.task)]
        self.entries.append(FrontEntry(gap, task, stage, iteration, params))
        self.entries.sort(key=lambda e: (e.gap, -e.task, e.stage, e.iteration))
        if len(self.entries) > self.MAX_ENTRIES:
            self.entries.pop()  # practical cap: shed the loosest-gap entry

    def select(self, slack: float) -> FrontEntry:
        if not self.entries:
            raise TrainingError("no evaluated checkpoints to select from")
        best_gap = min(e.gap for e in self.entries)
        admissible = [e for e in self.entries if e.gap <= best_gap * slack]
        admissible.sort(key=lambda e: (-e.task, e.gap, e.stage, e.iteration))
        return admissible[0]


# ---------------------------------------------------------------------------
# run record
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    config: dict
    seed: int
    method: str
    resolved_beta: float | None = None
    iterations: list[dict] = field(default_factory=list)
    stage1_final: dict | None = None
    stage2_final: dict | None = None
    selected: dict | None = None
    wall_clock_s: float = 0.0
    checkpoint_path: str | None = None

    def summary(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "config": self.config,
            "resolved_beta": self.resolved_beta,
            "stage1_final": self.stage1_final,
            "stage2_final": self.stage2_final,
            "selected": self.selected,
            "wall_clock_s": self.wall_clock_s,
            "n_iterations": len(self.iterations),
            "checkpoint_path": self.checkpoint_path,
        }

    def write(self, out_dir, stem: str = "run"):
        import os
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, f"{stem}.log.jsonl")
        with open(log_path, "w", encoding="utf-8") as fh:
            for rec in self.iterations:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        summary_path = os.path.join(out_dir, f"{stem}.summary.json")
        with open(summary_path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
        return summary_path


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

def _spawn_rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(4)
    return {
        "init": np.random.Generator(np.random.PCG64(children[0])),
        "batch1": np.random.Generator(np.random.PCG64(children[1])),
        "batch2": np.random.Generator(np.random.PCG64(children[2])),
        "alpha": np.random.Generator(np.random.PCG64(children[3])),
    }


def _init_seed(seed: int) -> int:
    return int(np.random.SeedSequence(seed).spawn(4)[0].generate_state(1)[0])


class Trainer:
    """Owns one run's network, optimizer, RNG streams, and selection state."""

    def __init__(self, config: TrainConfig, dataset: EncodedDataset):
        if config.method in BASELINE_METHODS:
            raise ConfigError(
                f"method '{config.method}' is a harness baseline, not a two-stage run")
        self.config = config.resolved()
        self.dataset = dataset
        self.train_view = dataset.view("train")
        self.val_view = dataset.view("val")
        self.test_view = dataset.view("test")
        self.rngs = _spawn_rngs(self.config.seed)
        arch = FairCdaArch(input_dim=dataset.dim,
                           hidden_dim=self.config.hidden_dim,
                           branch_dim=self.config.branch_dim)
        self.net = FairCdaNetwork.build(arch, seed=_init_seed(self.config.seed))
        self.adam = nn.AdamState.create(self.net.store, lr=self.config.lr_stage1)
        self.stage = 1
        self.iter_in_stage = 0
        self.beta = self.config.beta
        self.front = SelectionFront()
        self.record = RunRecord(config=self.config.to_dict(),
                                seed=self.config.seed, method=self.config.method)
        self._started = time.perf_counter()

    # -- single steps -------------------------------------------------------
    def _eval_and_track(self, stage: int, iteration: int, candidate: bool) -> dict:
        """Validation metrics; selection candidates are the end-of-Stage-1
        model and every Stage-2 iterate.  Mid-Stage-1 models predate the
        disentanglement and would degenerate the slack rule toward barely
        trained near-constant predictors, so they are logged but not
        selectable."""
        metrics = evaluate_net(self.net, self.val_view, self.config.metric,
                               use_aug_head=(stage == 2))
        if candidate:
            self.front.consider(metrics["gap"], metrics["ap"], stage, iteration,
                                self.net.store.state_dict())
        return metrics

    def _step_stage1(self):
        cfg = self.config
        t = self.iter_in_stage
        batch = group_balanced_batch(self.train_view, cfg.per_group, self.rngs["batch1"])
        if self.beta is None:
            self.beta = resolve_beta(self.net, batch)
            self.record.resolved_beta = self.beta
        bundle = stage1_objective(self.net, batch, self.beta,
                                  orth_enabled=cfg.orth_enabled)
        gm = ad.backward(bundle.total)
        nn.adam_step(self.adam, self.net.store, gm)
        rec = {"stage": 1, "iteration": t, "losses": bundle.values()}
        final = t + 1 == cfg.iterations_stage1
        if (t + 1) % cfg.eval_every_stage1 == 0 or final:
            rec["val"] = self._eval_and_track(1, t, candidate=final)
        self.record.iterations.append(rec)
        self.iter_in_stage += 1

    def _step_stage2(self):
        cfg = self.config
        t = self.iter_in_stage
        batch = group_balanced_batch(self.train_view, cfg.per_group, self.rngs["batch2"])
        if self.beta is None:
            self.beta = resolve_beta(self.net, batch)
            self.record.resolved_beta = self.beta
        aug = augment_batch(self.net, batch, cfg.lam, self.rngs["alpha"],
                            hard_impute=cfg.hard_impute)
        bundle = stage2_objective(self.net, aug, cfg.gamma, self.beta,
                                  orth_enabled=cfg.orth_enabled,
                                  include_task_loss=cfg.include_task_loss_stage2,
                                  supplement_original=cfg.supplement_original)
        gm = ad.backward(bundle.total)
        nn.adam_step(self.adam, self.net.store, gm)
        rec = {"stage": 2, "iteration": t, "losses": bundle.values()}
        if (t + 1) % cfg.eval_every_stage2 == 0 or t + 1 == cfg.iterations_stage2:
            rec["val"] = self._eval_and_track(2, t, candidate=True)
        self.record.iterations.append(rec)
        self.iter_in_stage += 1

    def _enter_stage2(self):
        self.record.stage1_final = evaluate_net(
            self.net, self.val_view, self.config.metric, use_aug_head=False)
        if not self.record.iterations or self.config.iterations_stage1 == 0:
            # still give selection something to hold on to
            self.front.consider(self.record.stage1_final["gap"],
                                self.record.stage1_final["ap"], 1, -1,
                                self.net.store.state_dict())
        self.net.freeze_imputation()
        self.net.init_aug_head_from_task_head()
        self.adam = nn.AdamState.create(self.net.store, lr=self.config.lr_stage2)
        self.stage = 2
        self.iter_in_stage = 0

    @property
    def done(self) -> bool:
        return self.stage == 2 and self.iter_in_stage >= self.config.iterations_stage2

    def step(self):
        if self.stage == 1:
            if self.iter_in_stage < self.config.iterations_stage1:
                self._step_stage1()
            if self.iter_in_stage >= self.config.iterations_stage1:
                self._enter_stage2()
        elif not self.done:
            self._step_stage2()

    def run(self) -> RunRecord:
        while not self.done:
            self.step()
        return self.finalize()

    def finalize(self) -> RunRecord:
        cfg = self.config
        if cfg.iterations_stage2 > 0:
            self.record.stage2_final = evaluate_net(self.net, self.val_view,
                                                    cfg.metric, use_aug_head=True)
        entry = self.front.select(cfg.selection_slack)
        self.net.store.load_state_dict(entry.params)
        use_aug = entry.stage == 2
        self.record.selected = {
            "stage": entry.stage,
            "iteration": entry.iteration,
            "eval_head": "aug" if use_aug else "task",
            "val": evaluate_net(self.net, self.val_view, cfg.metric, use_aug),
            "test": evaluate_net(self.net, self.test_view, cfg.metric, use_aug),
        }
        self.record.wall_clock_s = time.perf_counter() - self._started
        return self.record

    # -- checkpointing --------------------------------------------------------
    def save(self, path):
        meta = {
            "arch": self.net.arch.to_dict(),
            "config": self.config.to_dict(),
            "config_digest": self.config.digest(),
            "encoder": self.dataset.encoder.to_dict() if self.dataset.encoder else None,
            "stage": self.stage,
            "iter_in_stage": self.iter_in_stage,
            "beta": self.beta,
            "adam": {"lr": self.adam.lr, "beta1": self.adam.beta1,
                     "beta2": self.adam.beta2, "eps": self.adam.eps,
                     "step": self.adam.step},
            "rng_states": {k: g.bit_generator.state for k, g in self.rngs.items()},
            "front": [{"gap": e.gap, "task": e.task, "stage": e.stage,
                       "iteration": e.iteration} for e in self.front.entries],
            "has_imputation": self.net.imputation_state is not None,
            "eval_head": "aug" if self.stage == 2 else "task",
        }
        extra: dict[str, np.ndarray] = {}
        if self.net.imputation_state is not None:
            for k, v in self.net.imputation_state.items():
                extra[f"imp/{k}"] = v
        for i, e in enumerate(self.front.entries):
            for k, v in e.params.items():
                extra[f"front{i}/{k}"] = v
        nn.save_checkpoint(path, meta=meta, params=self.net.store.state_dict(),
                           adam_m=self.adam.m, adam_v=self.adam.v,
                           extra_arrays=extra)

    @classmethod
    def load(cls, path, dataset: EncodedDataset) -> "Trainer":
        ckpt = nn.load_checkpoint(path)
        meta = ckpt.meta
        config = TrainConfig.from_dict(meta["config"])
        tr = cls(config, dataset)
        if tr.net.arch.to_dict() != meta["arch"]:
            raise TrainingError(
                f"checkpoint architecture {meta['arch']} does not match dataset-derived "
                f"architecture {tr.net.arch.to_dict()}")
        tr.net.store.load_state_dict(ckpt.params)
        tr.stage = meta["stage"]
        tr.iter_in_stage = meta["iter_in_stage"]
        tr.beta = meta["beta"]
        tr.record.resolved_beta = meta["beta"] if config.beta is None else None
        adam_meta = meta["adam"]
        tr.adam = nn.AdamState(lr=adam_meta["lr"], beta1=adam_meta["beta1"],
                               beta2=adam_meta["beta2"], eps=adam_meta["eps"],
                               step=adam_meta["step"],
                               m={k: v.copy() for k, v in ckpt.adam_m.items()},
                               v={k: v.copy() for k, v in ckpt.adam_v.items()})
        for k, g in tr.rngs.items():
            g.bit_generator.state = meta["rng_states"][k]
        if meta["has_imputation"]:
            imp = {k.split("/", 1)[1]: v for k, v in ckpt.extra_arrays.items()
                   if k.startswith("imp/")}
            tr.net.load_imputation_state(imp)
        tr.front = SelectionFront()
        for i, fe in enumerate(meta["front"]):
            params = {k.split("/", 1)[1]: v.copy() for k, v in ckpt.extra_arrays.items()
                      if k.startswith(f"front{i}/")}
            tr.front.entries.append(FrontEntry(fe["gap"], fe["task"], fe["stage"],
                                               fe["iteration"], params))
        return tr


def run_stage1(config: TrainConfig, dataset: EncodedDataset) -> tuple[FairCdaNetwork, RunRecord]:
    """Stage 1 only: returns the network with the imputation model frozen."""
    tr = Trainer(config, dataset)
    while tr.stage == 1 and not tr.done:
        tr.step()
    return tr.net, tr.record


def run_stage2(trainer: Trainer) -> tuple[FairCdaNetwork, RunRecord]:
    """Continue a trainer that has completed Stage 1 through Stage 2."""
    if trainer.stage != 2:
        raise TrainingError("run_stage2 requires a trainer already in stage 2")
    while not trainer.done:
        trainer.step()
    trainer.finalize()
    return trainer.net, trainer.record


def train_full(config: TrainConfig, dataset: EncodedDataset,
               checkpoint_path=None) -> tuple[FairCdaNetwork, RunRecord]:
    """Both stages plus model selection; deterministic given config and data."""
    tr = Trainer(config, dataset)
    record = tr.run()
    if checkpoint_path is not None:
        tr.save(checkpoint_path)
        record.checkpoint_path = str(checkpoint_path)
    return tr.net, record


# ---------------------------------------------------------------------------
# multi-seed orchestration
# ---------------------------------------------------------------------------

def _multi_seed_worker(args) -> dict:
    config_dict, provider, seed = args
    config = TrainConfig.from_dict({**config_dict, "seed": seed})
    dataset = provider()
    _, record = train_full(config, dataset)
    return record.summary()


def aggregate_summaries(summaries: list[dict], which: str = "selected",
                        split: str = "test") -> dict:
    """Mean/std of test-time metrics across seeds."""
    keys = ("ap", "auc", "dp", "eo", "gap")
    rows = [s[which][split] for s in summaries]
    agg = {}
    for k in keys:
        vals = np.array([r[k] for r in rows], dtype=np.float64)
        agg[f"{k}_mean"] = float(vals.mean())
        agg[f"{k}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    agg["seed_count"] = len(rows)
    return agg


def run_multi_seed(config: TrainConfig, data_provider, seeds,
                   jobs: int = 1) -> list[dict]:
    """One full run per seed; ``data_provider`` is a picklable zero-argument
    callable so worker processes can rebuild the dataset themselves."""
    tasks = [(config.to_dict(), data_provider, int(s)) for s in seeds]
    if jobs <= 1 or len(tasks) <= 1:
        return [_multi_seed_worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_multi_seed_worker, tasks))
