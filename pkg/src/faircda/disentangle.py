"""The decomposed network and its first-stage losses.

The network splits a shared representation z into a label branch z_y and an
attribute branch z_a, each with its own small classifier head, plus a task
head over the concatenated branches and a spare task head used for augmented
features in the second stage.  The orthogonality penalty pushes the two
branch-loss gradients at z apart: it is the mean per-sample squared cosine
between grad_z(label loss) and grad_z(attribute loss), and because gradients
are graph nodes it trains end to end like any other loss term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .data import LabeledBatch

ZERO_GRAD_GUARD = 1e-12


@dataclass(frozen=True)
class FairCdaArch:
    """Layer layout: x -> h (two layers) -> {h_y, h_a} -> heads.

    With input width 120 and the default 200/200 dims this counts 146,004
    parameters (the plain backbone variant counts 64,601); the layer-by-layer
    breakdown lives in the README.
    """

    input_dim: int
    hidden_dim: int = 200
    branch_dim: int = 200

    def layer_specs(self) -> list[nn.LayerSpec]:
        h, b = self.hidden_dim, self.branch_dim
        return [
            nn.LayerSpec("h.0", self.input_dim, h, "relu"),
            nn.LayerSpec("h.1", h, h, "relu"),
            nn.LayerSpec("h_y.0", h, b, "relu"),
            nn.LayerSpec("h_a.0", h, b, "relu"),
            nn.LayerSpec("g_y.0", b, 1, "sigmoid"),
            nn.LayerSpec("g_a.0", b, 1, "sigmoid"),
            nn.LayerSpec("g.0", 2 * b, 1, "sigmoid"),
            nn.LayerSpec("g_aug.0", 2 * b, 1, "sigmoid"),
        ]

    def backbone_specs(self) -> list[nn.LayerSpec]:
        """The undecomposed reference model (used by ERM-style baselines)."""
        h = self.hidden_dim
        return [
            nn.LayerSpec("h.0", self.input_dim, h, "relu"),
            nn.LayerSpec("h.1", h, h, "relu"),
            nn.LayerSpec("g.0", h, 1, "sigmoid"),
        ]

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden_dim": self.hidden_dim,
                "branch_dim": self.branch_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "FairCdaArch":
        return cls(**d)


@dataclass
class LossBundle:
    """Stage-1 loss terms as graph nodes; .total is the scalar to step on."""

    task: ad.Tensor
    label_branch: ad.Tensor
    attr_branch: ad.Tensor
    orth: ad.Tensor
    total: ad.Tensor

    def values(self) -> dict[str, float]:
        return {
            "task": self.task.item(),
            "label_branch": self.label_branch.item(),
            "attr_branch": self.attr_branch.item(),
            "orth": self.orth.item(),
            "total": self.total.item(),
        }


class FairCdaNetwork:
    """Parameter store plus the frozen imputation snapshot."""

    IMPUTATION_GROUPS = ("h", "h_y", "h_a", "g")

    def __init__(self, arch: FairCdaArch, store: nn.ParameterStore):
        self.arch = arch
        self.store = store
        self.layers = {spec.name: spec for spec in arch.layer_specs()}
        self._imputation_state: dict[str, np.ndarray] | None = None

    @classmethod
    def build(cls, arch: FairCdaArch, seed: int) -> "FairCdaNetwork":
        return cls(arch, nn.init_parameters(arch.layer_specs(), seed))

    # -- imputation snapshot ------------------------------------------------
    @property
    def imputation_state(self) -> dict[str, np.ndarray] | None:
        return self._imputation_state

    def freeze_imputation(self):
        """Snapshot (h, h_y, h_a, g) once; read-only afterwards."""
        state = {}
        for group in self.IMPUTATION_GROUPS:
            for name in self.store.group_names(group):
                arr = self.store.tensor(name).data.copy()
                arr.setflags(write=False)
                state[name] = arr
        self._imputation_state = state

    def load_imputation_state(self, state: dict[str, np.ndarray]):
        frozen = {}
        for k, v in state.items():
            arr = np.array(v, dtype=np.float64)
            arr.setflags(write=False)
            frozen[k] = arr
        self._imputation_state = frozen

    def init_aug_head_from_task_head(self):
        self.store.tensor("g_aug.0.W").data = self.store.tensor("g.0.W").data.copy()
        self.store.tensor("g_aug.0.b").data = self.store.tensor("g.0.b").data.copy()

    # -- forward pieces -----------------------------------------------------
    def _dense(self, name: str, x: ad.Tensor) -> ad.Tensor:
        return nn.dense_forward(self.store, self.layers[name], x)

    def extract(self, x: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
        """x -> (z, z_y, z_a); keep z around for gradient extraction."""
        z = self._dense("h.1", self._dense("h.0", x))
        z_y = self._dense("h_y.0", z)
        z_a = self._dense("h_a.0", z)
        return z, z_y, z_a

    def label_head(self, z_y: ad.Tensor) -> ad.Tensor:
        return self._dense("g_y.0", z_y)

    def attr_head(self, z_a: ad.Tensor) -> ad.Tensor:
        return self._dense("g_a.0", z_a)

    def task_head(self, z_y: ad.Tensor, z_a: ad.Tensor, use_aug_head: bool = False) -> ad.Tensor:
        name = "g_aug.0" if use_aug_head else "g.0"
        return self._dense(name, ad.concat([z_y, z_a]))

    def predict_proba(self, x: np.ndarray, use_aug_head: bool = False) -> np.ndarray:
        _, z_y, z_a = self.extract(ad.constant(np.atleast_2d(x)))
        return self.task_head(z_y, z_a, use_aug_head).data.ravel()

    def attr_proba(self, x: np.ndarray) -> np.ndarray:
        _, _, z_a = self.extract(ad.constant(np.atleast_2d(x)))
        return self.attr_head(z_a).data.ravel()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _as_col(v: np.ndarray) -> ad.Tensor:
    return ad.constant(np.asarray(v, dtype=np.float64).reshape(-1, 1))


def branch_losses(net: FairCdaNetwork, z_y: ad.Tensor, z_a: ad.Tensor,
                  y: np.ndarray, a: np.ndarray) -> tuple[ad.Tensor, ad.Tensor]:
    l_y = ad.mean_all(ad.bce(net.label_head(z_y), _as_col(y)))
    l_a = ad.mean_all(ad.bce(net.attr_head(z_a), _as_col(a)))
    return l_y, l_a


def orth_loss(l_y: ad.Tensor, l_a: ad.Tensor, z: ad.Tensor,
              guard: float = ZERO_GRAD_GUARD) -> ad.Tensor:
    """Mean per-sample cos^2 between the two branch-loss gradients at z.

    Batch means put a common 1/n on every gradient row, which the cosine
    cancels, so mean-loss gradients and per-sample-loss gradients agree here.
    Samples where either gradient row has norm under the guard contribute 0.
    """
    gy = ad.grad_wrt(l_y, z)
    ga = ad.grad_wrt(l_a, z)
    inner = ad.rowdot(gy, ga)
    ny = ad.rowdot(gy, gy)
    na = ad.rowdot(ga, ga)
    alive = ((ny.data >= guard ** 2) & (na.data >= guard ** 2)).astype(np.float64)
    den = ad.mul(ny, na)
    safe_den = ad.add(den, ad.constant(1.0 - alive))  # 1 where masked out
    cos2 = ad.mul(ad.constant(alive), ad.divide(ad.square(inner), safe_den))
    return ad.mean_all(cos2)


def task_loss(net: FairCdaNetwork, z_y: ad.Tensor, z_a: ad.Tensor, y: np.ndarray,
              use_aug_head: bool = False) -> ad.Tensor:
    return ad.mean_all(ad.bce(net.task_head(z_y, z_a, use_aug_head), _as_col(y)))


def stage1_objective(net: FairCdaNetwork, batch: LabeledBatch, beta: float,
                     orth_enabled: bool = True,
                     use_aug_head: bool = False) -> LossBundle:
    """task + beta * (label branch + attribute branch + orthogonality)."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    z, z_y, z_a = net.extract(ad.constant(batch.x))
    l_task = task_loss(net, z_y, z_a, batch.y, use_aug_head)
    l_y, l_a = branch_losses(net, z_y, z_a, batch.y, batch.a)
    l_orth = orth_loss(l_y, l_a, z) if orth_enabled else ad.constant(np.asarray(0.0))
    penalty = ad.add(ad.add(l_y, l_a), l_orth)
    total = ad.add(l_task, ad.scale(penalty, beta))
    return LossBundle(task=l_task, label_branch=l_y, attr_branch=l_a,
                      orth=l_orth, total=total)


def resolve_beta(net: FairCdaNetwork, batch: LabeledBatch) -> float:
    """Balance rule: median per-sample task loss over median per-sample sum
    of the three penalty terms, measured once on the first batch."""
    z, z_y, z_a = net.extract(ad.constant(batch.x))
    task_i = ad.bce(net.task_head(z_y, z_a), _as_col(batch.y)).data.ravel()
    ly_i = ad.bce(net.label_head(z_y), _as_col(batch.y)).data.ravel()
    la_i = ad.bce(net.attr_head(z_a), _as_col(batch.a)).data.ravel()

    l_y = ad.mean_all(ad.bce(net.label_head(z_y), _as_col(batch.y)))
    l_a = ad.mean_all(ad.bce(net.attr_head(z_a), _as_col(batch.a)))
    gy = ad.grad_wrt(l_y, z).data
    ga = ad.grad_wrt(l_a, z).data
    inner = np.einsum("ij,ij->i", gy, ga)
    ny = np.einsum("ij,ij->i", gy, gy)
    na = np.einsum("ij,ij->i", ga, ga)
    alive = (ny >= ZERO_GRAD_GUARD ** 2) & (na >= ZERO_GRAD_GUARD ** 2)
    lperp_i = np.where(alive, inner ** 2 / np.where(alive, ny * na, 1.0), 0.0)

    denom = float(np.median(ly_i + la_i + lperp_i))
    if denom <= 0.0:
        return 1.0
    return float(np.median(task_i)) / denom
