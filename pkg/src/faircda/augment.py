"""Directional perturbation of attribute features and the Stage-2 losses.

The perturbation pushes each sample's attribute features along the direction
that increases the current attribute head's prediction loss, scaled to an
exact per-sample length alpha drawn uniformly from [0, lambda].  The
direction is detached: Stage-2 gradients flow into the features being
perturbed but never through the normalization itself.  Labels for the
perturbed features come from the frozen end-of-Stage-1 task head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .data import LabeledBatch
from .disentangle import (FairCdaNetwork, branch_losses, orth_loss, task_loss,
                          _as_col)

PERTURB_GUARD = 1e-12


class ImputationUnsetError(RuntimeError):
    """Stage-2 augmentation needs the frozen imputation snapshot."""


@dataclass
class AugmentPlan:
    """The detached ingredients of one augmentation step.

    These are data, not graph nodes: per Eq.-(3) semantics the perturbation
    direction is a generation step and the imputed labels are targets, so no
    gradient flows through either.  Holding a plan fixed makes the Stage-2
    objective a clean function of the parameters, which is what the
    finite-difference check differentiates.
    """

    alpha: np.ndarray    # per-sample sizes, drawn from U(0, lambda)
    grad: np.ndarray     # attribute-loss gradient rows at z_a
    y_check: np.ndarray  # frozen-head soft labels for the perturbed features


@dataclass
class AugmentedBatch:
    z: ad.Tensor            # shared features, kept for the orthogonality term
    z_y: ad.Tensor          # non-sensitive branch features
    z_a: ad.Tensor          # original sensitive branch features
    z_a_tilde: ad.Tensor    # perturbed sensitive branch features
    alpha: np.ndarray       # per-sample perturbation sizes
    y: np.ndarray           # original labels
    a: np.ndarray           # attributes
    y_check: np.ndarray     # imputed soft labels in [0, 1]


def sample_alpha(lam: float, n: int, rng: np.random.Generator) -> np.ndarray:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return rng.uniform(0.0, lam, size=n)


def perturb(z_a: ad.Tensor, grad: np.ndarray, alpha: np.ndarray,
            guard: float = PERTURB_GUARD) -> ad.Tensor:
    """z_a + alpha * grad / ||grad|| per row; rows under the guard stay put.

    The displacement is a constant in the graph, so gradients reach z_a but
    not the direction.
    """
    grad = np.asarray(grad, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    if grad.shape != z_a.shape or len(alpha) != z_a.shape[0]:
        raise ad.ShapeError(
            f"perturb: grad {grad.shape} / alpha {alpha.shape} vs z_a {z_a.shape}")
    if np.any(alpha < 0):
        raise ValueError("alpha must be >= 0")
    delta = kernels.perturb_delta(grad, alpha, guard)
    return ad.add(z_a, ad.constant(delta))


def attr_grad(net: FairCdaNetwork, z_a: ad.Tensor, a: np.ndarray) -> np.ndarray:
    """Detached gradient of the attribute prediction loss at z_a."""
    l_a = ad.mean_all(ad.bce(net.attr_head(z_a), _as_col(a)))
    return ad.grad_wrt(l_a, z_a).data


def impute_labels(net: FairCdaNetwork, z_y: ad.Tensor, z_a_tilde: ad.Tensor) -> np.ndarray:
    """Frozen task head applied to the current extractor features.

    Returns probabilities in [0, 1]; nothing here joins the training graph.
    """
    if net.imputation_state is None:
        raise ImputationUnsetError("imputation model not frozen yet; run Stage 1 first")
    w = net.imputation_state["g.0.W"]
    b = net.imputation_state["g.0.b"]
    feats = np.concatenate([z_y.data, z_a_tilde.data], axis=1)
    return kernels.sigmoid(feats @ w + b).ravel()


def augment_batch(net: FairCdaNetwork, batch: LabeledBatch, lam: float,
                  rng: np.random.Generator | None = None,
                  hard_impute: bool = False,
                  plan: AugmentPlan | None = None) -> AugmentedBatch:
    """Extract with the current network, perturb the attribute branch, and
    label the result with the frozen imputation head.

    Passing a previously built plan replays its direction, sizes, and imputed
    labels against the current parameters instead of re-deriving them.
    """
    if net.imputation_state is None:
        raise ImputationUnsetError("imputation model not frozen yet; run Stage 1 first")
    z, z_y, z_a = net.extract(ad.constant(batch.x))
    if plan is None:
        if rng is None:
            raise ValueError("augment_batch needs an rng when no plan is given")
        grad = attr_grad(net, z_a, batch.a)
        alpha = sample_alpha(lam, len(batch), rng)
        z_a_tilde = perturb(z_a, grad, alpha)
        y_check = impute_labels(net, z_y, z_a_tilde)
        if hard_impute:
            y_check = (y_check > 0.5).astype(np.float64)
        plan = AugmentPlan(alpha=alpha, grad=grad, y_check=y_check)
    else:
        z_a_tilde = perturb(z_a, plan.grad, plan.alpha)
    return AugmentedBatch(z=z, z_y=z_y, z_a=z_a, z_a_tilde=z_a_tilde,
                          alpha=plan.alpha, y=batch.y, a=batch.a,
                          y_check=plan.y_check)


@dataclass
class Stage2Bundle:
    aug_task: ad.Tensor      # loss against original labels on augmented features
    imputed: ad.Tensor       # loss against imputed soft labels
    label_branch: ad.Tensor
    attr_branch: ad.Tensor
    orth: ad.Tensor
    total: ad.Tensor

    def values(self) -> dict[str, float]:
        return {
            "aug_task": self.aug_task.item(),
            "imputed": self.imputed.item(),
            "label_branch": self.label_branch.item(),
            "attr_branch": self.attr_branch.item(),
            "orth": self.orth.item(),
            "total": self.total.item(),
        }


def stage2_objective(net: FairCdaNetwork, aug: AugmentedBatch, gamma: float,
                     beta: float, orth_enabled: bool = True,
                     include_task_loss: bool = False,
                     supplement_original: bool = False) -> Stage2Bundle:
    """gamma * aug-label loss + (1-gamma) * imputed loss + beta * penalties.

    The two augmented-feature losses go through the spare task head.  The
    penalty terms are evaluated on the original features, exactly as in the
    first stage.  ``include_task_loss`` / ``supplement_original`` are the
    experimental variants (original-feature task loss added back; original
    samples mixed into the augmented loss at half weight).
    """
    if not (0.0 <= gamma <= 1.0):
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    preds_aug = net.task_head(aug.z_y, aug.z_a_tilde, use_aug_head=True)
    l_aug = ad.mean_all(ad.bce(preds_aug, _as_col(aug.y)))
    if supplement_original:
        l_orig_aughead = task_loss(net, aug.z_y, aug.z_a, aug.y, use_aug_head=True)
        l_aug = ad.scale(ad.add(l_aug, l_orig_aughead), 0.5)
    if gamma < 1.0:
        l_imp = ad.mean_all(ad.bce(preds_aug, _as_col(aug.y_check)))
    else:
        l_imp = ad.constant(np.asarray(0.0))
    l_y, l_a = branch_losses(net, aug.z_y, aug.z_a, aug.y, aug.a)
    l_orth = orth_loss(l_y, l_a, aug.z) if orth_enabled else ad.constant(np.asarray(0.0))
    penalty = ad.add(ad.add(l_y, l_a), l_orth)
    total = ad.add(ad.add(ad.scale(l_aug, gamma), ad.scale(l_imp, 1.0 - gamma)),
                   ad.scale(penalty, beta))
    if include_task_loss:
        total = ad.add(total, task_loss(net, aug.z_y, aug.z_a, aug.y))
    return Stage2Bundle(aug_task=l_aug, imputed=l_imp, label_branch=l_y,
                        attr_branch=l_a, orth=l_orth, total=total)
