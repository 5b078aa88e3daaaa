"""Training objectives for density regression.

The supervised term is the plain Euclidean norm of the residual map,
averaged over the batch.  The unsupervised term fits predictions to GP
pseudo targets with a variance-scaled norm plus a log-variance penalty:

    per sample:  |y_pred - mean|_2 / variance + log(variance)

and the combined objective is  supervised + lambda_un * unsupervised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .density import DensityMap
from .errors import ConfigError, ContractError, ShapeError
from .gp import GPPosterior

BREAKDOWN_TOLERANCE = 1e-12


@dataclass
class LossValue:
    """A scalar loss node plus its named breakdown for logging.

    ``components`` holds raw values and ``weights`` how each enters the
    scalar; purely informational entries carry weight zero.  The weighted
    component sum always reproduces the scalar.
    """
    scalar: Node
    components: dict[str, float]
    weights: dict[str, float]

    def __post_init__(self):
        total = 0.0
        for name, value in self.components.items():
            total += self.weights.get(name, 1.0) * value
        scalar = float(self.scalar.value)
        if abs(total - scalar) > BREAKDOWN_TOLERANCE * max(1.0, abs(scalar)):
            raise ContractError(
                f"loss breakdown {total!r} does not reproduce scalar {scalar!r}")

    @property
    def value(self) -> float:
        return float(self.scalar.value)


def _target_array(y_gt):
    if isinstance(y_gt, DensityMap):
        return y_gt.values
    return ad.as_array(y_gt)


def _stack_targets(y_pred: Node, y_gt):
    """Match ground truth to the prediction node's layout."""
    if isinstance(y_gt, (list, tuple)):
        arr = np.stack([_target_array(g) for g in y_gt])
    else:
        arr = _target_array(y_gt)
    arr = arr.reshape(y_pred.value.shape) if arr.size == y_pred.value.size else arr
    if arr.shape != y_pred.value.shape:
        raise ShapeError(
            f"loss: prediction {y_pred.value.shape} and target {arr.shape} differ")
    return arr


def supervised_loss(y_pred: Node, y_gt) -> LossValue:
    """Batch-averaged Euclidean norm of the residual density map.

    ``y_pred`` is a single [H,W]/[1,H,W] map or a batch [N,1,H,W]; ``y_gt``
    is a DensityMap, an array, or a list of them for a batch.
    """
    target = _stack_targets(y_pred, y_gt)
    diff = ad.sub(y_pred, ad.constant(target))
    sq = ad.mul(diff, diff)
    if y_pred.value.ndim == 4:
        per_sample = ad.sqrt(ad.sum(sq, axis=(1, 2, 3)))
        loss = ad.mean(per_sample)
    else:
        loss = ad.sqrt(ad.sum(sq))
    value = float(loss.value)
    return LossValue(loss, {"supervised": value}, {"supervised": 1.0})


def unsupervised_loss(y_pred: Node, pseudo, variance) -> LossValue:
    """Pseudo-target fit weighted by predictive variance, batch-averaged.

    ``pseudo`` is one GPPosterior or a list (one per batch row); ``variance``
    the matching differentiable variance node(s).  Entries that are None are
    skipped (e.g. degenerate latents); at least one sample must remain.
    """
    pseudos = pseudo if isinstance(pseudo, (list, tuple)) else [pseudo]
    variances = variance if isinstance(variance, (list, tuple)) else [variance]
    if len(pseudos) != len(variances):
        raise ShapeError(
            f"unsupervised_loss: {len(pseudos)} pseudo targets vs "
            f"{len(variances)} variance nodes")
    batched = y_pred.value.ndim == 4
    n_rows = y_pred.value.shape[0] if batched else 1
    if len(pseudos) != n_rows:
        raise ShapeError(
            f"unsupervised_loss: prediction batch {n_rows} vs {len(pseudos)} targets")

    mean_stack = np.zeros_like(y_pred.value)
    valid = []
    for i, (post, var_node) in enumerate(zip(pseudos, variances)):
        if post is None or var_node is None:
            continue
        if not isinstance(post, GPPosterior):
            raise ShapeError("unsupervised_loss: pseudo targets must be GPPosterior")
        if not float(var_node.value) > 0.0:
            raise ContractError(
                f"unsupervised_loss: non-positive variance {float(var_node.value)}")
        row = mean_stack[i] if batched else mean_stack
        row.reshape(-1)[:] = post.mean
        valid.append((i, var_node))
    if not valid:
        raise ContractError(
            "unsupervised_loss: every sample in the batch was skipped; "
            "callers must drop fully-degenerate batches")

    diff = ad.sub(y_pred, ad.constant(mean_stack))
    sq = ad.mul(diff, diff)
    norms = ad.sqrt(ad.sum(sq, axis=(1, 2, 3))) if batched else ad.sqrt(ad.sum(sq))

    total = None
    log_sum = 0.0
    for i, var_node in valid:
        fit = ad.div(ad.select(norms, i) if batched else norms, var_node)
        term = ad.add(fit, ad.log(var_node))
        log_sum += float(np.log(var_node.value))
        total = term if total is None else ad.add(total, term)
    loss = ad.scalar_mul(total, 1.0 / len(valid))
    value = float(loss.value)
    return LossValue(loss,
                     {"unsupervised": value, "variance_term": log_sum / len(valid)},
                     {"unsupervised": 1.0, "variance_term": 0.0})


def combined_loss(supervised: LossValue, unsupervised: LossValue,
                  lambda_un: float) -> LossValue:
    """supervised + lambda_un * unsupervised, with the full breakdown."""
    lambda_un = float(lambda_un)
    if lambda_un < 0.0:
        raise ConfigError(f"lambda_un must be >= 0, got {lambda_un}")
    scalar = ad.add(supervised.scalar, ad.scalar_mul(unsupervised.scalar, lambda_un))
    components = {
        "supervised": supervised.value,
        "unsupervised": unsupervised.value,
        "variance_term": unsupervised.components.get("variance_term", 0.0),
    }
    weights = {"supervised": 1.0, "unsupervised": lambda_un, "variance_term": 0.0}
    return LossValue(scalar, components, weights)


def ranking_hinge_loss(full_count: Node, sub_count: Node,
                       margin: float = 0.0) -> LossValue:
    """Hinge on the containment constraint count(sub) <= count(full).

    Both arguments are scalar predicted-count nodes; the loss is
    max(0, sub - full + margin).
    """
    if full_count.value.size != 1 or sub_count.value.size != 1:
        raise ShapeError("ranking_hinge_loss: counts must be scalar nodes")
    loss = ad.relu(ad.add(ad.sub(sub_count, full_count), ad.constant(float(margin))))
    value = float(loss.value)
    return LossValue(loss, {"ranking": value}, {"ranking": 1.0})
