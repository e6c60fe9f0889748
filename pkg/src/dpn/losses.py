"""Class-balanced cross-entropy with deep supervision.

The vessel/background imbalance is handled by weighting the vessel term with
beta = N- / (N+ + N-), recomputed from each training crop. The loss is a sum
over pixels (not a mean), and with auxiliary heads enabled the objective is
the sum of the per-head losses, all sharing the beta of the iteration.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

log = logging.getLogger(__name__)


class LossError(ValueError):
    pass


@dataclass
class LossReport:
    head_losses: list
    total: float
    beta: float
    n_pos: int
    n_neg: int
    decay: float = 0.0


def balance_weight(label):
    """beta = N- / (N+ + N-) over all pixels of the crop."""
    label = np.asarray(label)
    if label.size == 0:
        raise LossError("balance_weight: empty label")
    n_pos = int(np.count_nonzero(label))
    n_neg = label.size - n_pos
    if n_pos == 0:
        log.warning("balance_weight: crop contains no vessel pixels "
                    "(beta=1, background term vanishes)")
    return n_neg / (n_pos + n_neg)


def class_balanced_bce(p, y, beta):
    """-beta * sum_{y=1} log p  - (1-beta) * sum_{y=0} log(1-p).

    Direct probability-domain form, summed over pixels; p must lie strictly
    inside (0, 1). The training path evaluates the same quantity from logits
    (Tape.cbce) for numerical stability.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    if p.shape != y.shape:
        raise ShapeError(f"class_balanced_bce: prediction {p.shape} vs "
                         f"label {y.shape}")
    ym = y.astype(bool)
    return float(-beta * np.log(p[ym]).sum()
                 - (1.0 - beta) * np.log(1.0 - p[~ym]).sum())


def total_objective(tape, head_logits, y, lam=5e-4, params=None):
    """Sum of per-head class-balanced BCE losses, beta shared per iteration.

    Returns (loss_id, LossReport). Weight decay is applied inside the ADAM
    step (coupled form); when ``params`` is given the (lam/2)*||theta||^2
    term is evaluated for the report's bookkeeping only.
    """
    if not head_logits:
        raise LossError("total_objective: no head logits")
    y = np.asarray(y)
    for lid in head_logits:
        if tape.val(lid).shape[2:] != y.shape:
            raise ShapeError(f"total_objective: head map "
                             f"{tape.val(lid).shape[2:]} vs label {y.shape}")
    beta = balance_weight(y)
    n_pos = int(np.count_nonzero(y))
    loss_ids = [tape.cbce(lid, y, beta) for lid in head_logits]
    total_id = loss_ids[0]
    for lid in loss_ids[1:]:
        total_id = tape.add(total_id, lid)
    head_losses = [float(tape.val(i).reshape(-1)[0]) for i in loss_ids]
    decay = 0.0
    if params is not None and lam > 0:
        decay = 0.5 * lam * sum(float((p.value.astype(np.float64) ** 2).sum())
                                for p in params)
    report = LossReport(head_losses=head_losses,
                        total=sum(head_losses) + decay,
                        beta=beta, n_pos=n_pos, n_neg=y.size - n_pos,
                        decay=decay)
    return total_id, report
