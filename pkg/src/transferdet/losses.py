"""Training losses, each returning (value, analytic gradient).

Conventions shared across the package:

* Score/logit matrices are (C+1) x K: one row per object class, the last
  row for background, one column per proposal.
* Probability matrices have nonnegative columns summing to 1.
* All cross-entropy style losses are negative-log form, so every loss is
  nonnegative and minimized.

The losses here are the background-activation penalty (``bd_loss``), the
teacher-student distillation loss (``sdk_loss``), the image-level
multi-label loss driving the first pseudo-labelling classifier, the
pseudo-label cross-entropy for the later classifiers, and the per-stage
weighted totals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import BBox
from .numerics import PROB_FLOOR, column_softmax, sigmoid


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the per-stage weighted loss totals.

    Defaults: the fine-tuning stage weighs both regularizers at 0.5 with a
    unit main loss; the weakly-supervised stage scales distillation by 150
    and the labelling loss by 50.
    """

    lambda_main: float = 1.0
    lambda_bd: float = 0.5
    lambda_sdk: float = 0.5
    lambda_wstd_sdk: float = 150.0
    lambda_wstd_rol: float = 50.0

    def __post_init__(self):
        for name in (
            "lambda_main",
            "lambda_bd",
            "lambda_sdk",
            "lambda_wstd_sdk",
            "lambda_wstd_rol",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def check_score_matrix(scores: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Validate a probability matrix: nonnegative columns summing to 1."""
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2:
        raise ValueError(f"score matrix must be 2-D, got shape {scores.shape}")
    if np.any(scores < 0):
        raise ValueError("score matrix has negative entries")
    if scores.shape[1] > 0:
        sums = scores.sum(axis=0)
        bad = np.abs(sums - 1.0) > tol
        if np.any(bad):
            k = int(np.argmax(bad))
            raise ValueError(f"score column {k} sums to {sums[k]}, expected 1")
    return scores


def bd_mask(grid_height: int, grid_width: int, gt_boxes: Sequence[BBox]) -> np.ndarray:
    """Boolean H x W mask, True where a cell belongs to the background.

    A cell is foreground iff its center lies inside at least one
    ground-truth box; an empty box list makes everything background.
    """
    if grid_height < 1 or grid_width < 1:
        raise ValueError("grid dimensions must be >= 1")
    mask = np.ones((grid_height, grid_width), dtype=bool)
    for i in range(grid_height):
        cy = (i + 0.5) / grid_height
        for j in range(grid_width):
            cx = (j + 0.5) / grid_width
            if any(b.contains_point(cx, cy) for b in gt_boxes):
                mask[i, j] = False
    return mask


def bd_loss(grid: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Squared-L2 penalty on backbone activations over background cells.

    Returns the sum of squared activations across all channels of
    background cells, and its gradient with respect to the grid (exactly
    zero on foreground cells).
    """
    grid = np.asarray(grid, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if grid.ndim != 3:
        raise ValueError(f"feature grid must be H x W x D, got shape {grid.shape}")
    if mask.shape != grid.shape[:2]:
        raise ValueError(
            f"mask shape {mask.shape} does not match grid cells {grid.shape[:2]}"
        )
    weighted = grid * mask[:, :, None]
    value = float(np.sum(weighted * weighted))
    grad = 2.0 * weighted
    return value, grad


def sdk_loss(
    teacher: np.ndarray, student_logits: np.ndarray, weighted: bool = False
) -> tuple[float, np.ndarray]:
    """Cross entropy from a frozen teacher distribution to student logits.

    Student probabilities are the per-column softmax of ``student_logits``.
    In the weighted variant each term is additionally scaled by the teacher
    probability itself, emphasizing the classes the teacher is confident
    about.  The gradient is closed form through the softmax.
    """
    teacher = check_score_matrix(teacher)
    student_logits = np.asarray(student_logits, dtype=float)
    if teacher.shape != student_logits.shape:
        raise ValueError(
            f"teacher shape {teacher.shape} != student shape {student_logits.shape}"
        )
    probs = column_softmax(student_logits)
    target = teacher * teacher if weighted else teacher
    value = -float(np.sum(target * np.log(np.maximum(probs, PROB_FLOOR))))
    # Per column k: d/dz of -sum_c target(c,k) log softmax(z)(c,k)
    #             = probs(:,k) * sum_c target(c,k) - target(:,k)
    col_mass = target.sum(axis=0, keepdims=True)
    grad = probs * col_mass - target
    return value, grad


def image_score(classifier1_logits: np.ndarray) -> np.ndarray:
    """Per-class image score: sigmoid of logit sums over proposals.

    Only the object rows contribute; the trailing background row is
    excluded from the returned vector.
    """
    logits = np.asarray(classifier1_logits, dtype=float)
    if logits.ndim != 2 or logits.shape[0] < 2:
        raise ValueError(f"expected (C+1) x K logits, got shape {logits.shape}")
    if logits.shape[1] == 0:
        raise ValueError("image score needs at least one proposal")
    row_sums = logits[:-1, :].sum(axis=1)
    return sigmoid(row_sums)


def multilabel_loss(p_img: np.ndarray, y_img: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross entropy between image scores and the image label vector.

    Probabilities are clamped to [1e-12, 1 - 1e-12] before the logs; the
    returned gradient is with respect to the (unclamped) input scores and
    is zero wherever the clamp is active.
    """
    p = np.asarray(p_img, dtype=float)
    y = np.asarray(y_img, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"score shape {p.shape} != label shape {y.shape}")
    clamped = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    value = -float(np.sum(y * np.log(clamped) + (1.0 - y) * np.log(1.0 - clamped)))
    grad = (-y / clamped + (1.0 - y) / (1.0 - clamped)) * (p == clamped)
    return value, grad


def image_multilabel_loss(
    classifier1_logits: np.ndarray, y_img: np.ndarray
) -> tuple[float, np.ndarray]:
    """Multi-label loss applied to image scores, differentiated to logits.

    Composition of :func:`image_score` and :func:`multilabel_loss`; the
    gradient with respect to logit (c, k) collapses to p_c - y_c for object
    rows and zero for the background row.
    """
    logits = np.asarray(classifier1_logits, dtype=float)
    p = image_score(logits)
    value, _ = multilabel_loss(p, y_img)
    y = np.asarray(y_img, dtype=float)
    grad = np.zeros_like(logits)
    grad[:-1, :] = (p - y)[:, None]
    return value, grad


def rol_classifier_loss(
    student_logits: np.ndarray, pseudo: np.ndarray
) -> tuple[float, np.ndarray]:
    """Cross entropy between softmaxed classifier logits and pseudo labels.

    Pseudo-label columns are either all-zero (unlabelled proposal,
    contributing exactly zero loss and gradient) or carry a single soft
    weight on the mined class.
    """
    student_logits = np.asarray(student_logits, dtype=float)
    pseudo = np.asarray(pseudo, dtype=float)
    if pseudo.shape != student_logits.shape:
        raise ValueError(
            f"pseudo label shape {pseudo.shape} != logits shape {student_logits.shape}"
        )
    if np.any(pseudo < 0):
        raise ValueError("pseudo labels must be nonnegative")
    probs = column_softmax(student_logits)
    value = -float(np.sum(pseudo * np.log(np.maximum(probs, PROB_FLOOR))))
    col_mass = pseudo.sum(axis=0, keepdims=True)
    grad = probs * col_mass - pseudo
    return value, grad


def proposal_cls_loss(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Fully supervised per-proposal cross entropy (the main detection loss).

    ``labels`` holds one integer class per proposal, the background class
    being the last row index.
    """
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if logits.ndim != 2 or labels.shape != (logits.shape[1],):
        raise ValueError(
            f"labels shape {labels.shape} does not match logits {logits.shape}"
        )
    if np.any(labels < 0) or np.any(labels >= logits.shape[0]):
        raise ValueError("label index outside class range")
    probs = column_softmax(logits)
    k_idx = np.arange(logits.shape[1])
    value = -float(
        np.sum(np.log(np.maximum(probs[labels, k_idx], PROB_FLOOR)))
    )
    grad = probs.copy()
    grad[labels, k_idx] -= 1.0
    return value, grad


def rol_total(per_classifier_losses: Sequence[float]) -> float:
    """Sum of the per-classifier labelling losses."""
    if len(per_classifier_losses) == 0:
        raise ValueError("need at least one classifier loss")
    return float(sum(per_classifier_losses))


def lstd_total(main: float, bd: float, sdk: float, w: LossWeights) -> float:
    """Weighted total of the low-shot fine-tuning stage."""
    return w.lambda_main * main + w.lambda_bd * bd + w.lambda_sdk * sdk


def wstd_total(sdk: float, rol: float, w: LossWeights) -> float:
    """Weighted total of the weakly-supervised stage."""
    return w.lambda_wstd_sdk * sdk + w.lambda_wstd_rol * rol
