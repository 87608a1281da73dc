"""The differentiable detector stand-in.

A per-cell linear map (the backbone) turns raw observation grids into
feature grids; proposals are mean-pooled over the cells their box covers;
linear heads score pooled features per class.  Everything is linear up to
the loss, so every gradient used in training is closed form and checked
against finite differences.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import BBox
from .numerics import column_softmax

HEAD_ROLES = ("main", "sdk_branch", "rol_classifier")


@dataclass
class Backbone:
    """Per-cell linear transform: raw cell vector (D0) -> feature vector (D)."""

    map: np.ndarray  # (feature_dim, raw_dim)

    def __post_init__(self):
        self.map = np.asarray(self.map, dtype=float)
        if self.map.ndim != 2 or not np.all(np.isfinite(self.map)):
            raise ValueError("backbone map must be a finite 2-D matrix")

    @property
    def feature_dim(self) -> int:
        return self.map.shape[0]

    @property
    def raw_dim(self) -> int:
        return self.map.shape[1]


@dataclass
class Head:
    """Linear classifier over pooled features, last weight column the bias."""

    weights: np.ndarray  # (num_classes + 1, feature_dim + 1)
    role: str = "main"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim != 2 or not np.all(np.isfinite(self.weights)):
            raise ValueError("head weights must be a finite 2-D matrix")
        if self.role not in HEAD_ROLES:
            raise ValueError(f"unknown head role {self.role!r}")

    @property
    def num_rows(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1] - 1


@dataclass
class DetectorModel:
    """Backbone plus heads; which heads exist depends on the training stage."""

    backbone: Backbone
    main_head: Head
    sdk_head: Head | None = None
    rol_heads: list[Head] = field(default_factory=list)
    source_classes: int = 0  # class count of the source domain this model knows

    def __post_init__(self):
        for head in self.all_heads():
            if head.feature_dim != self.backbone.feature_dim:
                raise ValueError(
                    f"head feature dim {head.feature_dim} != backbone "
                    f"feature dim {self.backbone.feature_dim}"
                )
        if self.sdk_head is not None and self.source_classes > 0:
            if self.sdk_head.num_rows != self.source_classes + 1:
                raise ValueError("sdk head rows inconsistent with source class count")

    def all_heads(self) -> list[Head]:
        heads = [self.main_head]
        if self.sdk_head is not None:
            heads.append(self.sdk_head)
        heads.extend(self.rol_heads)
        return heads

    def source_knowledge_head(self) -> Head:
        """The head emitting source-class distributions for distillation."""
        if self.sdk_head is not None:
            return self.sdk_head
        if self.source_classes > 0 and self.main_head.num_rows == self.source_classes + 1:
            return self.main_head
        raise ValueError("model has no head over the source classes")

    def copy(self) -> "DetectorModel":
        return copy.deepcopy(self)


# Feature amplification at init.  Adam moves each weight coordinate by at
# most lr per step, so within a fixed step budget the reachable logit
# scale is proportional to feature magnitude; the gain buys head
# confidence that small learning rates could not otherwise reach.
FEATURE_GAIN = 6.0


def init_backbone(
    raw_dim: int, feature_dim: int, rng: np.random.Generator
) -> Backbone:
    """Random orthogonal map scaled by FEATURE_GAIN.

    Orthogonality preserves the geometry of the raw observations exactly;
    a plain Gaussian map would shrink some directions and dilate others.
    """
    draw = rng.standard_normal((feature_dim, raw_dim))
    if feature_dim <= raw_dim:
        q, r = np.linalg.qr(draw.T)
        omap = (q * np.sign(np.diag(r))).T
    else:
        q, r = np.linalg.qr(draw)
        omap = q * np.sign(np.diag(r))
    return Backbone(map=FEATURE_GAIN * omap)


def init_head(
    num_classes: int, feature_dim: int, rng: np.random.Generator, role: str = "main"
) -> Head:
    return Head(
        weights=0.01 * rng.standard_normal((num_classes + 1, feature_dim + 1)),
        role=role,
    )


# --- forward pass -----------------------------------------------------------


def forward_grid(backbone: Backbone, raw_grid: np.ndarray) -> np.ndarray:
    """Apply the backbone map to every cell: (H, W, D0) -> (H, W, D)."""
    raw_grid = np.asarray(raw_grid, dtype=float)
    if raw_grid.ndim != 3 or raw_grid.shape[2] != backbone.raw_dim:
        raise ValueError(
            f"raw grid shape {raw_grid.shape} incompatible with raw dim "
            f"{backbone.raw_dim}"
        )
    return np.einsum("do,hwo->hwd", backbone.map, raw_grid)


def _covered_cells(height: int, width: int, box: BBox) -> np.ndarray:
    """Flat indices of cells whose center lies inside the box; never empty.

    When no center is covered, falls back to the single cell whose center
    is nearest the box center.
    """
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    mask = np.outer(
        (ys >= box.y1) & (ys <= box.y2), (xs >= box.x1) & (xs <= box.x2)
    )
    idx = np.nonzero(mask.ravel())[0]
    if idx.size:
        return idx
    cx = 0.5 * (box.x1 + box.x2)
    cy = 0.5 * (box.y1 + box.y2)
    d2 = (ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2
    return np.array([int(np.argmin(d2.ravel()))])


def roi_pool(grid: np.ndarray, box: BBox) -> np.ndarray:
    """Mean of the grid cell vectors covered by the box."""
    grid = np.asarray(grid, dtype=float)
    height, width, dim = grid.shape
    idx = _covered_cells(height, width, box)
    return grid.reshape(-1, dim)[idx].mean(axis=0)


@dataclass
class ForwardCache:
    """Intermediate values of one forward pass, reused by the backward pass."""

    raw_grid: np.ndarray  # (H, W, D0)
    feature_grid: np.ndarray  # (H, W, D)
    raw_means: np.ndarray  # (K, D0) mean raw vector per proposal
    features: np.ndarray  # (K, D) pooled features


def forward(backbone: Backbone, raw_grid: np.ndarray, boxes: Sequence[BBox]) -> ForwardCache:
    """Backbone + ROI pooling over all proposals, with backward bookkeeping."""
    raw_grid = np.asarray(raw_grid, dtype=float)
    height, width, _ = raw_grid.shape
    flat = raw_grid.reshape(height * width, -1)
    raw_means = np.stack(
        [flat[_covered_cells(height, width, b)].mean(axis=0) for b in boxes]
    ) if boxes else np.zeros((0, backbone.raw_dim))
    return ForwardCache(
        raw_grid=raw_grid,
        feature_grid=forward_grid(backbone, raw_grid),
        raw_means=raw_means,
        features=raw_means @ backbone.map.T,
    )


def score_proposals(head: Head, pooled: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits and per-column softmax probabilities for pooled features (K, D)."""
    pooled = np.asarray(pooled, dtype=float)
    if pooled.ndim != 2 or pooled.shape[1] != head.feature_dim:
        raise ValueError(
            f"pooled features shape {pooled.shape} incompatible with head "
            f"feature dim {head.feature_dim}"
        )
    logits = head.weights[:, :-1] @ pooled.T + head.weights[:, -1:]
    return logits, column_softmax(logits)


def head_grads(
    head: Head, features: np.ndarray, dlogits: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a loss with respect to head weights and pooled features.

    ``dlogits`` is the loss gradient at the head's logit matrix.
    """
    dweights = np.empty_like(head.weights)
    dweights[:, :-1] = dlogits @ features
    dweights[:, -1] = dlogits.sum(axis=1)
    dfeatures = dlogits.T @ head.weights[:, :-1]
    return dweights, dfeatures


def backbone_grad(
    cache: ForwardCache,
    dfeatures: np.ndarray | None = None,
    dfeature_grid: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient with respect to the backbone map.

    Accumulates the pooled-feature path (via per-proposal raw means) and,
    when given, a direct feature-grid term such as the background penalty.
    """
    dmap = np.zeros((cache.feature_grid.shape[2], cache.raw_grid.shape[2]))
    if dfeatures is not None and dfeatures.size:
        dmap += dfeatures.T @ cache.raw_means
    if dfeature_grid is not None:
        dmap += np.einsum("hwd,hwo->do", dfeature_grid, cache.raw_grid)
    return dmap


# --- optimizer --------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")


@dataclass
class AdamState:
    """First/second moment accumulators per parameter block."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            step=0,
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: OptimizerConfig,
    learning_rate: float | None = None,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; pure (inputs are not mutated).

    Weight decay enters as an additive gradient term.  ``learning_rate``
    overrides the config rate so callers can apply decay schedules.
    """
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    t = state.step + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in parameter block {name!r}")
        g = g + cfg.weight_decay * p
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, step=t)


# --- distillation targets ---------------------------------------------------


def extract_sdk(
    teacher: DetectorModel, raw_grid: np.ndarray, proposals: Sequence[BBox]
) -> np.ndarray:
    """Per-proposal source-class distributions from a frozen teacher.

    Pools with the teacher's backbone, scores with its source-knowledge
    head, and returns softmax probabilities.  Depends on the teacher only
    through its logits; nothing here propagates gradients back.
    """
    head = teacher.source_knowledge_head()
    cache = forward(teacher.backbone, raw_grid, list(proposals))
    _, probs = score_proposals(head, cache.features)
    return probs


# --- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = "# transferdet checkpoint v1"


def save_model(path, model: DetectorModel, seed: int | None = None) -> None:
    """Structured-text checkpoint; floats via repr() for exact round-trips."""
    lines = [CHECKPOINT_MAGIC]
    if seed is not None:
        lines.append(f"seed {seed}")
    lines.append(f"source_classes {model.source_classes}")

    def block(name: str, matrix: np.ndarray, role: str | None = None):
        suffix = f" role {role}" if role else ""
        lines.append(f"block {name} shape {matrix.shape[0]} {matrix.shape[1]}{suffix}")
        for row in matrix:
            lines.append("row " + " ".join(repr(float(v)) for v in row))

    block("backbone", model.backbone.map)
    block("main_head", model.main_head.weights, model.main_head.role)
    if model.sdk_head is not None:
        block("sdk_head", model.sdk_head.weights, model.sdk_head.role)
    for i, head in enumerate(model.rol_heads):
        block(f"rol_head_{i}", head.weights, head.role)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> DetectorModel:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    source_classes = 0
    blocks: dict[str, tuple[np.ndarray, str | None]] = {}
    current: list[list[float]] = []
    name = None
    role: str | None = None

    def close():
        if name is not None:
            blocks[name] = (np.array(current), role)

    for ln in lines[1:]:
        if ln.startswith("source_classes "):
            source_classes = int(ln.split()[1])
        elif ln.startswith("block "):
            close()
            parts = ln.split()
            name = parts[1]
            role = parts[parts.index("role") + 1] if "role" in parts else None
            current = []
        elif ln.startswith("row "):
            current.append([float(v) for v in ln.split()[1:]])
    close()

    if "backbone" not in blocks or "main_head" not in blocks:
        raise ValueError("checkpoint missing backbone or main head")
    main_w, main_role = blocks["main_head"]
    sdk = None
    if "sdk_head" in blocks:
        sdk_w, sdk_role = blocks["sdk_head"]
        sdk = Head(weights=sdk_w, role=sdk_role or "sdk_branch")
    rol = []
    for i in range(len(blocks)):
        key = f"rol_head_{i}"
        if key not in blocks:
            break
        w, r = blocks[key]
        rol.append(Head(weights=w, role=r or "rol_classifier"))
    return DetectorModel(
        backbone=Backbone(map=blocks["backbone"][0]),
        main_head=Head(weights=main_w, role=main_role or "main"),
        sdk_head=sdk,
        rol_heads=rol,
        source_classes=source_classes,
    )
