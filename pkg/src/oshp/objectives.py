"""Training losses: per-pixel cross-entropy, the DML mix, prototype NCA and the total."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .dual_metric import COSINE_EPS, PredictionMap
from .errors import ConfigError, ContractError


@dataclass
class LossWeights:
    nca: float = 1.0
    agm_cgs: float = 1.0
    dml_fgs: float = 1.0
    tau: float = 0.1

    def __post_init__(self):
        if min(self.nca, self.agm_cgs, self.dml_fgs) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")


@dataclass
class LossReport:
    agm_fgs: float
    npm_fgs: float
    dml_fgs: float
    agm_cgs: float
    nca: float
    total: float
    beta: float

    def to_dict(self) -> dict:
        return asdict(self)


def cross_entropy(pred: PredictionMap, target: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of -log p(target class). ``target`` holds class ids from ``pred.class_set``."""
    lut = torch.full((256,), -1, dtype=torch.long)
    lut[torch.as_tensor(pred.class_set, dtype=torch.long)] = torch.arange(len(pred.class_set))
    target = torch.as_tensor(target, dtype=torch.long)
    if tuple(target.shape) != tuple(pred.log_probs.shape[-2:]):
        raise ContractError(f"target {tuple(target.shape)} vs prediction {tuple(pred.log_probs.shape[-2:])}")
    if target.min() < 0 or target.max() > 255:
        raise ContractError("target labels out of range")
    idx = lut[target]
    if (idx < 0).any():
        bad = int(target[idx < 0].flatten()[0])
        raise ContractError(f"target label {bad} is not in the class set {pred.class_set}")
    return -pred.log_probs.gather(0, idx.unsqueeze(0)).mean()


def dml_loss(agm_loss, npm_loss, beta: float):
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta must lie in [0, 1], got {beta}")
    return beta * agm_loss + (1.0 - beta) * npm_loss


def nca_contrastive(query_protos: torch.Tensor, support_protos: torch.Tensor, tau: float,
                    anchors: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Prototype-level NCA loss with cosine similarity.

    Row ``c`` of ``query_protos`` is pulled towards row ``c`` of
    ``support_protos`` and pushed from the other support rows. ``anchors``
    (bool, length K) marks the rows that have a query prototype; the rest
    only act as negatives. The loss is averaged over anchor rows.
    """
    if support_protos.dim() != 2 or support_protos.shape[0] < 1:
        raise ContractError("nca_contrastive needs at least one foreground class")
    if query_protos.shape != support_protos.shape:
        raise ContractError("query and support prototypes must be aligned")
    if tau <= 0:
        raise ContractError("tau must be positive")
    if anchors is None:
        anchors = torch.ones(support_protos.shape[0], dtype=torch.bool)
    if not anchors.any():
        return support_protos.sum() * 0.0
    # Norms are floored at COSINE_EPS rather than shifted by it, which keeps the
    # loss exactly invariant to a common rescaling of the prototypes.
    sims = F.normalize(query_protos, dim=1, eps=COSINE_EPS) @ F.normalize(support_protos, dim=1, eps=COSINE_EPS).t()
    logp = F.log_softmax(sims / tau, dim=1)
    return -logp.diagonal()[anchors].mean()


def total_objective(nca, agm_cgs, dml_fgs, weights: LossWeights):
    return weights.nca * nca + weights.agm_cgs * agm_cgs + weights.dml_fgs * dml_fgs
