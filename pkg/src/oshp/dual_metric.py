"""Similarity maps, the attention-guided (AGM) and nearest-prototype (NPM) heads.

Everything here works on one episode at a time: query features are
``(D, h, w)`` and foreground prototypes a ``(K, D)`` stack, where
``K = |C_s| - 1``. Predictions carry ``K + 1`` channels, background first.

Reductions over the class axis (the background averages and the softmax
normaliser) sum the terms in sorted order, which makes every head exactly
equivariant to a permutation of the foreground classes, not merely up to
rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractError

COSINE_EPS = 1e-8


def similarity_map(query_features: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between every pixel and every prototype.

    ``query_features`` is ``(D, h, w)``, ``prototypes`` is ``(K, D)`` or
    ``(D,)``. Returns ``(K, h, w)``. Norms get ``COSINE_EPS`` added, so a
    zero vector has similarity 0 with everything.
    """
    if prototypes.dim() == 1:
        prototypes = prototypes.unsqueeze(0)
    if prototypes.shape[-1] != query_features.shape[0]:
        raise ContractError(f"prototype dim {prototypes.shape[-1]} != feature dim {query_features.shape[0]}")
    dots = torch.einsum("kd,dhw->khw", prototypes, query_features)
    fn = query_features.norm(dim=0) + COSINE_EPS
    pn = prototypes.norm(dim=1) + COSINE_EPS
    return dots / (pn[:, None, None] * fn[None])


def _ordered_sum(x: torch.Tensor, dim: int = 0) -> torch.Tensor:
    return torch.sort(x, dim=dim).values.sum(dim=dim)


def class_mean(x: torch.Tensor) -> torch.Tensor:
    """Mean over the class axis (dim 0), independent of class order."""
    return _ordered_sum(x, 0) / x.shape[0]


def log_softmax_classes(logits: torch.Tensor) -> torch.Tensor:
    """Log-softmax over dim 0 with an order-independent normaliser."""
    m = logits.max(dim=0, keepdim=True).values.detach()
    z = logits - m
    return z - torch.log(_ordered_sum(torch.exp(z), 0)).unsqueeze(0)


@dataclass
class PredictionMap:
    log_probs: torch.Tensor  # (C, h, w), channel i <-> class_set[i]
    class_set: list[int]

    @property
    def probs(self) -> torch.Tensor:
        return self.log_probs.exp()

    def labels(self, size: Optional[tuple[int, int]] = None) -> torch.Tensor:
        """Arg-max class ids, after bilinear upsampling of the probabilities to ``size``."""
        p = self.probs
        if size is not None and tuple(size) != tuple(p.shape[-2:]):
            p = F.interpolate(p.unsqueeze(0), size=tuple(size), mode="bilinear", align_corners=False)[0]
        idx = p.argmax(dim=0)
        return torch.as_tensor(self.class_set, dtype=torch.long)[idx]


class SeparableBlock(nn.Sequential):
    def __init__(self, dim: int):
        super().__init__(nn.Conv2d(dim, dim, 3, padding=1, groups=dim), nn.Conv2d(dim, dim, 1), nn.ReLU())


def _scorer(dim: int, depth: int) -> nn.Sequential:
    return nn.Sequential(*[SeparableBlock(dim) for _ in range(depth)], nn.Conv2d(dim, 1, 1))


class AGMHead(nn.Module):
    """phi and phi_bg: separable conv stacks scoring residual features, shared by all classes."""

    def __init__(self, dim: int, depth: int = 2):
        super().__init__()
        self.phi = _scorer(dim, depth)
        self.phi_bg = _scorer(dim, depth)


class NPMHead(nn.Module):
    """omega and omega_bg: scalar affine maps applied to similarity values."""

    def __init__(self, init_scale: float = 10.0):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(float(init_scale)))
        self.b = nn.Parameter(torch.tensor(0.0))
        self.w_bg = nn.Parameter(torch.tensor(float(init_scale)))
        self.b_bg = nn.Parameter(torch.tensor(0.0))

    def omega(self, a: torch.Tensor) -> torch.Tensor:
        return self.w * a + self.b

    def omega_bg(self, a: torch.Tensor) -> torch.Tensor:
        return self.w_bg * a + self.b_bg


def attend(query_features: torch.Tensor, sims: torch.Tensor) -> torch.Tensor:
    """Residual attended features R_c = A_c * F + F, stacked to ``(K, D, h, w)``."""
    return sims.unsqueeze(1) * query_features.unsqueeze(0) + query_features.unsqueeze(0)


def _score(net: nn.Module, residuals: torch.Tensor) -> torch.Tensor:
    # one class per call keeps each class's computation independent of the others
    return torch.cat([net(r.unsqueeze(0)) for r in residuals], dim=0)[:, 0]


def agm_forward(query_features: torch.Tensor, prototypes: torch.Tensor, head: AGMHead,
                class_set: Optional[Sequence[int]] = None) -> PredictionMap:
    if prototypes.dim() != 2 or prototypes.shape[0] < 1:
        raise ContractError("agm_forward needs at least one foreground prototype")
    sims = similarity_map(query_features, prototypes)
    res = attend(query_features, sims)
    fg = _score(head.phi, res)
    bg = class_mean(_score(head.phi_bg, res))
    logits = torch.cat([bg.unsqueeze(0), fg], dim=0)
    cs = list(class_set) if class_set is not None else list(range(prototypes.shape[0] + 1))
    return PredictionMap(log_softmax_classes(logits), cs)


def npm_forward(sims: torch.Tensor, head: NPMHead, class_set: Optional[Sequence[int]] = None) -> PredictionMap:
    """Predict straight from the ``(K, h, w)`` similarity maps."""
    if sims.dim() != 3 or sims.shape[0] < 1:
        raise ContractError("npm_forward needs at least one foreground similarity map")
    a0 = class_mean(1.0 - sims)
    logits = torch.cat([head.omega_bg(a0).unsqueeze(0), head.omega(sims)], dim=0)
    cs = list(class_set) if class_set is not None else list(range(sims.shape[0] + 1))
    return PredictionMap(log_softmax_classes(logits), cs)


def cgs_forward(query_features: torch.Tensor, prototypes: torch.Tensor, head: AGMHead,
                mode: str = "explicit_background") -> PredictionMap:
    """Human foreground vs background in the coarse space.

    ``prototypes`` is ``(2, D)``: background then foreground. With
    ``explicit_background`` the background logit scores the residual built
    from the background prototype; ``averaged`` instead treats the
    foreground as the single class of an ordinary AGM pass.
    """
    if prototypes.shape[0] != 2:
        raise ContractError("cgs_forward needs exactly a background and a foreground prototype")
    if mode == "averaged":
        return agm_forward(query_features, prototypes[1:], head, [0, 1])
    if mode != "explicit_background":
        raise ContractError(f"unknown cgs mode {mode!r}")
    res = attend(query_features, similarity_map(query_features, prototypes))
    logits = torch.stack([head.phi_bg(res[0:1])[0, 0], head.phi(res[1:2])[0, 0]])
    return PredictionMap(log_softmax_classes(logits), [0, 1])


def beta_schedule(epoch: int, max_epoch: int) -> float:
    """AGM/NPM balance: 1 at the first epoch, falling linearly to 0 at max_epoch."""
    if max_epoch <= 0:
        raise ContractError("max_epoch must be positive")
    if not 0 <= epoch <= max_epoch:
        raise ContractError(f"epoch {epoch} outside [0, {max_epoch}]")
    return 1.0 - epoch / max_epoch


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
