"""Static prototypes by masked average pooling and the momentum prototype bank."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .errors import ConfigError, ContractError, EmptyClassError, UninitializedPrototypeError

logger = logging.getLogger(__name__)


@dataclass
class Prototype:
    vector: torch.Tensor
    class_id: int
    space: str
    kind: str  # "static" or "momentum"


def downsample_labels(mask, stride: int) -> torch.Tensor:
    """Nearest-neighbour label downsampling: keep the pixel at each block centre."""
    m = mask if isinstance(mask, torch.Tensor) else torch.tensor(np.asarray(mask))
    if stride == 1:
        return m.long()
    off = stride // 2
    return m[..., off::stride, off::stride].long()


def masked_average_pool(features: torch.Tensor, mask: torch.Tensor, class_id: int) -> torch.Tensor:
    """Mean feature vector over the pixels labelled ``class_id``.

    ``features`` is ``(D, h, w)`` and ``mask`` ``(h, w)`` at the same
    resolution. Raises EmptyClassError when the class has no pixels.
    """
    if features.dim() != 3 or tuple(mask.shape) != tuple(features.shape[-2:]):
        raise ContractError(f"features {tuple(features.shape)} and mask {tuple(mask.shape)} do not align")
    sel = (mask == class_id)
    n = int(sel.sum())
    if n == 0:
        raise EmptyClassError(class_id)
    w = sel.to(features.dtype)
    return (features * w).sum(dim=(1, 2)) / n


def pool_classes(features: torch.Tensor, mask: torch.Tensor, class_ids: Sequence[int],
                 skip_empty: bool = True) -> tuple[list[int], torch.Tensor]:
    """Pool several classes at once; returns (kept class ids, (K, D) prototypes).

    Classes with no pixels are dropped with a warning when ``skip_empty``,
    otherwise EmptyClassError propagates.
    """
    kept, vecs = [], []
    for c in class_ids:
        try:
            vecs.append(masked_average_pool(features, mask, c))
            kept.append(int(c))
        except EmptyClassError:
            if not skip_empty:
                raise
            logger.debug("class %d vanished at feature resolution; dropped from this episode", c)
    if not vecs:
        return kept, features.new_zeros((0, features.shape[0]))
    return kept, torch.stack(vecs)


def query_prototypes(query_features: torch.Tensor, query_mask: torch.Tensor,
                     class_set: Sequence[int]) -> tuple[list[int], torch.Tensor]:
    """Query-side static prototypes of the foreground classes present in the query mask."""
    return pool_classes(query_features, query_mask, [c for c in class_set if c != 0])


class PrototypeBank:
    """Persistent momentum prototypes keyed by (space, class id).

    An entry is initialised with the first static prototype it sees and
    afterwards smoothed as ``entry <- (1 - alpha) * entry + alpha * static``.
    Entries are plain detached tensors, so they receive no gradient.
    """

    def __init__(self, alpha: float = 0.001, warmup_epochs: int = 3):
        if not 0.0 <= alpha < 1.0:
            raise ConfigError(f"alpha must lie in [0, 1), got {alpha}")
        if warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be nonnegative")
        self.alpha = float(alpha)
        self.warmup_epochs = int(warmup_epochs)
        self.entries: dict[tuple[str, int], torch.Tensor] = {}

    def __contains__(self, key) -> bool:
        return key in self.entries

    def get(self, space: str, class_id: int) -> torch.Tensor:
        try:
            return self.entries[(space, int(class_id))]
        except KeyError:
            raise UninitializedPrototypeError(
                f"no momentum prototype for class {class_id} in space {space}") from None

    def in_warmup(self, epoch: int) -> bool:
        return epoch < self.warmup_epochs

    def update(self, space: str, class_id: int, static: torch.Tensor) -> torch.Tensor:
        key = (space, int(class_id))
        static = static.detach()
        prev = self.entries.get(key)
        if prev is None:
            new = static.clone()
        else:
            new = (1.0 - self.alpha) * prev + self.alpha * static
        self.entries[key] = new
        return new

    def classes(self, space: str) -> list[int]:
        return sorted(c for s, c in self.entries if s == space)

    def state_dict(self) -> dict:
        return {"alpha": self.alpha, "warmup_epochs": self.warmup_epochs,
                "entries": {f"{s}/{c}": v.clone() for (s, c), v in sorted(self.entries.items())}}

    @classmethod
    def from_state_dict(cls, state: Mapping) -> "PrototypeBank":
        bank = cls(state["alpha"], state["warmup_epochs"])
        for key, v in state["entries"].items():
            s, c = key.split("/")
            bank.entries[(s, int(c))] = v.clone()
        return bank

    def to(self, dtype=None) -> "PrototypeBank":
        for k, v in self.entries.items():
            self.entries[k] = v.to(dtype=dtype)
        return self


def momentum_update(bank: PrototypeBank, static: Prototype, epoch: int) -> Prototype:
    """Fold ``static`` into the bank and return the prototype to consume this episode.

    During warm-up (epoch < bank.warmup_epochs) that is the static
    prototype itself; afterwards it is the freshly updated momentum one.
    """
    if static.kind != "static":
        raise ContractError("momentum_update expects a static prototype")
    entry = bank.update(static.space, static.class_id, static.vector)
    if bank.in_warmup(epoch):
        return static
    return Prototype(entry, static.class_id, static.space, "momentum")


def select_prototypes(bank: PrototypeBank, statics: Mapping[int, torch.Tensor], class_ids: Iterable[int],
                      space: str, epoch: int, phase: str,
                      novel_classes: Iterable[int] = ()) -> list[Prototype]:
    """Prototypes aligned with ``class_ids``.

    meta_train: static during warm-up, momentum afterwards.
    meta_test: momentum for classes the bank knows from training, static
    (pooled from this support) for novel classes.
    """
    novel = set(int(c) for c in novel_classes)
    out = []
    for c in class_ids:
        c = int(c)
        if phase == "meta_train":
            use_static = bank.in_warmup(epoch)
        elif phase == "meta_test":
            use_static = c in novel
        else:
            raise ContractError(f"unknown phase {phase!r}")
        if use_static:
            if c not in statics:
                raise EmptyClassError(c)
            out.append(Prototype(statics[c], c, space, "static"))
        else:
            out.append(Prototype(bank.get(space, c), c, space, "momentum"))
    return out


def stack(protos: Sequence[Prototype]) -> torch.Tensor:
    return torch.stack([p.vector for p in protos])
