"""Episodic meta-training, checkpoints and the meta-test predictor."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import augment as aug
from .config import TrainConfig
from .data import DatasetManifest, Episode, _cached_pair, load_human_mask, mask_labels
from .dual_metric import (AGMHead, NPMHead, PredictionMap, agm_forward, beta_schedule, cgs_forward,
                          npm_forward, similarity_map)
from .embedding import Embedder, image_to_tensor
from .errors import ContractError, NonFiniteLossError, SamplingError
from .objectives import LossReport, cross_entropy, dml_loss, nca_contrastive, total_objective
from .prototypes import (Prototype, PrototypeBank, downsample_labels, momentum_update, pool_classes,
                         query_prototypes, select_prototypes, stack)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "oshp-checkpoint"
CHECKPOINT_VERSION = 1
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ParsingNetwork(nn.Module):
    """Embedding network, both AGM heads and the NPM head."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        enc = config.encoder
        self.embedder = Embedder(enc)
        self.agm_fgs = AGMHead(enc.fgs_dim, config.agm_depth)
        self.agm_cgs = AGMHead(enc.cgs_dim, config.agm_depth)
        self.npm = NPMHead(config.npm_init_scale)


def build_network(config: TrainConfig) -> ParsingNetwork:
    torch.manual_seed(config.rng_seed)
    return ParsingNetwork(config).to(DTYPES[config.dtype])


def beta_for(config: TrainConfig, epoch: int) -> float:
    if config.beta_mode == "shift":
        return beta_schedule(epoch, config.max_epoch)
    if config.beta_mode == "agm":
        return 1.0
    if config.beta_mode == "npm":
        return 0.0
    return config.fixed_beta


def poly_lr(config: TrainConfig, iteration: int, max_iter: int) -> float:
    frac = min(max(iteration / max_iter, 0.0), 1.0)
    return config.initial_lr * (1.0 - frac) ** config.poly_power


@dataclass
class EpisodeTensors:
    support_image: torch.Tensor  # (3, H, W)
    support_mask: np.ndarray
    query_image: torch.Tensor
    query_mask: np.ndarray  # every annotated label of the query
    class_set: list[int]
    support_human: np.ndarray
    query_human: np.ndarray

    @classmethod
    def from_episode(cls, ep: Episode, dtype=torch.float32) -> "EpisodeTensors":
        s_hum, q_hum = ep.human_masks()
        return cls(image_to_tensor(ep.support_image, dtype), np.asarray(ep.support_mask),
                   image_to_tensor(ep.query_image, dtype), np.asarray(ep.query_mask), list(ep.class_set),
                   np.asarray(s_hum), np.asarray(q_hum))


def episode_losses(net: ParsingNetwork, bank: PrototypeBank, ep: EpisodeTensors, epoch: int, beta: float,
                   config: TrainConfig, update_bank: bool = True):
    """All training losses for one episode.

    Returns ``(total, parts)`` where ``parts`` maps loss names to scalar
    tensors, or ``None`` when no foreground class survives downsampling.
    With ``update_bank`` the momentum bank absorbs this episode's static
    prototypes before they are selected.
    """
    stride = config.encoder.downsample_factor
    feats = net.embedder(torch.stack([ep.support_image, ep.query_image]))
    cgs_s, cgs_q = feats["cgs"][0], feats["cgs"][1]
    fgs_s, fgs_q = feats["fgs"][0], feats["fgs"][1]

    s_lab = downsample_labels(ep.support_mask, stride)
    fg, statics = pool_classes(fgs_s, s_lab, [c for c in ep.class_set if c != 0])
    if not fg:
        return None
    class_set = [0] + fg
    q_full = downsample_labels(ep.query_mask, stride)
    q_target = torch.where(torch.isin(q_full, torch.tensor(class_set)), q_full, torch.zeros_like(q_full))
    q_bin = downsample_labels(ep.query_human, stride)
    s_bin = downsample_labels(ep.support_human, stride)

    fgs_static = {c: statics[i] for i, c in enumerate(fg)}
    cgs_kept, cgs_vecs = pool_classes(cgs_s, s_bin, [0, 1])
    cgs_static = {c: cgs_vecs[i] for i, c in enumerate(cgs_kept)}
    if update_bank:
        for space, table in (("fgs", fgs_static), ("cgs", cgs_static)):
            for c, v in table.items():
                momentum_update(bank, Prototype(v, c, space, "static"), epoch)

    protos = stack(select_prototypes(bank, fgs_static, fg, "fgs", epoch, "meta_train"))
    parts = {}
    if len(cgs_kept) == 2 or not bank.in_warmup(epoch):
        cgs_p = stack(select_prototypes(bank, cgs_static, [0, 1], "cgs", epoch, "meta_train"))
        parts["agm_cgs"] = cross_entropy(cgs_forward(cgs_q, cgs_p, net.agm_cgs, config.cgs_mode), q_bin)
    else:
        parts["agm_cgs"] = fgs_q.sum() * 0.0

    agm = agm_forward(fgs_q, protos, net.agm_fgs, class_set)
    npm = npm_forward(similarity_map(fgs_q, protos), net.npm, class_set)
    parts["agm_fgs"] = cross_entropy(agm, q_target)
    parts["npm_fgs"] = cross_entropy(npm, q_target)
    parts["dml_fgs"] = dml_loss(parts["agm_fgs"], parts["npm_fgs"], beta)

    q_fg, q_vecs = query_prototypes(fgs_q, q_target, class_set)
    qp = torch.zeros_like(statics)
    anchors = torch.zeros(len(fg), dtype=torch.bool)
    for i, c in enumerate(q_fg):
        j = fg.index(c)
        qp = qp.index_put((torch.tensor([j]),), q_vecs[i:i + 1])
        anchors[j] = True
    parts["nca"] = nca_contrastive(qp, statics, config.tau, anchors)

    total = total_objective(parts["nca"], parts["agm_cgs"], parts["dml_fgs"], config.loss_weights())
    return total, parts


class EpisodeSource:
    """Meta-training images held in memory, with seeded episode drawing."""

    def __init__(self, manifest: DatasetManifest, config: TrainConfig):
        self.config = config
        self.supports = [self._load(e) for e in manifest.split("meta_train_support")]
        self.queries = [self._load(e) for e in manifest.split("meta_train_query")]
        self.support_refs = [e.image_ref for e in manifest.split("meta_train_support")]
        self.query_refs = [e.image_ref for e in manifest.split("meta_train_query")]
        if not self.supports or not self.queries:
            raise SamplingError("meta-training needs nonempty support and query splits")
        self.dtype = DTYPES[config.dtype]

    @staticmethod
    def _load(entry):
        # label mask and human foreground stacked, so augmentation moves them together
        img, mask = _cached_pair(entry.image_ref, entry.mask_ref)
        return img, np.stack([mask, load_human_mask(entry).astype(mask.dtype)], axis=-1)

    def epoch_episodes(self, rng: np.random.Generator) -> list[tuple[Episode, int, int]]:
        n = self.config.episodes_per_epoch or len(self.supports)
        order = np.concatenate([rng.permutation(len(self.supports))
                                for _ in range(math.ceil(n / len(self.supports)))])[:n]
        out = []
        size = self.config.encoder.input_size
        for s in order:
            q = int(rng.integers(len(self.queries)))
            while self.query_refs[q] == self.support_refs[s] and len(self.queries) > 1:
                q = int(rng.integers(len(self.queries)))
            s_img, s_stack = aug.augment(*self.supports[s], self.config.augment, rng, size)
            q_img, q_stack = aug.augment(*self.queries[q], self.config.augment, rng, size)
            labels = sorted(set(mask_labels(s_stack[..., 0])) | {0})
            if len(labels) < 2:
                continue
            out.append((Episode(s_img, s_stack[..., 0], q_img, q_stack[..., 0], labels, int(s), q,
                                s_stack[..., 1], q_stack[..., 1]), int(s), q))
        return out


@dataclass
class TrainState:
    config: TrainConfig
    net: ParsingNetwork
    bank: PrototypeBank
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    epoch: int = 0
    iteration: int = 0
    max_iter: int = 1
    history: list[dict] = field(default_factory=list)


def make_optimizer(net: ParsingNetwork, config: TrainConfig) -> torch.optim.SGD:
    """SGD with the NPM scalars in their own group, stepped at ``npm_lr_scale`` times the base rate."""
    npm = list(net.npm.parameters())
    npm_ids = {id(q) for q in npm}
    rest = [q for q in net.parameters() if id(q) not in npm_ids]
    groups = [{"params": rest, "lr_scale": 1.0}, {"params": npm, "lr_scale": config.npm_lr_scale}]
    return torch.optim.SGD(groups, lr=config.initial_lr, momentum=config.sgd_momentum,
                           weight_decay=config.weight_decay)


def init_state(config: TrainConfig, steps_per_epoch: int) -> TrainState:
    net = build_network(config)
    opt = make_optimizer(net, config)
    bank = PrototypeBank(config.alpha, config.warmup_epochs)
    rng = np.random.default_rng(config.rng_seed)
    return TrainState(config, net, bank, opt, rng, max_iter=max(1, steps_per_epoch * config.max_epoch))


def _dump_episode(ep: Episode, dump_dir) -> Optional[Path]:
    if dump_dir is None:
        return None
    path = Path(dump_dir) / "nonfinite_episode.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, support_image=ep.support_image, support_mask=ep.support_mask,
             query_image=ep.query_image, query_mask=ep.query_mask, class_set=np.array(ep.class_set))
    return path


def train_epoch(state: TrainState, source: EpisodeSource, log_file=None, dump_dir=None) -> TrainState:
    """One pass of episodes; SGD step every ``batch_size`` episodes with poly learning-rate decay."""
    cfg = state.config
    dtype = DTYPES[cfg.dtype]
    beta = beta_for(cfg, state.epoch)
    episodes = source.epoch_episodes(state.rng)
    state.net.train()
    for b0 in range(0, len(episodes), cfg.batch_size):
        batch = episodes[b0:b0 + cfg.batch_size]
        lr = poly_lr(cfg, state.iteration, state.max_iter)
        for g in state.optimizer.param_groups:
            g["lr"] = lr * g.get("lr_scale", 1.0)
        state.optimizer.zero_grad()
        totals, sums, n = 0.0, {}, 0
        for ep, _, _ in batch:
            out = episode_losses(state.net, state.bank, EpisodeTensors.from_episode(ep, dtype),
                                 state.epoch, beta, cfg)
            if out is None:
                continue
            total, parts = out
            if not torch.isfinite(total):
                path = _dump_episode(ep, dump_dir)
                raise NonFiniteLossError(f"non-finite loss at epoch {state.epoch} iteration {state.iteration}"
                                         f" (support {ep.support_index}, query {ep.query_index}); dump: {path}")
            totals = totals + total
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v.item()
            n += 1
        if n == 0:
            continue
        (totals / n).backward()
        state.optimizer.step()
        report = LossReport(agm_fgs=sums["agm_fgs"] / n, npm_fgs=sums["npm_fgs"] / n,
                            dml_fgs=sums["dml_fgs"] / n, agm_cgs=sums["agm_cgs"] / n, nca=sums["nca"] / n,
                            total=totals.item() / n, beta=beta)
        record = {"epoch": state.epoch, "iteration": state.iteration, "lr": lr, **report.to_dict()}
        state.history.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
        state.iteration += 1
    state.epoch += 1
    return state


def train(config: TrainConfig, manifest: DatasetManifest, out_dir=None, epochs: Optional[int] = None) -> TrainState:
    """Full meta-training run. Writes ``train_log.jsonl`` and ``checkpoint.pt`` when ``out_dir`` is set."""
    torch.use_deterministic_algorithms(True)
    source = EpisodeSource(manifest, config)
    n_eps = config.episodes_per_epoch or len(source.supports)
    state = init_state(config, math.ceil(n_eps / config.batch_size))
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "w")
    try:
        for _ in range(epochs if epochs is not None else config.max_epoch):
            train_epoch(state, source, log_file, out_dir)
            last = [r["total"] for r in state.history if r["epoch"] == state.epoch - 1]
            logger.info("epoch %d beta %.3f mean loss %.4f", state.epoch - 1,
                        beta_for(config, state.epoch - 1), float(np.mean(last)) if last else float("nan"))
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        save_checkpoint(state, out_dir / "checkpoint.pt")
    return state


@torch.no_grad()
def untrained_state(config: TrainConfig, manifest: DatasetManifest) -> TrainState:
    """Freshly initialised network whose bank has seen one epoch of episodes; no weight updates.

    This is the untrained baseline: same architecture and seed, and a
    populated bank so base classes can be parsed at meta-test.
    """
    source = EpisodeSource(manifest, config)
    state = init_state(config, 1)
    dtype = DTYPES[config.dtype]
    for ep, _, _ in source.epoch_episodes(state.rng):
        episode_losses(state.net, state.bank, EpisodeTensors.from_episode(ep, dtype), 0, 1.0, config)
    return state


def epoch_mean_losses(history: Sequence[dict]) -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for r in history:
        by_epoch.setdefault(r["epoch"], []).append(r["total"])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


# -- checkpoints ------------------------------------------------------------

def checkpoint_payload(state: TrainState) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "model": {k: v.detach().clone() for k, v in state.net.state_dict().items()},
        "bank": state.bank.state_dict(),
        "epoch": state.epoch,
        "iteration": state.iteration,
        "max_iter": state.max_iter,
        "optimizer": state.optimizer.state_dict(),
        "rng_state": state.rng.bit_generator.state,
    }


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(checkpoint_payload(state), path)
    return path


def load_checkpoint(path) -> TrainState:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path} is not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    config = TrainConfig.from_dict(payload["config"])
    net = ParsingNetwork(config).to(DTYPES[config.dtype])
    net.load_state_dict(payload["model"])
    opt = make_optimizer(net, config)
    opt.load_state_dict(payload["optimizer"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng_state"]
    return TrainState(config, net, PrototypeBank.from_state_dict(payload["bank"]), opt, rng,
                      payload["epoch"], payload["iteration"], payload["max_iter"])


def state_digest(state: TrainState) -> str:
    """SHA-256 over parameters, bank, counters and config (order-stable)."""
    h = hashlib.sha256()
    h.update(json.dumps(state.config.to_dict(), sort_keys=True).encode())
    h.update(f"{state.epoch}/{state.iteration}".encode())
    for k, v in sorted(state.net.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    for k, v in state.bank.state_dict()["entries"].items():
        h.update(k.encode())
        h.update(v.cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- inference --------------------------------------------------------------

class Parser:
    """Meta-test predictor: base classes use bank prototypes, novel ones the support's.

    Fine-grained predictions come from the head named by the config
    (NPM after a weight-shifted run).
    """

    def __init__(self, state: TrainState, head: Optional[str] = None):
        self.net = state.net
        self.bank = state.bank
        self.config = state.config
        self.head = head or state.config.resolved_infer_head()
        self.dtype = DTYPES[state.config.dtype]

    @torch.no_grad()
    def _features(self, ep: Episode):
        self.net.eval()
        imgs = torch.stack([image_to_tensor(ep.support_image, self.dtype), image_to_tensor(ep.query_image, self.dtype)])
        return self.net.embedder(imgs)

    @torch.no_grad()
    def predict_map(self, ep: Episode, novel_classes: Iterable[int] = ()) -> PredictionMap:
        stride = self.config.encoder.downsample_factor
        feats = self._features(ep)
        fgs_s, fgs_q = feats["fgs"][0], feats["fgs"][1]
        novel = {int(c) for c in novel_classes}
        s_lab = downsample_labels(ep.support_mask, stride)
        fg = [c for c in ep.class_set if c != 0]
        kept, vecs = pool_classes(fgs_s, s_lab, fg)
        statics = {c: vecs[i] for i, c in enumerate(kept)}
        # a base class can still be parsed from its bank entry after vanishing in the support
        usable = [c for c in fg if c in statics or c not in novel]
        if not usable:
            zeros = torch.zeros((1,) + tuple(fgs_q.shape[-2:]), dtype=fgs_q.dtype)
            return PredictionMap(zeros, [0])
        protos = stack(select_prototypes(self.bank, statics, usable, "fgs", self.config.max_epoch,
                                         "meta_test", novel))
        class_set = [0] + usable
        if self.head == "agm":
            return agm_forward(fgs_q, protos, self.net.agm_fgs, class_set)
        return npm_forward(similarity_map(fgs_q, protos), self.net.npm, class_set)

    def predict(self, ep: Episode, novel_classes: Iterable[int] = ()) -> np.ndarray:
        pred = self.predict_map(ep, novel_classes)
        return pred.labels(ep.query_image.shape[:2]).numpy().astype(np.uint8)

    @torch.no_grad()
    def predict_foreground(self, ep: Episode) -> np.ndarray:
        """Binary human-foreground prediction from the coarse space."""
        feats = self._features(ep)
        protos = torch.stack([self.bank.get("cgs", 0), self.bank.get("cgs", 1)])
        pred = cgs_forward(feats["cgs"][1], protos, self.net.agm_cgs, self.config.cgs_mode)
        return pred.labels(ep.query_image.shape[:2]).numpy().astype(np.uint8)
