"""Dataset manifests, fold tailoring and episode sampling.

Manifests are JSON Lines files. The first record is a header::

    {"kind": "header", "version": 1, "class_names": ["background", ...], "background_id": 0}

and every following record describes one image::

    {"image": "images/0001.png", "mask": "masks/0001.png", "split": "meta_train_support"}

An optional ``"human"`` key points at a binary human-foreground mask. The
meta-train tailoring writes one per image because folding the novel
classes into the background removes them from ``mask`` while they are
still part of the person. Without it the foreground is derived from
``mask``.

Paths are relative to the manifest's directory (absolute paths are kept
as-is). Masks are single-channel 8-bit PNGs whose pixel values are label
ids; id 0 is always the background.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ContractError, CoverageError, RemapError, SamplingError

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SPLITS = ("meta_train_support", "meta_train_query", "meta_test_support", "meta_test_query")
PHASE_SPLITS = {
    "meta_train": ("meta_train_support", "meta_train_query"),
    "meta_test": ("meta_test_support", "meta_test_query"),
}


@dataclass(frozen=True)
class ManifestEntry:
    image_ref: Path
    mask_ref: Path
    split: str
    human_ref: Optional[Path] = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_names: list[str]
    background_id: int = 0

    def __post_init__(self):
        if not self.class_names or self.class_names[0] != "background":
            raise ContractError("label id 0 must be named 'background'")
        if self.background_id != 0:
            raise ContractError("background_id must be 0")
        for e in self.entries:
            if e.split not in SPLITS:
                raise ContractError(f"unknown split {e.split!r}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def class_id(self, name_or_id) -> int:
        if isinstance(name_or_id, str):
            try:
                return self.class_names.index(name_or_id)
            except ValueError:
                raise ContractError(f"unknown class name {name_or_id!r}") from None
        return int(name_or_id)

    def validate(self) -> None:
        """Decode every mask and check the label range. Raises ContractError."""
        seen = set()
        for e in self.entries:
            key = (e.image_ref, e.mask_ref)
            if key in seen:
                raise ContractError(f"entry {e.image_ref} appears in more than one split")
            seen.add(key)
            m = load_mask(e.mask_ref)
            if m.max(initial=0) >= self.num_classes:
                raise ContractError(
                    f"{e.mask_ref} holds label {int(m.max())} but only "
                    f"{self.num_classes} classes are declared"
                )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent.resolve()
        lines = [json.dumps({"kind": "header", "version": MANIFEST_VERSION,
                             "class_names": self.class_names,
                             "background_id": self.background_id})]
        for e in self.entries:
            rec = {"image": _relpath(e.image_ref, base), "mask": _relpath(e.mask_ref, base), "split": e.split}
            if e.human_ref is not None:
                rec["human"] = _relpath(e.human_ref, base)
            lines.append(json.dumps(rec))
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        base = path.parent.resolve()
        records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        if not records or records[0].get("kind") != "header":
            raise ContractError(f"{path}: first record must be the header")
        header = records[0]
        if header.get("version") != MANIFEST_VERSION:
            raise ContractError(f"{path}: unsupported manifest version {header.get('version')}")
        entries = [ManifestEntry(_abspath(r["image"], base), _abspath(r["mask"], base), r["split"],
                                 _abspath(r["human"], base) if r.get("human") else None)
                   for r in records[1:]]
        return cls(entries, list(header["class_names"]), int(header.get("background_id", 0)))


def _relpath(p: Path, base: Path) -> str:
    p = Path(p).resolve()
    try:
        return os.path.relpath(p, base)
    except ValueError:
        return str(p)


def _abspath(ref: str, base: Path) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else (base / p).resolve()


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise ContractError(f"{path}: masks must be single-channel label images, got mode {im.mode}")
        return np.array(im, dtype=np.uint8)


def save_mask(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask)
    if mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise ContractError("mask labels must fit in 8 bits")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)


def load_image(path) -> np.ndarray:
    """RGB image as H x W x 3 float32 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


@lru_cache(maxsize=4096)
def _cached_pair(image_ref: Path, mask_ref: Path):
    img, m = load_image(image_ref), load_mask(mask_ref)
    img.setflags(write=False)
    m.setflags(write=False)
    return img, m


def load_human_mask(entry: ManifestEntry) -> np.ndarray:
    """Binary human foreground of an entry: the stored one, else derived from its label mask."""
    if entry.human_ref is not None:
        return derive_binary_mask(load_mask(entry.human_ref))
    return derive_binary_mask(load_mask(entry.mask_ref))


@dataclass
class FoldSpec:
    """Class merging and base/novel membership for one fold.

    ``merge_map`` maps every raw label id to a merged id; ``class_names``
    names the merged ids (defaults to the source manifest's names).
    """

    merge_map: dict[int, int]
    base_classes: frozenset[int]
    novel_classes: frozenset[int]
    class_names: Optional[list[str]] = None
    name: str = "fold"

    def __post_init__(self):
        self.merge_map = {int(k): int(v) for k, v in self.merge_map.items()}
        self.base_classes = frozenset(int(c) for c in self.base_classes)
        self.novel_classes = frozenset(int(c) for c in self.novel_classes)
        if self.base_classes & self.novel_classes:
            raise ContractError(f"base and novel classes overlap: {sorted(self.base_classes & self.novel_classes)}")
        if 0 in self.base_classes | self.novel_classes:
            raise ContractError("background (0) cannot be a base or novel class")
        if self.merge_map.get(0, 0) != 0:
            raise ContractError("raw background must merge into background")
        stray = set(self.merge_map.values()) - self.c_human
        if stray:
            raise ContractError(f"merged ids {sorted(stray)} are neither base, novel nor background")
        if self.class_names is not None and max(self.c_human) >= len(self.class_names):
            raise ContractError("class_names does not cover every merged id")

    @property
    def c_human(self) -> frozenset[int]:
        return frozenset({0}) | self.base_classes | self.novel_classes

    @classmethod
    def identity(cls, class_names: Sequence[str], novel: Iterable, name: str = "fold") -> "FoldSpec":
        names = list(class_names)
        novel_ids = {names.index(c) if isinstance(c, str) else int(c) for c in novel}
        base = set(range(1, len(names))) - novel_ids
        return cls({i: i for i in range(len(names))}, frozenset(base), frozenset(novel_ids), names, name)

    def lut(self) -> np.ndarray:
        """256-entry lookup table; unmapped raw ids hold -1."""
        table = np.full(256, -1, dtype=np.int16)
        for raw, merged in self.merge_map.items():
            table[raw] = merged
        return table

    def to_dict(self) -> dict:
        return {"name": self.name,
                "merge_map": {str(k): v for k, v in sorted(self.merge_map.items())},
                "base_classes": sorted(self.base_classes),
                "novel_classes": sorted(self.novel_classes),
                "class_names": self.class_names}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSpec":
        names = d.get("class_names")

        def ids(xs):
            return frozenset(names.index(x) if isinstance(x, str) else int(x) for x in xs)

        merge = {int(k): (names.index(v) if isinstance(v, str) else int(v))
                 for k, v in d["merge_map"].items()}
        return cls(merge, ids(d["base_classes"]), ids(d["novel_classes"]), names, d.get("name", "fold"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "FoldSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def remap_mask(mask: np.ndarray, fold: FoldSpec, phase: str, source="<array>") -> np.ndarray:
    lut = fold.lut()
    out = lut[mask]
    if (out < 0).any():
        bad = int(mask[out < 0].flat[0])
        raise RemapError(bad, source)
    if phase == "meta_train" and fold.novel_classes:
        out[np.isin(out, list(fold.novel_classes))] = 0
    return out.astype(np.uint8)


def tailor_dataset(manifest: DatasetManifest, fold: FoldSpec, phase: str, out_dir) -> DatasetManifest:
    """Rewrite masks through the fold's merge map into ``out_dir``.

    Only the entries belonging to ``phase`` are kept. During meta-training
    the novel classes are folded into the background, and the human
    foreground taken before that step is saved under ``out_dir/human``.
    Images are not copied; the returned manifest (also saved as
    ``out_dir/manifest.jsonl``) points at the originals.
    """
    if phase not in PHASE_SPLITS:
        raise ContractError(f"phase must be one of {sorted(PHASE_SPLITS)}, got {phase!r}")
    out_dir = Path(out_dir)
    entries = []
    for i, e in enumerate(x for x in manifest.entries if x.split in PHASE_SPLITS[phase]):
        raw = load_mask(e.mask_ref)
        mask = remap_mask(raw, fold, phase, source=e.mask_ref)
        name = f"{i:06d}_{Path(e.mask_ref).stem}.png"
        dst = (out_dir / "masks" / e.split / name).resolve()
        save_mask(mask, dst)
        human = None
        if phase == "meta_train":
            human = (out_dir / "human" / e.split / name).resolve()
            save_mask(load_human_mask(e) if e.human_ref is not None else derive_binary_mask(raw), human)
        entries.append(ManifestEntry(Path(e.image_ref), dst, e.split, human))
    names = list(fold.class_names) if fold.class_names is not None else list(manifest.class_names)
    out = DatasetManifest(entries, names)
    out.save(out_dir / "manifest.jsonl")
    return out


def derive_binary_mask(mask: np.ndarray) -> np.ndarray:
    """Human foreground indicator: 1 wherever the label is not background."""
    return (np.asarray(mask) != 0).astype(np.uint8)


@dataclass
class Episode:
    """One meta-task.

    ``query_mask`` keeps every annotated label of the query; use
    :meth:`query_target` for the labels restricted to ``class_set``.
    ``support_human``/``query_human`` are binary human-foreground masks;
    when absent they are derived from the label masks.
    """

    support_image: np.ndarray
    support_mask: np.ndarray
    query_image: np.ndarray
    query_mask: Optional[np.ndarray]
    class_set: list[int]
    support_index: int = -1
    query_index: int = -1
    support_human: Optional[np.ndarray] = None
    query_human: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.class_set) < 2 or self.class_set[0] != 0:
            raise ContractError(f"class_set must start with background and hold a foreground class: {self.class_set}")
        stray = set(np.unique(self.support_mask).tolist()) - set(self.class_set)
        if stray:
            raise ContractError(f"support labels {sorted(stray)} are missing from class_set")

    @property
    def foreground(self) -> list[int]:
        return self.class_set[1:]

    def query_target(self) -> np.ndarray:
        if self.query_mask is None:
            raise ContractError("episode has no query mask")
        return np.where(np.isin(self.query_mask, self.class_set), self.query_mask, 0).astype(np.uint8)

    def human_masks(self) -> tuple[np.ndarray, np.ndarray]:
        """Binary human foreground of the support and the query."""
        s = self.support_human if self.support_human is not None else derive_binary_mask(self.support_mask)
        if self.query_human is not None:
            return s, self.query_human
        if self.query_mask is None:
            raise ContractError("episode has no query mask")
        return s, derive_binary_mask(self.query_mask)


def mask_labels(mask: np.ndarray) -> list[int]:
    return [int(c) for c in np.unique(mask)]


def one_way_mask(mask: np.ndarray, target_class: int) -> np.ndarray:
    return np.where(mask == target_class, target_class, 0).astype(np.uint8)


def sample_episode(manifest: DatasetManifest, rng_seed: int, way: str = "k_way",
                   target_class: Optional[int] = None, phase: str = "meta_train") -> Episode:
    """Draw one episode from the phase's support and query splits.

    For ``one_way`` the support is drawn among images containing
    ``target_class`` and its mask is reduced to ``{0, target_class}``.
    """
    if way not in ("k_way", "one_way"):
        raise ContractError(f"unknown way {way!r}")
    sup_split, qry_split = PHASE_SPLITS[phase]
    supports, queries = manifest.split(sup_split), manifest.split(qry_split)
    if not supports or not queries:
        raise SamplingError(f"{phase} needs nonempty support and query splits")
    rng = np.random.default_rng(rng_seed)

    sup_masks = [_cached_pair(e.image_ref, e.mask_ref)[1] for e in supports]
    if way == "one_way":
        if target_class is None:
            raise ContractError("one_way sampling needs target_class")
        target_class = manifest.class_id(target_class)
        candidates = [i for i, m in enumerate(sup_masks) if (m == target_class).any()]
        if not candidates:
            raise SamplingError(f"no {sup_split} image contains class {target_class}")
    else:
        candidates = [i for i, m in enumerate(sup_masks) if (m != 0).any()]
        if not candidates:
            raise SamplingError(f"every {sup_split} mask is pure background")
    s = int(candidates[rng.integers(len(candidates))])

    q_candidates = [i for i, e in enumerate(queries) if e.image_ref != supports[s].image_ref]
    if way == "one_way":
        with_target = [i for i in q_candidates
                       if (_cached_pair(queries[i].image_ref, queries[i].mask_ref)[1] == target_class).any()]
        q_candidates = with_target or q_candidates
    if not q_candidates:
        raise SamplingError("no query image distinct from the support")
    q = int(q_candidates[rng.integers(len(q_candidates))])
    return make_episode(manifest, s, q, phase=phase, target_class=target_class if way == "one_way" else None)


def make_episode(manifest: DatasetManifest, support_index: int, query_index: int,
                 phase: str = "meta_test", class_set: Optional[Sequence[int]] = None,
                 target_class: Optional[int] = None) -> Episode:
    """Episode for a fixed (support, query) pair, indices into the phase's splits."""
    sup_split, qry_split = PHASE_SPLITS[phase]
    se, qe = manifest.split(sup_split)[support_index], manifest.split(qry_split)[query_index]
    if se.image_ref == qe.image_ref:
        raise SamplingError("an image cannot be its own support")
    s_img, s_mask = _cached_pair(se.image_ref, se.mask_ref)
    q_img, q_mask = _cached_pair(qe.image_ref, qe.mask_ref)
    if target_class is not None:
        s_mask = one_way_mask(s_mask, target_class)
        cs = [0, int(target_class)]
    elif class_set is not None:
        cs = [int(c) for c in class_set]
        s_mask = np.where(np.isin(s_mask, cs), s_mask, 0).astype(np.uint8)
    else:
        cs = sorted(set(mask_labels(s_mask)) | {0})
    return Episode(s_img, s_mask, q_img, q_mask, cs, support_index, query_index)


class TestPair(NamedTuple):
    support_index: int
    query_index: int
    class_set: tuple[int, ...]


def build_meta_test_list(manifest: DatasetManifest, fold: FoldSpec, min_evals_per_class: int = 150,
                         rng_seed: int = 0) -> list[TestPair]:
    """Draw distinct meta-test (support, query) pairs until every class is covered.

    A class counts as evaluated by a pair when it is annotated in both the
    support mask (so it is in the pair's class set) and the query mask.
    Pairs are added greedily for the currently least-covered class.
    """
    supports, queries = manifest.split("meta_test_support"), manifest.split("meta_test_query")
    if not supports or not queries:
        raise CoverageError(-1, "meta-test support and query splits must be nonempty")
    if min_evals_per_class <= 0:
        return []
    rng = np.random.default_rng(rng_seed)
    s_labels = [set(mask_labels(load_mask(e.mask_ref))) | {0} for e in supports]
    q_labels = [set(mask_labels(load_mask(e.mask_ref))) | {0} for e in queries]

    counts = {c: 0 for c in sorted(fold.c_human)}
    used: set[tuple[int, int]] = set()
    pairs: list[TestPair] = []
    for c in counts:
        n_s = sum(c in ls for ls in s_labels)
        n_q = sum(c in lq for lq in q_labels)
        if n_s == 0 or n_q == 0:
            where = "support" if n_s == 0 else "query"
            raise CoverageError(c, f"class {c} never appears in a meta-test {where} mask")

    while True:
        short = [c for c, n in counts.items() if n < min_evals_per_class]
        if not short:
            break
        c = min(short, key=lambda k: (counts[k], k))
        options = [(i, j) for i, ls in enumerate(s_labels) if c in ls
                   for j, lq in enumerate(q_labels) if c in lq
                   and (i, j) not in used and supports[i].image_ref != queries[j].image_ref]
        if not options:
            raise CoverageError(c, f"class {c} can only be evaluated {counts[c]} times "
                                   f"(< {min_evals_per_class}) on distinct pairs")
        i, j = options[rng.integers(len(options))]
        used.add((i, j))
        class_set = tuple(sorted(s_labels[i]))
        pairs.append(TestPair(i, j, class_set))
        for k in s_labels[i] & q_labels[j]:
            if k in counts:
                counts[k] += 1
    return pairs


def count_evaluations(manifest: DatasetManifest, pairs: Sequence[TestPair]) -> dict[int, int]:
    """How many pairs evaluate each class, recounted from the masks."""
    supports, queries = manifest.split("meta_test_support"), manifest.split("meta_test_query")
    counts: dict[int, int] = {}
    for p in pairs:
        s = set(mask_labels(load_mask(supports[p.support_index].mask_ref))) | {0}
        q = set(mask_labels(load_mask(queries[p.query_index].mask_ref))) | {0}
        for c in (s & q & set(p.class_set)):
            counts[c] = counts.get(c, 0) + 1
    return counts


def save_test_list(pairs: Sequence[TestPair], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for p in pairs:
            f.write(json.dumps({"support": p.support_index, "query": p.query_index,
                                "class_set": list(p.class_set)}) + "\n")


def load_test_list(path) -> list[TestPair]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            r = json.loads(line)
            out.append(TestPair(int(r["support"]), int(r["query"]), tuple(int(c) for c in r["class_set"])))
    return out
