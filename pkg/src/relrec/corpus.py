"""Interaction corpus handling: ingestion, k-core filtering, chronological
splits, relation triplet construction, and negative sampling.

All loaders remap raw string IDs to dense integer indices and keep the
mapping tables so downstream reports can resolve indices back to the
original identifiers.
"""

from __future__ import annotations

import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class CorpusError(Exception):
    """Raised for malformed or unusable input data."""


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    time: int


@dataclass
class UserSequence:
    user: int
    items: list[int]

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class Triplet:
    head: int
    tail: int
    relation: int


@dataclass
class RelationVocab:
    """Dense relation IDs: predefined relations first, then latent ones."""

    predefined: list[str]
    num_latent: int

    @property
    def num_predefined(self) -> int:
        return len(self.predefined)

    @property
    def num_relations(self) -> int:
        return len(self.predefined) + self.num_latent

    def name(self, relation_id: int) -> str:
        if relation_id < self.num_predefined:
            return self.predefined[relation_id]
        return f"latent_{relation_id - self.num_predefined}"

    def names(self) -> list[str]:
        return [self.name(r) for r in range(self.num_relations)]


@dataclass
class DatasetSplit:
    """Per-user leave-one-out split: last item test, second-to-last valid."""

    train: dict[int, list[int]]
    valid_target: dict[int, int]
    test_target: dict[int, int]
    skipped: int = 0


@dataclass
class IdMap:
    """Bidirectional raw-id <-> dense-index mapping."""

    raw_to_idx: dict[str, int] = field(default_factory=dict)
    idx_to_raw: list[str] = field(default_factory=list)

    def intern(self, raw: str) -> int:
        idx = self.raw_to_idx.get(raw)
        if idx is None:
            idx = len(self.idx_to_raw)
            self.raw_to_idx[raw] = idx
            self.idx_to_raw.append(raw)
        return idx

    def __len__(self) -> int:
        return len(self.idx_to_raw)

    def subset(self, keep_old_to_new: dict[int, int]) -> "IdMap":
        """Re-densified map after filtering; preserves relative order."""
        new_raw = [""] * len(keep_old_to_new)
        for old, new in keep_old_to_new.items():
            new_raw[new] = self.idx_to_raw[old]
        return IdMap({raw: i for i, raw in enumerate(new_raw)}, new_raw)


def parse_columns(spec: str) -> dict[str, int]:
    """Map column roles to positions from a spec like "user,item,time".

    Unused columns are marked with "-" (or any other token); "user",
    "item" and "time" must each appear exactly once.
    """
    names = [c.strip() for c in spec.split(",")]
    positions = {}
    for role in ("user", "item", "time"):
        hits = [i for i, n in enumerate(names) if n == role]
        if len(hits) != 1:
            raise CorpusError(f"column spec {spec!r} must name {role!r} exactly once")
        positions[role] = hits[0]
    positions["_width"] = len(names)
    return positions


def load_interactions(
    path: str, columns: str = "user,item,time", sep: str = "\t"
) -> tuple[list[Interaction], IdMap, IdMap]:
    """Read delimited interaction rows, assigning dense user/item indices
    in first-seen order. Duplicate (user, item, time) rows are kept.
    """
    if not os.path.exists(path):
        raise CorpusError(f"interactions file not found: {path}")
    pos = parse_columns(columns)
    users, items = IdMap(), IdMap()
    interactions: list[Interaction] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(sep)
            if len(fields) < pos["_width"]:
                raise CorpusError(f"{path}:{lineno}: expected {pos['_width']} columns, got {len(fields)}")
            try:
                ts = int(float(fields[pos["time"]]))
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: bad timestamp {fields[pos['time']]!r}") from None
            u = users.intern(fields[pos["user"]])
            v = items.intern(fields[pos["item"]])
            interactions.append(Interaction(u, v, ts))
    if not interactions:
        raise CorpusError(f"no interactions in {path}")
    return interactions, users, items


def kcore_filter(
    interactions: list[Interaction], k: int = 5
) -> tuple[list[Interaction], dict[int, int], dict[int, int]]:
    """Iteratively drop users/items with fewer than k interactions until a
    fixpoint, then re-densify indices. Returns the filtered interactions
    plus old->new index maps for users and items.
    """
    if k < 1:
        raise CorpusError(f"k must be >= 1, got {k}")
    current = interactions
    while True:
        user_counts = Counter(x.user for x in current)
        item_counts = Counter(x.item for x in current)
        kept = [
            x for x in current
            if user_counts[x.user] >= k and item_counts[x.item] >= k
        ]
        if len(kept) == len(current):
            break
        current = kept
    if not current:
        raise CorpusError("k-core eliminated all data")
    user_old2new = {u: i for i, u in enumerate(sorted({x.user for x in current}))}
    item_old2new = {v: i for i, v in enumerate(sorted({x.item for x in current}))}
    remapped = [
        Interaction(user_old2new[x.user], item_old2new[x.item], x.time) for x in current
    ]
    return remapped, user_old2new, item_old2new


def build_sequences(interactions: list[Interaction], num_users: int) -> list[UserSequence]:
    """Group interactions per user, ordered by timestamp with a stable
    tiebreak on input order."""
    per_user: list[list[tuple[int, int, int]]] = [[] for _ in range(num_users)]
    for order, x in enumerate(interactions):
        per_user[x.user].append((x.time, order, x.item))
    sequences = []
    for u in range(num_users):
        per_user[u].sort(key=lambda t: (t[0], t[1]))
        sequences.append(UserSequence(u, [item for _, _, item in per_user[u]]))
    return sequences


def leave_one_out_split(sequences: list[UserSequence]) -> DatasetSplit:
    """Last item to test, second-to-last to valid, the rest to train.
    Sequences shorter than 3 are excluded and counted."""
    train: dict[int, list[int]] = {}
    valid: dict[int, int] = {}
    test: dict[int, int] = {}
    skipped = 0
    for seq in sequences:
        if len(seq) < 3:
            skipped += 1
            continue
        train[seq.user] = seq.items[:-2]
        valid[seq.user] = seq.items[-2]
        test[seq.user] = seq.items[-1]
    if skipped:
        logger.warning("excluded %d sequences shorter than 3 from the split", skipped)
    return DatasetSplit(train, valid, test, skipped)


def build_attribute_triplets(
    item_attributes: dict[int, set],
    relation: int,
    max_per_item: int | None = None,
) -> list[Triplet]:
    """Triplets (i, j, relation) for every pair of items sharing at least
    one attribute value, stored in both directions.

    max_per_item caps the number of neighbors per head item (smallest
    neighbor indices win) to keep dense attribute groups desk-scale.
    """
    by_value: dict = defaultdict(list)
    for item in sorted(item_attributes):
        for value in item_attributes[item]:
            by_value[value].append(item)
    neighbors: dict[int, set[int]] = defaultdict(set)
    for members in by_value.values():
        for i in members:
            for j in members:
                if i != j:
                    neighbors[i].add(j)
    triplets = []
    for i in sorted(neighbors):
        tails = sorted(neighbors[i])
        if max_per_item is not None:
            tails = tails[:max_per_item]
        triplets.extend(Triplet(i, j, relation) for j in tails)
    return triplets


def build_cooccurrence_triplets(
    pairs: list[tuple[int, int]], relation: int, num_items: int
) -> tuple[list[Triplet], int]:
    """Deduplicated triplets from explicit item pairs; pairs touching
    unknown items or self-loops are dropped and counted."""
    seen: set[tuple[int, int]] = set()
    dropped = 0
    out = []
    for head, tail in pairs:
        if not (0 <= head < num_items and 0 <= tail < num_items) or head == tail:
            dropped += 1
            continue
        if (head, tail) in seen:
            continue
        seen.add((head, tail))
        out.append(Triplet(head, tail, relation))
    return out, dropped


def sample_negative_item(exclude: set[int], num_items: int, rng: np.random.Generator) -> int:
    """Uniform draw over items outside the exclusion set."""
    free = num_items - len(exclude)
    if free <= 0:
        raise CorpusError("exclusion set covers all items")
    # Rejection sampling wins while the exclusion set is sparse.
    if len(exclude) * 2 < num_items:
        while True:
            cand = int(rng.integers(num_items))
            if cand not in exclude:
                return cand
    pool = np.setdiff1d(np.arange(num_items), np.fromiter(exclude, dtype=np.int64))
    return int(pool[rng.integers(len(pool))])


def sample_eval_negatives(
    history: set[int], num_items: int, n: int, rng: np.random.Generator
) -> list[int]:
    """n distinct items the user never interacted with, for sampled ranking."""
    eligible = num_items - len(history)
    if eligible < n:
        raise CorpusError(
            f"need {n} negatives but only {eligible} items outside a history of {len(history)}"
        )
    pool = np.setdiff1d(np.arange(num_items), np.fromiter(history, dtype=np.int64))
    picked = rng.choice(pool, size=n, replace=False)
    return [int(x) for x in picked]


def history_window(items: list[int], position: int, max_len: int = 20) -> list[int]:
    """The most recent min(position, max_len) items before position, oldest first."""
    if position < 1 or position >= len(items) + 1:
        raise CorpusError(f"position {position} has no history in a sequence of {len(items)}")
    start = max(0, position - max_len)
    return items[start:position]


def load_item_text(path: str, item_map: IdMap) -> list[str]:
    """Item texts keyed by raw item id; items without a row get "". """
    texts = [""] * len(item_map)
    if not os.path.exists(path):
        raise CorpusError(f"item text file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 1)
            if len(parts) != 2:
                raise CorpusError(f"{path}:{lineno}: expected item<TAB>text")
            idx = item_map.raw_to_idx.get(parts[0])
            if idx is not None:
                texts[idx] = parts[1]
    return texts


def load_item_attributes(path: str, item_map: IdMap) -> dict[str, dict[int, set]]:
    """Rows item<TAB>attribute<TAB>value grouped per attribute name.
    Rows for filtered-out items are ignored."""
    if not os.path.exists(path):
        raise CorpusError(f"metadata file not found: {path}")
    attrs: dict[str, dict[int, set]] = defaultdict(lambda: defaultdict(set))
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorpusError(f"{path}:{lineno}: expected item<TAB>attribute<TAB>value")
            idx = item_map.raw_to_idx.get(parts[0])
            if idx is not None:
                attrs[parts[1]][idx].add(parts[2])
    return {name: dict(values) for name, values in attrs.items()}


def load_cooccurrence(path: str, item_map: IdMap) -> dict[str, list[tuple[int, int]]]:
    """Rows item<TAB>item<TAB>relation grouped per relation name. Pairs with
    unknown endpoints survive here and are dropped (and counted) later."""
    if not os.path.exists(path):
        raise CorpusError(f"co-occurrence file not found: {path}")
    pairs: dict[str, list[tuple[int, int]]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorpusError(f"{path}:{lineno}: expected item<TAB>item<TAB>relation")
            a = item_map.raw_to_idx.get(parts[0], -1)
            b = item_map.raw_to_idx.get(parts[1], -1)
            pairs[parts[2]].append((a, b))
    return dict(pairs)


def eval_negative_rng(seed: int, user: int, split: str) -> np.random.Generator:
    """Generator fixed per (seed, user, split) so evaluation candidate sets
    are reproducible and identical across model variants."""
    split_tag = {"valid": 0, "test": 1}[split]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, user, split_tag])))


@dataclass
class PreparedDataset:
    """Everything training and evaluation need, frozen at prepare time."""

    user_map: IdMap
    item_map: IdMap
    split: DatasetSplit
    relations: RelationVocab  # num_latent is 0 here; the trainer extends it
    triplets: np.ndarray  # (T, 3) int32 rows (head, tail, relation)
    item_texts: list[str]
    eval_negatives: dict[str, np.ndarray]  # "{split}_{seed}" -> (n_users, n) int32
    n_interactions: int
    cooccurrence_dropped: int = 0

    @property
    def num_users(self) -> int:
        return len(self.user_map)

    @property
    def num_items(self) -> int:
        return len(self.item_map)

    @property
    def eval_users(self) -> list[int]:
        """Users with a full split, in the row order of the frozen
        evaluation-negative arrays."""
        return sorted(self.split.train)

    def user_history_set(self, user: int) -> set[int]:
        full = set(self.split.train.get(user, ()))
        if user in self.split.valid_target:
            full.add(self.split.valid_target[user])
            full.add(self.split.test_target[user])
        return full

    def eval_history(self, user: int, split: str, max_len: int) -> list[int]:
        """Window preceding the evaluated target: train prefix for valid,
        train + valid item for test."""
        items = list(self.split.train[user])
        if split == "test":
            items.append(self.split.valid_target[user])
        return items[-max_len:]

    def stats(self) -> dict:
        density = self.n_interactions / (self.num_users * self.num_items)
        return {
            "#user": self.num_users,
            "#item": self.num_items,
            "#inter.": self.n_interactions,
            "density": density,
            "#relation": self.relations.num_predefined,
            "#triplets": int(len(self.triplets)),
        }

    def save(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        users = sorted(self.split.train)
        offsets = np.zeros(len(users) + 1, dtype=np.int64)
        flat: list[int] = []
        for i, u in enumerate(users):
            flat.extend(self.split.train[u])
            offsets[i + 1] = len(flat)
        arrays = {
            "split_users": np.asarray(users, dtype=np.int32),
            "train_offsets": offsets,
            "train_items": np.asarray(flat, dtype=np.int32),
            "valid_targets": np.asarray([self.split.valid_target[u] for u in users], dtype=np.int32),
            "test_targets": np.asarray([self.split.test_target[u] for u in users], dtype=np.int32),
            "triplets": self.triplets,
        }
        for key, arr in self.eval_negatives.items():
            arrays[f"neg_{key}"] = arr
        np.savez_compressed(os.path.join(out_dir, "prepared.npz"), **arrays)
        meta = {
            "users": self.user_map.idx_to_raw,
            "items": self.item_map.idx_to_raw,
            "predefined_relations": self.relations.predefined,
            "n_interactions": self.n_interactions,
            "split_skipped": self.split.skipped,
            "cooccurrence_dropped": self.cooccurrence_dropped,
        }
        with open(os.path.join(out_dir, "mappings.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh)
        with open(os.path.join(out_dir, "item_text.json"), "w", encoding="utf-8") as fh:
            json.dump(self.item_texts, fh)
        with open(os.path.join(out_dir, "stats.json"), "w", encoding="utf-8") as fh:
            json.dump(self.stats(), fh, indent=2)

    @classmethod
    def load(cls, out_dir: str) -> "PreparedDataset":
        with open(os.path.join(out_dir, "mappings.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        with open(os.path.join(out_dir, "item_text.json"), encoding="utf-8") as fh:
            texts = json.load(fh)
        data = np.load(os.path.join(out_dir, "prepared.npz"))
        users = data["split_users"]
        offsets = data["train_offsets"]
        flat = data["train_items"]
        train = {
            int(u): [int(x) for x in flat[offsets[i]:offsets[i + 1]]]
            for i, u in enumerate(users)
        }
        valid = {int(u): int(t) for u, t in zip(users, data["valid_targets"])}
        test = {int(u): int(t) for u, t in zip(users, data["test_targets"])}
        negatives = {
            key[len("neg_"):]: data[key] for key in data.files if key.startswith("neg_")
        }
        user_map = IdMap({raw: i for i, raw in enumerate(meta["users"])}, meta["users"])
        item_map = IdMap({raw: i for i, raw in enumerate(meta["items"])}, meta["items"])
        return cls(
            user_map=user_map,
            item_map=item_map,
            split=DatasetSplit(train, valid, test, meta.get("split_skipped", 0)),
            relations=RelationVocab(meta["predefined_relations"], 0),
            triplets=data["triplets"],
            item_texts=texts,
            eval_negatives=negatives,
            n_interactions=meta["n_interactions"],
            cooccurrence_dropped=meta.get("cooccurrence_dropped", 0),
        )


def prepare_dataset(
    interactions_path: str,
    item_text_path: str | None = None,
    metadata_path: str | None = None,
    cooccurrence_path: str | None = None,
    columns: str = "user,item,time",
    sep: str = "\t",
    k_core: int = 5,
    n_eval_negatives: int = 99,
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5),
    max_triplets_per_item: int | None = None,
) -> PreparedDataset:
    """Full ingestion pipeline: load, k-core filter, split, build triplets,
    and freeze per-seed evaluation negatives."""
    raw, user_map, item_map = load_interactions(interactions_path, columns, sep)
    filtered, user_old2new, item_old2new = kcore_filter(raw, k_core)
    user_map = user_map.subset(user_old2new)
    item_map = item_map.subset(item_old2new)
    sequences = build_sequences(filtered, len(user_map))
    split = leave_one_out_split(sequences)

    texts = load_item_text(item_text_path, item_map) if item_text_path else [""] * len(item_map)

    relation_names: list[str] = []
    triplets: list[Triplet] = []
    dropped = 0
    if metadata_path:
        attrs = load_item_attributes(metadata_path, item_map)
        for name in sorted(attrs):
            rel_id = len(relation_names)
            relation_names.append(name)
            triplets.extend(build_attribute_triplets(attrs[name], rel_id, max_triplets_per_item))
    if cooccurrence_path:
        co = load_cooccurrence(cooccurrence_path, item_map)
        for name in sorted(co):
            rel_id = len(relation_names)
            relation_names.append(name)
            built, n_drop = build_cooccurrence_triplets(co[name], rel_id, len(item_map))
            triplets.extend(built)
            dropped += n_drop
    triplet_arr = (
        np.asarray([(t.head, t.tail, t.relation) for t in triplets], dtype=np.int32)
        if triplets
        else np.zeros((0, 3), dtype=np.int32)
    )

    users = sorted(split.train)
    negatives: dict[str, np.ndarray] = {}
    for seed in seeds:
        for split_name in ("valid", "test"):
            rows = np.zeros((len(users), n_eval_negatives), dtype=np.int32)
            for i, u in enumerate(users):
                history = set(split.train[u]) | {split.valid_target[u], split.test_target[u]}
                rng = eval_negative_rng(seed, u, split_name)
                rows[i] = sample_eval_negatives(history, len(item_map), n_eval_negatives, rng)
            negatives[f"{split_name}_{seed}"] = rows

    return PreparedDataset(
        user_map=user_map,
        item_map=item_map,
        split=split,
        relations=RelationVocab(relation_names, 0),
        triplets=triplet_arr,
        item_texts=texts,
        eval_negatives=negatives,
        n_interactions=len(filtered),
        cooccurrence_dropped=dropped,
    )
