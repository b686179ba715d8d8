from __future__ import annotations

import csv
import hashlib
import json
import logging
import typing as t
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from .config import DataConfig, RunConfig
from .errors import DataError, DatasetCollapsedError

logger = logging.getLogger(__name__)

PAD_ID = 0
SNAPSHOT_FORMAT = "flowrec-snapshot"
SNAPSHOT_VERSION = 1

type Phase = t.Literal["train", "valid", "test"]
PHASES = ("train", "valid", "test")

# Column positions of (user, item, timestamp) per input format.
FIELD_POSITIONS = {
    "tsv": (0, 1, 2),
    "csv": (0, 1, 2),
    "movielens_dat": (0, 1, 3),
}
HEADER_NAMES = frozenset(["timestamp", "time", "ts"])


# --------------------------------------------------------------------------
# Raw interactions
# --------------------------------------------------------------------------


@dataclass(slots=True, frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass(slots=True, frozen=True)
class InteractionLog:
    """Interactions in file order, held as a (user, item, timestamp) frame."""

    frame: pd.DataFrame

    @classmethod
    def from_records(
        cls, records: Iterable[Interaction | tuple[str, str, int]]
    ) -> t.Self:
        rows = [
            (r.user_id, r.item_id, r.timestamp)
            if isinstance(r, Interaction)
            else tuple(r)
            for r in records
        ]
        frame = pd.DataFrame(rows, columns=["user", "item", "timestamp"])
        return cls(
            frame.astype({"user": str, "item": str, "timestamp": "int64"})
            .reset_index(drop=True)
        )

    def __len__(self) -> int:
        return len(self.frame)

    def __iter__(self) -> Iterator[Interaction]:
        for user, item, timestamp in self.frame.itertuples(index=False, name=None):
            yield Interaction(user, item, int(timestamp))


def _split_fields(line: str, fmt: str) -> list[str]:
    match fmt:
        case "tsv":
            return line.split("\t")
        case "csv":
            return next(csv.reader([line]))
        case "movielens_dat":
            return line.split("::")
        case _:
            raise ValueError(f"Unsupported input format {fmt!r}.")


def ingest(
    path: str | Path, format: str = "tsv", *, strict: bool = True
) -> InteractionLog:
    """
    Read (user, item, timestamp) rows from a TSV, CSV, or MovieLens ``::`` file.

    TSV and CSV files use the first three columns; a header row whose timestamp
    column is named ``timestamp``/``time``/``ts`` is skipped. MovieLens rating
    files use columns 1, 2 and 4 (the rating is ignored). Malformed rows raise
    a DataError naming the line in strict mode and are counted and skipped
    otherwise.
    """
    if format not in FIELD_POSITIONS:
        raise ValueError(f"Unsupported input format {format!r}.")
    user_at, item_at, ts_at = FIELD_POSITIONS[format]
    rows: list[tuple[str, str, int]] = []
    skipped = 0
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = [p.strip() for p in _split_fields(line, format)]
        try:
            if len(parts) <= ts_at:
                raise ValueError(
                    f"expected at least {ts_at + 1} fields, found {len(parts)}"
                )
            user, item = parts[user_at], parts[item_at]
            if not user or not item:
                raise ValueError("empty user or item field")
            rows.append((user, item, int(parts[ts_at])))
        except ValueError as exc:
            header = len(parts) > ts_at and parts[ts_at].lower() in HEADER_NAMES
            if lineno == 1 and header:
                continue
            if strict:
                raise DataError(
                    f"{path}:{lineno}: malformed row {line!r} ({exc})."
                ) from exc
            skipped += 1
    if skipped:
        logger.warning(f"Skipped {skipped} malformed row(s) in {path}.")
    if not rows:
        logger.warning(f"No interactions found in {path}.")
    logger.info(f"Read {len(rows)} interactions from {path}.")
    return InteractionLog.from_records(rows)


# --------------------------------------------------------------------------
# Core filtering and the item catalog
# --------------------------------------------------------------------------


@dataclass(slots=True, frozen=True)
class Catalog:
    """Bijection between raw item ids and dense ids ``1..|I|``; 0 is padding."""

    item_ids: tuple[str, ...]
    """Raw item id for dense id ``i + 1``."""

    filter_iterations: int = 0
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(
            self, "index", {item: i + 1 for i, item in enumerate(self.item_ids)}
        )

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def pad_id(self) -> int:
        return PAD_ID

    def dense_id(self, item_id: str) -> int:
        try:
            return self.index[item_id]
        except KeyError:
            raise KeyError(f"Item {item_id!r} is not in the catalog.") from None

    def item_id(self, dense_id: int) -> str:
        if not 1 <= dense_id <= self.num_items:
            raise ValueError(f"Dense id {dense_id} is outside 1..{self.num_items}.")
        return self.item_ids[dense_id - 1]


def five_core_filter(
    log: InteractionLog, *, min_count: int = 5, iterative: bool = True
) -> tuple[InteractionLog, Catalog]:
    """
    Drop users and items with fewer than ``min_count`` interactions.

    With ``iterative`` the removal repeats until neither side has an entity
    under the threshold; otherwise a single simultaneous pass is made.
    """
    if len(log) == 0:
        raise DataError("Cannot filter an empty interaction log.")
    frame = log.frame
    iterations = 0
    while True:
        iterations += 1
        user_degree = frame["user"].map(frame["user"].value_counts())
        item_degree = frame["item"].map(frame["item"].value_counts())
        keep = (user_degree >= min_count) & (item_degree >= min_count)
        if keep.all():
            break
        frame = frame[keep]
        if frame.empty:
            raise DatasetCollapsedError(
                f"Dataset collapsed: {min_count}-core filtering removed every "
                f"interaction after {iterations} iteration(s)."
            )
        if not iterative:
            break
    frame = frame.reset_index(drop=True)
    item_ids = tuple(str(i) for i in pd.unique(frame["item"]))
    catalog = Catalog(item_ids=item_ids, filter_iterations=iterations)
    logger.info(
        f"{min_count}-core filtering stopped after {iterations} iteration(s): "
        f"{frame['user'].nunique()} users, {catalog.num_items} items, "
        f"{len(frame)} interactions."
    )
    return InteractionLog(frame), catalog


# --------------------------------------------------------------------------
# Sequences and the leave-one-out split
# --------------------------------------------------------------------------


@dataclass(slots=True, frozen=True)
class UserSequence:
    user: int
    items: tuple[int, ...]
    """Dense item ids in chronological order."""

    user_id: str = ""


def build_sequences(log: InteractionLog, catalog: Catalog) -> list[UserSequence]:
    """One chronological sequence per user; equal timestamps keep file order."""
    frame = log.frame
    if frame.empty:
        return []
    item_idx = frame["item"].map(catalog.index)
    if item_idx.isna().any():
        missing = frame.loc[item_idx.isna(), "item"].iloc[0]
        raise DataError(
            f"Item {missing!r} is not in the catalog; filter the log first."
        )
    user_idx, user_ids = pd.factorize(frame["user"])
    ordered = pd.DataFrame(
        {
            "user": user_idx,
            "item": item_idx.astype("int64"),
            "timestamp": frame["timestamp"],
        }
    ).sort_values("timestamp", kind="stable")
    grouped = ordered.groupby("user", sort=True)["item"].agg(list)
    return [
        UserSequence(
            user=int(u), items=tuple(int(i) for i in items), user_id=str(user_ids[u])
        )
        for u, items in grouped.items()
    ]


@dataclass(slots=True, frozen=True)
class Example:
    """One (context -> target) pair: ``items[:end]`` predicts ``items[end]``."""

    user: int
    items: tuple[int, ...]
    end: int

    @property
    def context(self) -> tuple[int, ...]:
        return self.items[: self.end]

    @property
    def target(self) -> int:
        return self.items[self.end]


@dataclass(slots=True, frozen=True)
class Split:
    """
    Leave-one-out view over user sequences.

    The last item of each sequence is the test target and the one before it
    the validation target; everything earlier is training data. Users with
    fewer than three items only contribute training data.
    """

    sequences: tuple[UserSequence, ...]

    @staticmethod
    def is_evaluable(sequence: UserSequence) -> bool:
        return len(sequence.items) >= 3

    @classmethod
    def train_length(cls, sequence: UserSequence) -> int:
        n = len(sequence.items)
        return n - 2 if cls.is_evaluable(sequence) else n

    @property
    def evaluable(self) -> tuple[UserSequence, ...]:
        return tuple(s for s in self.sequences if self.is_evaluable(s))

    @property
    def train(self) -> tuple[tuple[int, ...], ...]:
        return tuple(s.items[: self.train_length(s)] for s in self.sequences)

    @property
    def valid_target(self) -> dict[int, int]:
        return {s.user: s.items[-2] for s in self.evaluable}

    @property
    def test_target(self) -> dict[int, int]:
        return {s.user: s.items[-1] for s in self.evaluable}

    def examples(self, phase: Phase, *, all_prefixes: bool = False) -> list[Example]:
        """The (context, target) pairs used by ``phase``, in user order."""
        match phase:
            case "train":
                found: list[Example] = []
                for s in self.sequences:
                    n = self.train_length(s)
                    if all_prefixes:
                        ends = range(1, n)
                    else:
                        ends = range(n - 1, n) if n >= 2 else range(0)
                    found.extend(Example(s.user, s.items, end) for end in ends)
                return found
            case "valid":
                return [
                    Example(s.user, s.items, len(s.items) - 2) for s in self.evaluable
                ]
            case "test":
                return [
                    Example(s.user, s.items, len(s.items) - 1) for s in self.evaluable
                ]
            case _:
                raise ValueError(
                    f"Unknown phase {phase!r}; expected one of {', '.join(PHASES)}."
                )

    def train_popularity(self, num_items: int) -> np.ndarray:
        """Per-item counts over training items only; index 0 is the pad slot."""
        counts = np.zeros(num_items + 1, dtype=np.int64)
        for items in self.train:
            np.add.at(counts, np.asarray(items, dtype=np.int64), 1)
        return counts


def leave_one_out(sequences: Sequence[UserSequence]) -> Split:
    split = Split(tuple(sequences))
    train_only = len(split.sequences) - len(split.evaluable)
    if train_only:
        logger.info(
            f"{train_only} user(s) have fewer than 3 items; they only train."
        )
    return split


# --------------------------------------------------------------------------
# Batching
# --------------------------------------------------------------------------


@dataclass(slots=True, frozen=True)
class SequenceBatch:
    ids: torch.Tensor
    """B x L item ids, left-padded with PAD_ID, most recent item last."""

    lengths: torch.Tensor
    """Number of real items in each row (after truncation)."""

    targets: torch.Tensor
    users: torch.Tensor

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def row(self, b: int) -> tuple[int, ...]:
        """The real items of row ``b`` with padding removed."""
        n = int(self.lengths[b])
        return tuple(int(i) for i in self.ids[b, self.ids.shape[1] - n :]) if n else ()


def pad_contexts(
    contexts: Sequence[Sequence[int]], max_len: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Left-pad (and left-truncate) contexts into a B x max_len id matrix."""
    ids = torch.full((len(contexts), max_len), PAD_ID, dtype=torch.long)
    lengths = torch.zeros(len(contexts), dtype=torch.long)
    for b, context in enumerate(contexts):
        recent = list(context[-max_len:]) if context else []
        if recent:
            ids[b, max_len - len(recent) :] = torch.tensor(recent, dtype=torch.long)
        lengths[b] = len(recent)
    return ids, lengths


def collate(examples: Sequence[Example], max_len: int) -> SequenceBatch:
    ids, lengths = pad_contexts([e.context for e in examples], max_len)
    return SequenceBatch(
        ids=ids,
        lengths=lengths,
        targets=torch.tensor([e.target for e in examples], dtype=torch.long),
        users=torch.tensor([e.user for e in examples], dtype=torch.long),
    )


def make_batches(
    split: Split,
    phase: Phase,
    batch_size: int = 512,
    max_len: int = 50,
    seed: int | None = None,
    *,
    all_prefixes: bool = False,
) -> Iterator[SequenceBatch]:
    """
    Yield padded batches for ``phase``.

    Training examples are shuffled with ``seed`` (unshuffled when it is None);
    validation and test batches always follow user order.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive; got {batch_size}.")
    examples = split.examples(phase, all_prefixes=all_prefixes)
    order = np.arange(len(examples))
    if phase == "train" and seed is not None:
        order = np.random.default_rng(seed).permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield collate([examples[i] for i in order[start : start + batch_size]], max_len)


# --------------------------------------------------------------------------
# Evaluation groups and statistics
# --------------------------------------------------------------------------

HEAD, TAIL = "head", "tail"
SHORT, MIDDLE, LONG = "short", "middle", "long"


@dataclass(slots=True, frozen=True)
class EvalGroups:
    """Head/long-tail and sequence-length labels for every evaluable user."""

    phase: Phase
    users: tuple[int, ...]
    head_tail: tuple[str, ...]
    length_bucket: tuple[str, ...]
    head_items: frozenset[int]
    length_bounds: tuple[float, float]
    """25th and 75th percentile of training length; ties fall in the lower bucket."""

    def labels(self) -> dict[int, tuple[str, str]]:
        return {
            u: (h, b) for u, h, b in zip(self.users, self.head_tail, self.length_bucket)
        }


def head_items(popularity: np.ndarray, head_fraction: float = 0.2) -> frozenset[int]:
    """The most popular ``head_fraction`` of items, ties broken by lower id."""
    num_items = len(popularity) - 1
    if num_items <= 0:
        return frozenset()
    n_head = max(1, round(head_fraction * num_items))
    ids = np.arange(1, num_items + 1)
    ranked = ids[np.lexsort((ids, -popularity[1:]))]
    return frozenset(int(i) for i in ranked[:n_head])


def compute_groups(
    split: Split, num_items: int, *, phase: Phase = "test", head_fraction: float = 0.2
) -> EvalGroups:
    """Label users by their last context item's popularity and by history length."""
    if phase == "train":
        raise ValueError("Groups are defined for the valid and test phases only.")
    head = head_items(split.train_popularity(num_items), head_fraction)
    examples = split.examples(phase)
    lengths = np.array(
        [split.train_length(s) for s in split.evaluable], dtype=np.float64
    )
    low, high = 0.0, 0.0
    if len(lengths):
        low, high = (float(q) for q in np.percentile(lengths, [25, 75]))
    buckets = tuple(
        SHORT if n <= low else MIDDLE if n <= high else LONG for n in lengths
    )
    return EvalGroups(
        phase=phase,
        users=tuple(e.user for e in examples),
        head_tail=tuple(HEAD if e.context[-1] in head else TAIL for e in examples),
        length_bucket=buckets,
        head_items=head,
        length_bounds=(low, high),
    )


@dataclass(slots=True, frozen=True)
class DatasetStats:
    sequences: int
    items: int
    actions: int
    avg_len: float
    sparsity: float

    def format_table(self) -> str:
        return (
            f"#Sequence {self.sequences:,}  #Items {self.items:,}  "
            f"#Actions {self.actions:,}  "
            f"Avg_len {self.avg_len:.2f}  Sparsity {100 * self.sparsity:.2f}%"
        )


def dataset_stats(sequences: Sequence[UserSequence], num_items: int) -> DatasetStats:
    actions = sum(len(s.items) for s in sequences)
    users = len(sequences)
    density = actions / (users * num_items) if users and num_items else 0.0
    return DatasetStats(
        sequences=users,
        items=num_items,
        actions=actions,
        avg_len=actions / users if users else 0.0,
        sparsity=1.0 - density,
    )


# --------------------------------------------------------------------------
# The prepared dataset and its snapshot
# --------------------------------------------------------------------------


@dataclass(slots=True, frozen=True)
class PreparedData:
    catalog: Catalog
    split: Split
    groups: EvalGroups
    stats: DatasetStats

    @property
    def sequences(self) -> tuple[UserSequence, ...]:
        return self.split.sequences


def prepare(config: DataConfig, *, seed: int = 0) -> PreparedData:
    """Run the full pipeline: ingest, filter, sequence, split, group."""
    if config.format == "synthetic":
        from .synthetic import markov_corpus

        log = markov_corpus(
            num_users=config.synthetic_users,
            num_items=config.synthetic_items,
            min_len=config.synthetic_min_len,
            max_len=config.synthetic_max_len,
            seed=seed,
        )
    else:
        if config.path is None:
            raise DataError("data.path is required unless data.format is 'synthetic'.")
        log = ingest(config.path, config.format, strict=config.strict)
    return prepare_log(log, config)


def prepare_log(log: InteractionLog, config: DataConfig) -> PreparedData:
    filtered, catalog = five_core_filter(
        log, min_count=config.min_count, iterative=config.iterative_filter
    )
    split = leave_one_out(build_sequences(filtered, catalog))
    groups = compute_groups(
        split, catalog.num_items, head_fraction=config.head_fraction
    )
    stats = dataset_stats(split.sequences, catalog.num_items)
    logger.info(stats.format_table())
    return PreparedData(catalog=catalog, split=split, groups=groups, stats=stats)


def write_snapshot(path: str | Path, data: PreparedData, config: RunConfig) -> str:
    """Write a line-JSON snapshot and return the SHA-256 of its bytes."""
    records: list[dict[str, object]] = [
        {
            "kind": "header",
            "format": SNAPSHOT_FORMAT,
            "version": SNAPSHOT_VERSION,
            "config_hash": config.config_hash(),
            "config": config.to_dict(),
        },
        {
            "kind": "catalog",
            "item_ids": list(data.catalog.item_ids),
            "filter_iterations": data.catalog.filter_iterations,
        },
        *(
            {
                "kind": "sequence",
                "user": s.user,
                "user_id": s.user_id,
                "items": list(s.items),
            }
            for s in data.sequences
        ),
        {
            "kind": "split",
            "train_only": [s.user for s in data.sequences if not Split.is_evaluable(s)],
        },
        {
            "kind": "groups",
            "phase": data.groups.phase,
            "users": list(data.groups.users),
            "head_tail": list(data.groups.head_tail),
            "length_bucket": list(data.groups.length_bucket),
            "head_items": sorted(data.groups.head_items),
            "length_bounds": list(data.groups.length_bounds),
        },
        {"kind": "stats", **asdict(data.stats)},
    ]
    payload = "".join(
        json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in records
    )
    Path(path).write_text(payload, encoding="utf-8")
    return hashlib.sha256(payload.encode()).hexdigest()


def read_snapshot(path: str | Path) -> tuple[PreparedData, dict[str, t.Any]]:
    """Load a snapshot; returns the prepared data and the embedded header."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    try:
        records = [json.loads(line) for line in lines if line.strip()]
    except json.JSONDecodeError as exc:
        raise DataError(f"Snapshot {path} is not valid line-JSON: {exc}") from exc
    if not records or records[0].get("format") != SNAPSHOT_FORMAT:
        raise DataError(f"{path} is not a {SNAPSHOT_FORMAT} file.")
    header = records[0]
    if header.get("version") != SNAPSHOT_VERSION:
        raise DataError(
            f"Unsupported snapshot version {header.get('version')} in {path}."
        )
    by_kind: dict[str, list[dict[str, t.Any]]] = {}
    for record in records[1:]:
        by_kind.setdefault(record["kind"], []).append(record)
    try:
        raw_catalog = by_kind["catalog"][0]
        raw_groups = by_kind["groups"][0]
        raw_stats = dict(by_kind["stats"][0])
    except (KeyError, IndexError) as exc:
        raise DataError(f"Snapshot {path} is missing a {exc} record.") from exc
    catalog = Catalog(
        item_ids=tuple(raw_catalog["item_ids"]),
        filter_iterations=raw_catalog["filter_iterations"],
    )
    split = Split(
        tuple(
            UserSequence(user=r["user"], items=tuple(r["items"]), user_id=r["user_id"])
            for r in by_kind.get("sequence", [])
        )
    )
    groups = EvalGroups(
        phase=raw_groups["phase"],
        users=tuple(raw_groups["users"]),
        head_tail=tuple(raw_groups["head_tail"]),
        length_bucket=tuple(raw_groups["length_bucket"]),
        head_items=frozenset(raw_groups["head_items"]),
        length_bounds=tuple(raw_groups["length_bounds"]),
    )
    raw_stats.pop("kind")
    data = PreparedData(
        catalog=catalog, split=split, groups=groups, stats=DatasetStats(**raw_stats)
    )
    return data, header
