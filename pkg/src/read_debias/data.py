"""Synthetic pair-classification tasks with planted shortcuts, plus JSONL I/O.

Every example is a pair ``(tokens_a, tokens_b)`` packed as
``[CLS] a [SEP] b [SEP]``. ``tokens_a`` carries exactly one relation token
``r`` and one entity token ``e``; the gold label only depends on whether
``tokens_b`` contains the adjacent ordered pair ``(r, e)``. The shortcut is
planted on top of that rule:

* ``overlap``: the lexical overlap ratio ``|set(a) & set(b)| / |set(b)|`` is
  pushed above ``tau_hi`` or below ``tau_lo`` and agrees with the label
  (high overlap <=> ENTAIL) on a ``bias_strength`` fraction of examples.
* ``claim_only``: a cue token inside ``tokens_b`` names a class and agrees
  with the gold label on a ``bias_strength`` fraction of examples.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError, DomainError, ParseError, SpecError

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
NUM_SPECIAL = 3

ENTAIL = 0
NON_ENTAIL = 1
NEUTRAL = 1
CONTRADICT = 2

LABEL_NAMES = {
    2: ("entailment", "non_entailment"),
    3: ("entailment", "neutral", "contradiction"),
}


class TaskKind(str, Enum):
    OVERLAP = "overlap"
    CLAIM_ONLY = "claim_only"


class GroupTag(str, Enum):
    OVERLAPPING = "overlapping"
    NON_OVERLAPPING = "non_overlapping"
    SPECIAL = "special"


# order in which the flat config / JSONL fields are written
RECORD_FIELDS = ("tokens_a", "tokens_b", "label", "group_tags", "shortcut_aligned")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task_kind: TaskKind = TaskKind.OVERLAP
    vocab_size: int = 200
    min_len: int = 8
    max_len: int = 16
    bias_strength: float = 0.9
    num_examples: int = 20_000
    num_classes: int = 2
    seed: int = 0
    tau_hi: float = 0.8
    tau_lo: float = 0.3
    num_relations: int = 8
    num_entities: int = 16
    num_fillers: int | None = None  # None: every id after the reserved block
    swap_negatives: bool = False  # two-class only; three-class always uses swaps for CONTRADICT

    def __post_init__(self) -> None:
        object.__setattr__(self, "task_kind", TaskKind(self.task_kind))
        if not 0.0 <= self.bias_strength <= 1.0:
            raise SpecError(f"bias_strength must lie in [0, 1], got {self.bias_strength}")
        if self.num_classes not in LABEL_NAMES:
            raise SpecError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if self.num_relations < 2 or self.num_entities < 2:
            raise SpecError("need at least two relation and two entity tokens")
        if self.vocab_size <= self.first_filler + 2 * self.max_len + 4:
            raise SpecError(
                f"vocab_size {self.vocab_size} leaves too few filler tokens "
                f"after {self.first_filler} reserved ids"
            )
        if self.num_fillers is not None and not (
            2 * self.max_len <= self.num_fillers <= self.vocab_size - self.first_filler
        ):
            raise SpecError(
                f"num_fillers must lie in [{2 * self.max_len}, {self.vocab_size - self.first_filler}], "
                f"got {self.num_fillers}"
            )
        if self.min_len < 3 or self.max_len < self.min_len:
            raise SpecError(f"invalid length range [{self.min_len}, {self.max_len}]")
        if not 0.0 <= self.tau_lo < self.tau_hi <= 1.0:
            raise SpecError(f"need 0 <= tau_lo < tau_hi <= 1, got {self.tau_lo}, {self.tau_hi}")
        if self.num_examples < 0:
            raise SpecError("num_examples must be non-negative")

    # vocabulary layout: specials | relations | entities | cues | fillers
    @property
    def relations(self) -> range:
        return range(NUM_SPECIAL, NUM_SPECIAL + self.num_relations)

    @property
    def entities(self) -> range:
        start = self.relations.stop
        return range(start, start + self.num_entities)

    @property
    def cues(self) -> range:
        start = self.entities.stop
        return range(start, start + 3)

    @property
    def first_filler(self) -> int:
        return self.cues.stop

    @property
    def fillers(self) -> range:
        stop = self.vocab_size if self.num_fillers is None else self.first_filler + self.num_fillers
        return range(self.first_filler, stop)

    @property
    def seq_len_limit(self) -> int:
        return 2 * self.max_len + 3

    def with_updates(self, **changes) -> "SyntheticTaskSpec":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return SyntheticTaskSpec(**values)


@dataclass
class Example:
    tokens_a: list[int]
    tokens_b: list[int]
    label: int
    group_tags: list[GroupTag] = field(default_factory=list)
    shortcut_aligned: bool = False

    def __post_init__(self) -> None:
        if not self.group_tags:
            self.group_tags = compute_group_tags(self.tokens_a, self.tokens_b)
        else:
            self.group_tags = [GroupTag(t) for t in self.group_tags]

    @property
    def packed(self) -> list[int]:
        return [CLS_ID, *self.tokens_a, SEP_ID, *self.tokens_b, SEP_ID]

    def to_record(self) -> dict:
        return {
            "tokens_a": list(map(int, self.tokens_a)),
            "tokens_b": list(map(int, self.tokens_b)),
            "label": int(self.label),
            "group_tags": [t.value for t in self.group_tags],
            "shortcut_aligned": bool(self.shortcut_aligned),
        }


@dataclass
class Dataset:
    examples: list[Example]
    name: str = "dataset"

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Dataset(self.examples[idx], self.name)
        return self.examples[idx]

    @property
    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.examples[i] for i in indices], self.name)


def compute_group_tags(tokens_a: Sequence[int], tokens_b: Sequence[int]) -> list[GroupTag]:
    set_a, set_b = set(tokens_a), set(tokens_b)
    tags = [GroupTag.SPECIAL]
    tags += [GroupTag.OVERLAPPING if t in set_b else GroupTag.NON_OVERLAPPING for t in tokens_a]
    tags.append(GroupTag.SPECIAL)
    tags += [GroupTag.OVERLAPPING if t in set_a else GroupTag.NON_OVERLAPPING for t in tokens_b]
    tags.append(GroupTag.SPECIAL)
    return tags


def overlap_ratio(tokens_a: Sequence[int], tokens_b: Sequence[int]) -> float:
    set_b = set(tokens_b)
    if not set_b:
        raise DomainError("overlap ratio is undefined for an empty tokens_b")
    return len(set(tokens_a) & set_b) / len(set_b)


def bias_feature(example: Example, spec: SyntheticTaskSpec | None = None) -> float:
    """Value of the planted shortcut feature for one example.

    For the overlap task (or when ``spec`` is omitted) this is the lexical
    overlap ratio of ``tokens_b`` against ``tokens_a``. For the claim-only
    task it is 1.0 when the ENTAIL cue token is present in ``tokens_b``.
    """
    if not example.tokens_b:
        raise DomainError("bias_feature is undefined for an empty tokens_b")
    if spec is not None and spec.task_kind is TaskKind.CLAIM_ONLY:
        return 1.0 if spec.cues[ENTAIL] in example.tokens_b else 0.0
    return overlap_ratio(example.tokens_a, example.tokens_b)


def _key_tokens(tokens_a: Sequence[int], spec: SyntheticTaskSpec) -> tuple[int, int]:
    rel = [t for t in tokens_a if t in spec.relations]
    ent = [t for t in tokens_a if t in spec.entities]
    if len(rel) != 1 or len(ent) != 1:
        raise DataError("tokens_a must hold exactly one relation and one entity token")
    return rel[0], ent[0]


def _has_adjacent(tokens: Sequence[int], first: int, second: int) -> bool:
    return any(x == first and y == second for x, y in zip(tokens, tokens[1:]))


def oracle_label(example: Example, spec: SyntheticTaskSpec) -> int:
    """Recompute the gold label from the content rule alone."""
    r, e = _key_tokens(example.tokens_a, spec)
    if _has_adjacent(example.tokens_b, r, e):
        return ENTAIL
    if spec.num_classes == 3 and _has_adjacent(example.tokens_b, e, r):
        return CONTRADICT
    return NON_ENTAIL


def is_shortcut_aligned(example: Example, spec: SyntheticTaskSpec) -> bool:
    """Whether the shortcut feature points at the gold label."""
    feat = bias_feature(example, spec)
    if spec.task_kind is TaskKind.CLAIM_ONLY:
        return spec.cues[example.label] in example.tokens_b
    says_entail = feat >= spec.tau_hi
    if not says_entail and feat > spec.tau_lo:
        raise DataError(f"overlap ratio {feat:.3f} falls between tau_lo and tau_hi")
    return says_entail == (example.label == ENTAIL)


# ---------------------------------------------------------------------------
# generation


def _pair_kind(label: int, spec: SyntheticTaskSpec, rng: np.random.Generator) -> str:
    if label == ENTAIL:
        return "entail"
    if spec.num_classes == 3:
        return "swap" if label == CONTRADICT else ("ent_sub", "rel_sub")[rng.integers(2)]
    kinds = ("swap", "ent_sub", "rel_sub") if spec.swap_negatives else ("ent_sub", "rel_sub")
    return kinds[rng.integers(len(kinds))]


def pair_kinds(spec: SyntheticTaskSpec) -> tuple[str, ...]:
    if spec.num_classes == 3 or spec.swap_negatives:
        return ("entail", "swap", "ent_sub", "rel_sub")
    return ("entail", "ent_sub", "rel_sub")


def _key_overlap(kind: str) -> tuple[int, int]:
    """(overlapping, non-overlapping) distinct key tokens contributed to set(b)."""
    return (2, 0) if kind in ("entail", "swap") else (1, 1)


def _overlap_for(n_novel: int, n_fill: int, n_a_fill: int, kind: str) -> float:
    k_ov, k_non = _key_overlap(kind)
    copied = min(n_fill - n_novel, n_a_fill)
    return (k_ov + copied) / (k_ov + k_non + copied + n_novel)


def _novel_choices(spec: SyntheticTaskSpec, n_fill: int, n_a_fill: int, kind: str, high: bool) -> list[int]:
    out = []
    for n_novel in range(n_fill + 1):
        ratio = _overlap_for(n_novel, n_fill, n_a_fill, kind)
        if (high and ratio >= spec.tau_hi) or (not high and ratio <= spec.tau_lo):
            out.append(n_novel)
    return out


def check_feasible(spec: SyntheticTaskSpec) -> None:
    """Raise SpecError when some length/pair combination cannot hit a threshold."""
    if spec.task_kind is not TaskKind.OVERLAP:
        return
    for n_a in range(spec.min_len, spec.max_len + 1):
        for n_b in range(spec.min_len, spec.max_len + 1):
            for kind in pair_kinds(spec):
                for high in (True, False):
                    if not _novel_choices(spec, n_b - 2, n_a - 2, kind, high):
                        which = "tau_hi" if high else "tau_lo"
                        raise SpecError(
                            f"{which} unreachable for len(a)={n_a}, len(b)={n_b}, pair={kind}"
                        )


def _exact_flags(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    flags = np.zeros(n, dtype=bool)
    flags[: int(round(fraction * n))] = True
    return rng.permutation(flags)


def _balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % num_classes)


def _make_example(spec: SyntheticTaskSpec, label: int, aligned: bool, rng: np.random.Generator) -> Example:
    n_a = int(rng.integers(spec.min_len, spec.max_len + 1))
    n_b = int(rng.integers(spec.min_len, spec.max_len + 1))
    fillers = np.asarray(spec.fillers)
    relations = np.asarray(spec.relations)
    entities = np.asarray(spec.entities)

    r = int(rng.choice(relations))
    e = int(rng.choice(entities))
    a_fill = rng.choice(fillers, size=n_a - 2, replace=False)
    pos_r, pos_e = rng.choice(n_a, size=2, replace=False)
    rest = iter(map(int, a_fill))
    a = [r if i == pos_r else e if i == pos_e else next(rest) for i in range(n_a)]

    kind = _pair_kind(label, spec, rng)
    if kind == "entail":
        pair = [r, e]
    elif kind == "swap":
        pair = [e, r]
    elif kind == "ent_sub":
        pair = [r, int(rng.choice(entities[entities != e]))]
    else:
        pair = [int(rng.choice(relations[relations != r])), e]

    n_fill = n_b - 2
    cue = None
    if spec.task_kind is TaskKind.CLAIM_ONLY:
        n_fill -= 1
        if aligned:
            cue = spec.cues[label]
        else:
            others = [c for c in range(spec.num_classes) if c != label]
            cue = spec.cues[int(rng.choice(others))]
        n_novel = int(rng.integers(0, n_fill + 1))
    else:
        high = (label == ENTAIL) == aligned
        choices = _novel_choices(spec, n_fill, n_a - 2, kind, high)
        if not choices:
            raise SpecError(f"overlap threshold unreachable for len(a)={n_a}, len(b)={n_b}")
        # pick the feasible overlap nearest to a kind-independent target so the
        # ratio distribution does not leak the pair kind
        target = rng.uniform(spec.tau_hi, 1.0) if high else rng.uniform(0.5 * spec.tau_lo, spec.tau_lo)
        ratios = np.array([_overlap_for(c, n_fill, n_a - 2, kind) for c in choices])
        n_novel = choices[int(np.argmin(np.abs(ratios - target)))]

    pool = np.setdiff1d(fillers, a_fill)
    novel = rng.choice(pool, size=n_novel, replace=False)
    n_copy = n_fill - n_novel
    distinct = rng.choice(a_fill, size=min(n_copy, a_fill.size), replace=False)
    extra = rng.choice(a_fill, size=n_copy - distinct.size, replace=True)
    b_fill = list(map(int, np.concatenate([novel, distinct, extra])))
    if cue is not None:
        b_fill.append(cue)
    b_fill = [b_fill[i] for i in rng.permutation(len(b_fill))]
    at = int(rng.integers(0, len(b_fill) + 1))
    b = b_fill[:at] + pair + b_fill[at:]

    return Example(tokens_a=a, tokens_b=b, label=int(label), shortcut_aligned=bool(aligned))


def generate(spec: SyntheticTaskSpec) -> Dataset:
    """Generate a dataset; a pure function of ``spec``.

    Labels are exactly balanced and exactly ``round(bias_strength * N)``
    examples have the shortcut agreeing with the gold label, so
    ``bias_strength=0.5`` gives a decorrelated split and ``0.0`` an
    anti-correlated (adversarial) one.
    """
    check_feasible(spec)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    n = spec.num_examples
    labels = _balanced_labels(n, spec.num_classes, rng)
    aligned = _exact_flags(n, spec.bias_strength, rng)
    examples = [_make_example(spec, int(y), bool(f), rng) for y, f in zip(labels, aligned)]
    return Dataset(examples, name=f"{spec.task_kind.value}-b{spec.bias_strength:g}-s{spec.seed}")


SPLITS = ("train", "dev", "ood_decorrelated", "ood_adversarial")


@dataclass(frozen=True)
class SplitSizes:
    train: int = 20_000
    dev: int = 2_000
    ood_decorrelated: int = 2_000
    ood_adversarial: int = 2_000


def generate_splits(spec: SyntheticTaskSpec, sizes: SplitSizes = SplitSizes()) -> dict[str, Dataset]:
    """Train/dev at ``spec.bias_strength``, OOD splits at 0.5 and 0.0.

    Each split draws from its own child stream of ``spec.seed``.
    """
    strengths = {
        "train": spec.bias_strength,
        "dev": spec.bias_strength,
        "ood_decorrelated": 0.5,
        "ood_adversarial": 0.0,
    }
    children = np.random.SeedSequence(spec.seed).spawn(len(SPLITS))
    out = {}
    for name, child in zip(SPLITS, children):
        split_seed = int(child.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
        sub = spec.with_updates(
            bias_strength=strengths[name],
            num_examples=getattr(sizes, name),
            seed=split_seed,
        )
        ds = generate(sub)
        ds.name = name
        out[name] = ds
    return out


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    token_ids: np.ndarray  # [B, n] int64
    type_ids: np.ndarray  # [B, n] int64
    mask: np.ndarray  # [B, n] bool, True on real tokens
    labels: np.ndarray  # [B] int64

    def __len__(self) -> int:
        return self.token_ids.shape[0]


def encode_batch(examples: Sequence[Example], vocab_size: int | None = None, max_seq_len: int | None = None) -> Batch:
    """Pack examples as ``[CLS] a [SEP] b [SEP]`` and right-pad to the batch max."""
    if not examples:
        raise DataError("cannot encode an empty batch")
    packed = [ex.packed for ex in examples]
    n = max(len(p) for p in packed)
    if max_seq_len is not None and n > max_seq_len:
        raise DataError(f"sequence length {n} exceeds max_seq_len {max_seq_len}")
    ids = np.full((len(packed), n), PAD_ID, dtype=np.int64)
    types = np.zeros((len(packed), n), dtype=np.int64)
    mask = np.zeros((len(packed), n), dtype=bool)
    for i, (ex, p) in enumerate(zip(examples, packed)):
        ids[i, : len(p)] = p
        types[i, len(ex.tokens_a) + 2 : len(p)] = 1
        mask[i, : len(p)] = True
    if ids.min() < 0 or (vocab_size is not None and ids.max() >= vocab_size):
        raise DataError(f"token ids must lie in [0, {vocab_size}), got range [{ids.min()}, {ids.max()}]")
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return Batch(ids, types, mask, labels)


# ---------------------------------------------------------------------------
# JSONL


def write_jsonl(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for ex in dataset:
            fh.write(json.dumps(ex.to_record(), separators=(",", ":")))
            fh.write("\n")


def _int_list(value, name: str, line: int) -> list[int]:
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ParseError(f"field '{name}' must be a list of integers", line)
    return value


def parse_record(record: dict, line: int | None = None) -> Example:
    if not isinstance(record, dict):
        raise ParseError("record must be a JSON object", line)
    for name in ("tokens_a", "tokens_b", "label"):
        if name not in record:
            raise ParseError(f"missing field '{name}'", line)
    a = _int_list(record["tokens_a"], "tokens_a", line)
    b = _int_list(record["tokens_b"], "tokens_b", line)
    label = record["label"]
    if not isinstance(label, int) or isinstance(label, bool) or label < 0:
        raise ParseError("field 'label' must be a non-negative integer", line)
    tags = record.get("group_tags") or []
    try:
        tags = [GroupTag(t) for t in tags]
    except ValueError as exc:
        raise ParseError(f"bad group tag: {exc}", line) from None
    if tags and len(tags) != len(a) + len(b) + 3:
        raise ParseError("field 'group_tags' does not match the packed length", line)
    return Example(a, b, label, tags, bool(record.get("shortcut_aligned", False)))


def read_jsonl(path: str | Path, name: str | None = None) -> Dataset:
    path = Path(path)
    examples = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            examples.append(parse_record(record, lineno))
    return Dataset(examples, name or path.stem)


def spec_to_dict(spec: SyntheticTaskSpec) -> dict:
    out = asdict(spec)
    out["task_kind"] = spec.task_kind.value
    return out
