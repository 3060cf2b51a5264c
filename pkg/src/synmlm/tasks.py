"""Downstream pattern-matching task over synset sequences.

A sequence is positive when, for at least one pattern, some strictly
increasing index triple lands in that pattern's three synset sets in
order. Labels depend only on the synset sequence, never on which feature
rendered each synset, so synonym substitution cannot flip them.

Datasets come in four domains: the letter picks the rendered feature side
(A -> a-side, B -> b-side), the digit picks the generating chain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GenerationError, InvalidArgumentError
from .seeding import rng_for
from .synlang import FeatureCodec, MarkovChainPair, SynsetInventory, walk

DOMAINS = ("A-D1", "B-D1", "A-D2", "B-D2")

CALIBRATION_DRAWS = 200
MAX_ATTEMPTS_PER_EXAMPLE = 10_000


def domain_side(domain: str) -> int:
    return {"A": 0, "B": 1}[domain.split("-")[0]]


def domain_chain(domain: str) -> int:
    return {"D1": 1, "D2": 2}[domain.split("-")[1]]


@dataclass(frozen=True)
class Pattern:
    s1: frozenset[int]
    s2: frozenset[int]
    s3: frozenset[int]

    def __post_init__(self):
        if not (self.s1 and self.s2 and self.s3):
            raise InvalidArgumentError("pattern sets must be nonempty")
        if not (len(self.s1) == len(self.s2) == len(self.s3)):
            raise InvalidArgumentError("pattern sets must have equal sizes")

    def masks(self, n: int) -> np.ndarray:
        """(3, n) boolean membership lookup tables."""
        m = np.zeros((3, n), dtype=bool)
        for row, s in enumerate((self.s1, self.s2, self.s3)):
            m[row, sorted(s)] = True
        return m

    def to_dict(self) -> dict:
        return {"s1": sorted(self.s1), "s2": sorted(self.s2), "s3": sorted(self.s3)}

    @classmethod
    def from_dict(cls, d: dict) -> "Pattern":
        return cls(frozenset(d["s1"]), frozenset(d["s2"]), frozenset(d["s3"]))


@dataclass(frozen=True)
class PatternSet:
    patterns: tuple[Pattern, ...]
    seed: int

    def __post_init__(self):
        if not self.patterns:
            raise InvalidArgumentError("pattern set must be nonempty")

    def mask_stack(self, n: int) -> np.ndarray:
        """(num_patterns, 3, n) membership tables for the vectorized scan."""
        return np.stack([p.masks(n) for p in self.patterns])

    def to_dict(self) -> dict:
        return {"seed": self.seed, "patterns": [p.to_dict() for p in self.patterns]}

    @classmethod
    def from_dict(cls, d: dict) -> "PatternSet":
        return cls(tuple(Pattern.from_dict(p) for p in d["patterns"]), int(d["seed"]))


def build_pattern_set(
    inv: SynsetInventory, num_patterns: int, set_size: int, seed: int
) -> PatternSet:
    """Draw each pattern's three sets uniformly without replacement."""
    if num_patterns < 1:
        raise InvalidArgumentError("need at least one pattern")
    if not (1 <= set_size <= inv.n):
        raise InvalidArgumentError(f"set_size must be in [1, {inv.n}], got {set_size}")
    rng = rng_for(seed, "patterns")
    patterns = tuple(
        Pattern(*(frozenset(int(x) for x in rng.choice(inv.n, size=set_size, replace=False))
                  for _ in range(3)))
        for _ in range(num_patterns)
    )
    return PatternSet(patterns=patterns, seed=seed)


def label(synsets, ps: PatternSet) -> bool:
    """Greedy left-to-right scan per pattern.

    Matching each stage at its earliest opportunity is optimal for
    subsequence existence, so one pass per pattern suffices.
    """
    seq = [int(s) for s in synsets]
    if not seq:
        raise InvalidArgumentError("cannot label an empty sequence")
    for p in ps.patterns:
        stage = 0
        sets = (p.s1, p.s2, p.s3)
        for s in seq:
            if s in sets[stage]:
                stage += 1
                if stage == 3:
                    break
        if stage == 3:
            return True
    return False


def label_batch(synset_matrix: np.ndarray, ps: PatternSet, n: int) -> np.ndarray:
    """Vectorized labels for a (rows, length) synset matrix.

    Same greedy-earliest semantics as label(): first S1 hit, first S2 hit
    after it, then any S3 hit after that.
    """
    s = np.asarray(synset_matrix)
    if s.ndim != 2 or s.shape[1] == 0:
        raise InvalidArgumentError("need a nonempty (rows, length) matrix")
    rows, length = s.shape
    out = np.zeros(rows, dtype=bool)
    pos = np.arange(length)
    for p in ps.patterns:
        m = p.masks(n)
        h1 = m[0][s]  # (rows, length) stage-membership masks
        h2 = m[1][s]
        h3 = m[2][s]
        i = np.argmax(h1, axis=1)
        ok = h1.any(axis=1)
        h2 = h2 & (pos[None, :] > i[:, None])
        j = np.argmax(h2, axis=1)
        ok &= h2.any(axis=1)
        h3 = h3 & (pos[None, :] > j[:, None])
        out |= ok & h3.any(axis=1)
        if out.all():
            break
    return out


@dataclass(frozen=True)
class TaskDatasetSpec:
    domain: str
    size: int
    length: int = 100
    seed: int = 0
    balance: str = "balanced"  # "balanced" | "natural"

    def validate(self) -> None:
        if self.domain not in DOMAINS:
            raise InvalidArgumentError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.size < 0:
            raise InvalidArgumentError("size must be >= 0")
        if self.length < 1:
            raise InvalidArgumentError("length must be >= 1")
        if self.balance not in ("balanced", "natural"):
            raise InvalidArgumentError(f"unknown balance policy {self.balance!r}")

    def to_dict(self) -> dict:
        return {
            "domain": self.domain,
            "size": self.size,
            "length": self.length,
            "seed": self.seed,
            "balance": self.balance,
        }


@dataclass(frozen=True)
class LabeledExample:
    token_ids: np.ndarray  # int32
    y: bool
    synsets: np.ndarray  # int16
    domain: str


@dataclass
class TaskDataset:
    meta: dict
    examples: list[LabeledExample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    def labels(self) -> np.ndarray:
        return np.array([e.y for e in self.examples], dtype=bool)

    def positive_rate(self) -> float:
        return float(self.labels().mean()) if self.examples else float("nan")


def natural_positive_rate(
    spec: TaskDatasetSpec, ps: PatternSet, chains: MarkovChainPair, draws: int = CALIBRATION_DRAWS
) -> float:
    """Positive fraction of unconstrained draws, from a dedicated stream."""
    rng = rng_for(spec.seed, "task", "calibration")
    targets = chains.targets(domain_chain(spec.domain))
    hits = sum(label(walk(targets, spec.length, rng), ps) for _ in range(draws))
    return hits / draws


def generate_task_dataset(
    spec: TaskDatasetSpec,
    ps: PatternSet,
    chains: MarkovChainPair,
    codec: FeatureCodec,
    inv: SynsetInventory,
) -> TaskDataset:
    """Materialize one domain's labeled dataset.

    Balanced mode alternates target labels across example indices and
    rejection-samples each example from its own stream until the walk's
    label matches, giving an exact 50/50 split (odd sizes carry one extra
    negative). A calibration pre-pass aborts early when the natural rate
    is too extreme for rejection to be practical.
    """
    spec.validate()
    side = domain_side(spec.domain)
    targets = chains.targets(domain_chain(spec.domain))

    if spec.balance == "balanced" and spec.size > 0:
        rate = natural_positive_rate(spec, ps, chains)
        if not 0.01 <= rate <= 0.99:
            raise GenerationError(
                f"natural positive rate {rate:.4f} for {spec.domain} is outside "
                f"[0.01, 0.99]; balanced sampling would stall"
            )

    examples: list[LabeledExample] = []
    sides = np.full(spec.length, side, dtype=np.uint8)
    for i in range(spec.size):
        rng = rng_for(spec.seed, "task", i, "walk")
        if spec.balance == "natural":
            synsets = walk(targets, spec.length, rng)
            y = label(synsets, ps)
        else:
            want = i % 2 == 1
            for _ in range(MAX_ATTEMPTS_PER_EXAMPLE):
                synsets = walk(targets, spec.length, rng)
                y = label(synsets, ps)
                if y == want:
                    break
            else:
                raise GenerationError(
                    f"no label={want} draw in {MAX_ATTEMPTS_PER_EXAMPLE} attempts "
                    f"(example {i}, domain {spec.domain})"
                )
        examples.append(
            LabeledExample(
                token_ids=codec.render(inv, synsets, sides),
                y=bool(y),
                synsets=synsets,
                domain=spec.domain,
            )
        )
    return TaskDataset(meta=spec.to_dict(), examples=examples)


def make_mixture(
    parts: list[tuple[TaskDataset, float]], total: int, seed: int
) -> TaskDataset:
    """Deterministically shuffled blend with exact largest-remainder counts."""
    if not parts:
        raise InvalidArgumentError("mixture needs at least one part")
    props = np.array([p for _, p in parts], dtype=np.float64)
    if abs(props.sum() - 1.0) > 1e-9:
        raise InvalidArgumentError(f"proportions sum to {props.sum()}, expected 1")
    if (props < 0).any():
        raise InvalidArgumentError("proportions must be nonnegative")

    exact = props * total
    sizes = np.floor(exact).astype(int)
    remainder = total - sizes.sum()
    order = np.argsort(-(exact - sizes), kind="stable")  # ties go to earlier parts
    sizes[order[:remainder]] += 1

    picked: list[LabeledExample] = []
    for (ds, _), k in zip(parts, sizes):
        if k > len(ds):
            raise InvalidArgumentError(
                f"part {ds.meta.get('domain', '?')} has {len(ds)} examples, need {k}"
            )
        picked.extend(ds.examples[:k])

    perm = rng_for(seed, "mixture").permutation(len(picked))
    meta = {
        "mixture": [
            {"domain": ds.meta.get("domain", "mixture"), "proportion": float(p), "size": int(k)}
            for (ds, p), k in zip(parts, sizes)
        ],
        "total": total,
        "seed": seed,
    }
    return TaskDataset(meta=meta, examples=[picked[i] for i in perm])


DATASET_FORMAT = "synmlm-dataset"
DATASET_VERSION = 1


def write_dataset(ds: TaskDataset, path: str | Path) -> None:
    with open(path, "w") as f:
        f.write(json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION,
                            "meta": ds.meta}) + "\n")
        for e in ds.examples:
            f.write(json.dumps({"t": e.token_ids.tolist(), "y": int(e.y),
                                "s": e.synsets.tolist(), "d": e.domain}) + "\n")


def read_dataset(path: str | Path) -> TaskDataset:
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("format") != DATASET_FORMAT:
            raise InvalidArgumentError(f"{path} is not a dataset file")
        examples = [
            LabeledExample(
                token_ids=np.asarray(d["t"], dtype=np.int32),
                y=bool(d["y"]),
                synsets=np.asarray(d["s"], dtype=np.int16),
                domain=d["d"],
            )
            for d in map(json.loads, f)
        ]
    return TaskDataset(meta=header["meta"], examples=examples)
