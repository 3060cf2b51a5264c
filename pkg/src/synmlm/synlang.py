"""Pseudo-language corpus generation.

A world is a set of synsets (each holding an equivalent feature pair), a
token codec for rendering features, and a pair of first-order Markov
chains over synsets. Corpora sampled from the chains either satisfy the
distributional property (the two features of a synset are interchangeable
in context) or violate it (the feature side is tied to the generating
chain), controlled by a single switch on the corpus spec.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, NotFoundError
from .seeding import rng_for
from .stats import tv_distance_mapping

PAD_ID = 0
MASK_ID = 1
CLS_ID = 2
NUM_SPECIALS = 3

SIDE_A = 0
SIDE_B = 1


@dataclass(frozen=True)
class SynsetInventory:
    """The synsets and their two disjoint, isomorphic feature-id sets."""

    n: int
    synsets: tuple[tuple[int, int], ...]  # (a_feature, b_feature) per synset
    phi_a: frozenset[int]
    phi_b: frozenset[int]

    def feature_of(self, synset: int, side: int) -> int:
        return self.synsets[synset][side]

    def side_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(a_features, b_features) indexed by synset id."""
        a = np.array([s[0] for s in self.synsets], dtype=np.int64)
        b = np.array([s[1] for s in self.synsets], dtype=np.int64)
        return a, b

    def to_dict(self) -> dict:
        return {"n": self.n, "synsets": [list(s) for s in self.synsets]}

    @classmethod
    def from_dict(cls, d: dict) -> "SynsetInventory":
        synsets = tuple((int(a), int(b)) for a, b in d["synsets"])
        return cls(
            n=int(d["n"]),
            synsets=synsets,
            phi_a=frozenset(s[0] for s in synsets),
            phi_b=frozenset(s[1] for s in synsets),
        )


def build_inventory(n: int, seed: int) -> SynsetInventory:
    """Create n synsets over a randomly permuted feature-id space 0..2n-1."""
    if n < 2:
        raise InvalidArgumentError(f"need at least 2 synsets, got {n}")
    perm = rng_for(seed, "inventory").permutation(2 * n)
    synsets = tuple((int(perm[2 * i]), int(perm[2 * i + 1])) for i in range(n))
    return SynsetInventory(
        n=n,
        synsets=synsets,
        phi_a=frozenset(s[0] for s in synsets),
        phi_b=frozenset(s[1] for s in synsets),
    )


@dataclass(frozen=True)
class FeatureCodec:
    """Maps feature ids to token-id sequences.

    Token ids below NUM_SPECIALS are reserved (PAD/MASK/CLS) and never
    appear in the map. vocab_alpha/vocab_beta are (start, stop) ranges; in
    shared mode both name the same pooled range.
    """

    mode: str  # "single" | "multi"
    vocab_sharing: str  # "separate" | "shared"
    token_map: tuple[tuple[int, ...], ...]  # indexed by feature id
    vocab_alpha: tuple[int, int]
    vocab_beta: tuple[int, int]

    @property
    def vocab_size(self) -> int:
        return max(self.vocab_alpha[1], self.vocab_beta[1])

    def encode_feature(self, feature: int) -> tuple[int, ...]:
        return self.token_map[feature]

    def render(self, inv: SynsetInventory, synsets, sides) -> np.ndarray:
        """Token ids for a synset sequence with per-position side choices."""
        out: list[int] = []
        for s, c in zip(synsets, sides):
            out.extend(self.token_map[inv.feature_of(int(s), int(c))])
        return np.asarray(out, dtype=np.int32)

    def spans(self, inv: SynsetInventory, synsets, sides) -> list[tuple[int, int]]:
        """Token (start, stop) span of each position in a rendered sequence."""
        spans, pos = [], 0
        for s, c in zip(synsets, sides):
            w = len(self.token_map[inv.feature_of(int(s), int(c))])
            spans.append((pos, pos + w))
            pos += w
        return spans

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "vocab_sharing": self.vocab_sharing,
            "token_map": [list(t) for t in self.token_map],
            "vocab_alpha": list(self.vocab_alpha),
            "vocab_beta": list(self.vocab_beta),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureCodec":
        return cls(
            mode=d["mode"],
            vocab_sharing=d["vocab_sharing"],
            token_map=tuple(tuple(int(t) for t in seq) for seq in d["token_map"]),
            vocab_alpha=tuple(d["vocab_alpha"]),
            vocab_beta=tuple(d["vocab_beta"]),
        )


def build_codec(
    inv: SynsetInventory,
    mode: str,
    vocab_sharing: str,
    seed: int,
    tokens_per_side: int | None = None,
) -> FeatureCodec:
    """Draw an injective feature -> token-string map.

    Single-token mode is a bijection onto per-side vocabularies and
    therefore cannot share them. Multi-token mode draws a length in {1,2,3}
    and that many uniform tokens, redrawing any string already taken.
    """
    if mode not in ("single", "multi"):
        raise InvalidArgumentError(f"unknown codec mode {mode!r}")
    if vocab_sharing not in ("separate", "shared"):
        raise InvalidArgumentError(f"unknown vocab_sharing {vocab_sharing!r}")
    if mode == "single" and vocab_sharing == "shared":
        raise InvalidArgumentError("single-token features need separate vocabularies")

    n = inv.n
    per_side = tokens_per_side if tokens_per_side is not None else n
    if mode == "single" and per_side < n:
        raise InvalidArgumentError(f"single-token mode needs >= {n} tokens per side")

    alpha = (NUM_SPECIALS, NUM_SPECIALS + per_side)
    beta = (NUM_SPECIALS + per_side, NUM_SPECIALS + 2 * per_side)
    rng = rng_for(seed, "codec")
    token_map: list[tuple[int, ...] | None] = [None] * (2 * n)

    if mode == "single":
        perm_a = rng.permutation(np.arange(*alpha))
        perm_b = rng.permutation(np.arange(*beta))
        for i, (fa, fb) in enumerate(inv.synsets):
            token_map[fa] = (int(perm_a[i]),)
            token_map[fb] = (int(perm_b[i]),)
    else:
        pooled = (NUM_SPECIALS, NUM_SPECIALS + 2 * per_side)
        taken: set[tuple[int, ...]] = set()

        def draw(lo: int, hi: int) -> tuple[int, ...]:
            while True:
                length = int(rng.integers(1, 4))
                s = tuple(int(t) for t in rng.integers(lo, hi, size=length))
                if s not in taken:
                    taken.add(s)
                    return s

        for fa, fb in inv.synsets:
            if vocab_sharing == "separate":
                token_map[fa] = draw(*alpha)
                token_map[fb] = draw(*beta)
            else:
                token_map[fa] = draw(*pooled)
                token_map[fb] = draw(*pooled)
        if vocab_sharing == "shared":
            alpha = beta = pooled

    return FeatureCodec(
        mode=mode,
        vocab_sharing=vocab_sharing,
        token_map=tuple(token_map),  # type: ignore[arg-type]
        vocab_alpha=alpha,
        vocab_beta=beta,
    )


@dataclass(frozen=True)
class MarkovChainPair:
    """Two sentence-generating chains over synset states.

    Each row holds exactly two outward edges of probability 0.5; the start
    distribution is uniform. targets arrays have shape (n, 2) with the two
    (distinct) successor states per row.
    """

    n: int
    targets1: np.ndarray
    targets2: np.ndarray

    def targets(self, k: int) -> np.ndarray:
        if k == 1:
            return self.targets1
        if k == 2:
            return self.targets2
        raise InvalidArgumentError(f"chain id must be 1 or 2, got {k}")

    def transition_matrix(self, k: int) -> np.ndarray:
        t = self.targets(k)
        m = np.zeros((self.n, self.n), dtype=np.float64)
        rows = np.repeat(np.arange(self.n), 2)
        np.add.at(m, (rows, t.reshape(-1)), 0.5)
        return m

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "targets1": self.targets1.tolist(),
            "targets2": self.targets2.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarkovChainPair":
        return cls(
            n=int(d["n"]),
            targets1=np.asarray(d["targets1"], dtype=np.int64),
            targets2=np.asarray(d["targets2"], dtype=np.int64),
        )


def _strongly_connected(targets: np.ndarray) -> bool:
    """Reachability from node 0 in the graph and its reverse."""
    n = targets.shape[0]
    fwd = [set(row) for row in targets.tolist()]
    rev: list[set[int]] = [set() for _ in range(n)]
    for u, row in enumerate(targets.tolist()):
        for v in row:
            rev[v].add(u)
    for adj in (fwd, rev):
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        if len(seen) != n:
            return False
    return True


def build_chain_pair(n: int, seed: int) -> MarkovChainPair:
    """Sample two random strongly connected 2-out chains.

    Rejection sampling on i.i.d. 2-out graphs is hopeless here (the chance
    of zero in-degree-0 states alone decays like exp(-n/e^2)), so each
    chain is built as a uniformly random Hamiltonian cycle plus one extra
    uniformly random distinct edge per state. The cycle guarantees strong
    connectivity and every row keeps exactly two outward edges.
    """
    if n < 2:
        raise InvalidArgumentError(f"need at least 2 states, got {n}")
    rng = rng_for(seed, "chains")

    def draw_chain() -> np.ndarray:
        order = rng.permutation(n)
        cycle = np.empty(n, dtype=np.int64)
        cycle[order] = order[(np.arange(n) + 1) % n]
        r = rng.integers(0, n - 1, size=n)
        extra = r + (r >= cycle)  # uniform over states other than the cycle target
        t = np.stack([cycle, extra], axis=1)
        t.sort(axis=1)
        assert _strongly_connected(t)
        return t

    return MarkovChainPair(n=n, targets1=draw_chain(), targets2=draw_chain())


@dataclass(frozen=True)
class CorpusSpec:
    num_sequences: int
    length: int  # sequence length in synsets
    dh: str  # "with" | "without"
    seed: int

    def validate(self) -> None:
        if self.num_sequences < 0:
            raise InvalidArgumentError("num_sequences must be >= 0")
        if self.length < 1:
            raise InvalidArgumentError("sequence length must be >= 1")
        if self.dh not in ("with", "without"):
            raise InvalidArgumentError(f"dh must be 'with' or 'without', got {self.dh!r}")

    def to_dict(self) -> dict:
        return {
            "num_sequences": self.num_sequences,
            "length": self.length,
            "dh": self.dh,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class SequenceRecord:
    token_ids: np.ndarray  # int32
    k: int  # generating chain, 1 or 2
    synsets: np.ndarray  # int16
    sides: np.ndarray  # uint8, SIDE_A / SIDE_B


@dataclass
class Corpus:
    spec: CorpusSpec
    records: list[SequenceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def token_matrix(self) -> np.ndarray:
        """Stacked token ids; valid only for uniform rendered lengths."""
        return np.stack([r.token_ids for r in self.records])


def walk(targets: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """A `length`-state path: uniform start, then one of the two edges per step."""
    n = targets.shape[0]
    synsets = np.empty(length, dtype=np.int16)
    cur = int(rng.integers(n))
    synsets[0] = cur
    if length > 1:
        bits = rng.integers(0, 2, size=length - 1)
        for t in range(1, length):
            cur = int(targets[cur, bits[t - 1]])
            synsets[t] = cur
    return synsets


def sample_sequence(
    spec: CorpusSpec,
    inv: SynsetInventory,
    codec: FeatureCodec,
    chains: MarkovChainPair,
    index: int,
) -> SequenceRecord:
    """Sample record `index` of the corpus from its own RNG streams.

    The chain walk and the side choices use independent streams, so the
    with/without variants of one corpus seed share identical synset
    sequences and differ only in side choices.
    """
    k = int(rng_for(spec.seed, "seq", index, "k").integers(1, 3))
    l = spec.length
    synsets = walk(chains.targets(k), l, rng_for(spec.seed, "seq", index, "walk"))

    if spec.dh == "with":
        sides = rng_for(spec.seed, "seq", index, "side").integers(0, 2, size=l).astype(np.uint8)
    else:
        sides = np.full(l, SIDE_A if k == 1 else SIDE_B, dtype=np.uint8)

    token_ids = codec.render(inv, synsets, sides)
    return SequenceRecord(token_ids=token_ids, k=k, synsets=synsets, sides=sides)


def generate_corpus(
    spec: CorpusSpec,
    inv: SynsetInventory,
    codec: FeatureCodec,
    chains: MarkovChainPair,
) -> Corpus:
    """Materialize the full corpus; per-sequence streams keep this order-free."""
    spec.validate()
    records = [sample_sequence(spec, inv, codec, chains, i) for i in range(spec.num_sequences)]
    return Corpus(spec=spec, records=records)


CORPUS_FORMAT = "synmlm-corpus"
CORPUS_VERSION = 1


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w") as f:
        header = {
            "format": CORPUS_FORMAT,
            "version": CORPUS_VERSION,
            "spec": corpus.spec.to_dict(),
        }
        f.write(json.dumps(header) + "\n")
        for r in corpus.records:
            row = {
                "t": r.token_ids.tolist(),
                "k": r.k,
                "s": r.synsets.tolist(),
                "c": r.sides.tolist(),
            }
            f.write(json.dumps(row) + "\n")


def read_corpus(path: str | Path) -> Corpus:
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("format") != CORPUS_FORMAT:
            raise InvalidArgumentError(f"{path} is not a corpus file")
        spec = CorpusSpec(**header["spec"])
        records = []
        for line in f:
            d = json.loads(line)
            records.append(
                SequenceRecord(
                    token_ids=np.asarray(d["t"], dtype=np.int32),
                    k=int(d["k"]),
                    synsets=np.asarray(d["s"], dtype=np.int16),
                    sides=np.asarray(d["c"], dtype=np.uint8),
                )
            )
    return Corpus(spec=spec, records=records)


@dataclass(frozen=True)
class ContextDistribution:
    feature: int
    window: int
    occurrences: int
    probs: dict[tuple[int, ...], float]


def empirical_context_distribution(
    corpus: Corpus,
    inv: SynsetInventory,
    codec: FeatureCodec,
    feature: int,
    window: int,
) -> ContextDistribution:
    """Distribution of the `window` tokens following each occurrence of a feature.

    Occurrences without a full window after them are skipped; the feature
    must occur at least once or NotFoundError is raised.
    """
    if window < 1:
        raise InvalidArgumentError("window must be >= 1")
    a_of, b_of = inv.side_arrays()
    counts: dict[tuple[int, ...], int] = {}
    total = 0
    occurrences = 0
    for rec in corpus.records:
        fids = np.where(rec.sides == SIDE_A, a_of[rec.synsets], b_of[rec.synsets])
        hits = np.nonzero(fids == feature)[0]
        if hits.size == 0:
            continue
        occurrences += int(hits.size)
        spans = codec.spans(inv, rec.synsets, rec.sides)
        ntok = len(rec.token_ids)
        for p in hits:
            end = spans[int(p)][1]
            if end + window <= ntok:
                gram = tuple(int(t) for t in rec.token_ids[end : end + window])
                counts[gram] = counts.get(gram, 0) + 1
                total += 1
    if occurrences == 0:
        raise NotFoundError(f"feature {feature} does not occur in the corpus")
    probs = {g: c / total for g, c in counts.items()} if total else {}
    return ContextDistribution(feature=feature, window=window, occurrences=occurrences, probs=probs)


def window1_context_counts(
    corpus: Corpus, inv: SynsetInventory, codec: FeatureCodec
) -> np.ndarray:
    """(num_features, vocab) counts of the token immediately after each feature."""
    a_of, b_of = inv.side_arrays()
    counts = np.zeros((2 * inv.n, codec.vocab_size), dtype=np.int64)
    single = codec.mode == "single"
    for rec in corpus.records:
        fids = np.where(rec.sides == SIDE_A, a_of[rec.synsets], b_of[rec.synsets])
        if single:
            ends = np.arange(1, len(rec.synsets) + 1)
        else:
            ends = np.cumsum([len(codec.token_map[int(f)]) for f in fids])
        ok = ends < len(rec.token_ids)
        np.add.at(counts, (fids[ok], rec.token_ids[ends[ok]]), 1)
    return counts


def dh_report(corpus: Corpus, inv: SynsetInventory, codec: FeatureCodec) -> dict:
    """Measured window-1 context TV between the two features of each synset.

    Reports rather than asserts: a with-DH corpus should show a small max
    TV, a without-DH separate-vocabulary corpus shows 1.0 exactly.
    """
    counts = window1_context_counts(corpus, inv, codec)
    tvs = []
    for a, b in inv.synsets:
        ca, cb = counts[a], counts[b]
        if ca.sum() == 0 or cb.sum() == 0:
            tvs.append(float("nan"))
            continue
        pa = {i: v for i, v in enumerate(ca / ca.sum()) if v}
        pb = {i: v for i, v in enumerate(cb / cb.sum()) if v}
        tvs.append(tv_distance_mapping(pa, pb))
    finite = [t for t in tvs if t == t]
    return {
        "per_synset_tv": tvs,
        "max_tv": max(finite) if finite else float("nan"),
        "num_unobserved": len(tvs) - len(finite),
    }
