"""Probes for what pretraining actually transferred.

Three measurements, all total-variation distances over model outputs:
saliency (class shift when a feature span is masked), d_f0 (mask-slot
distribution shift between two features under a cloze template, asked of
the pretrained MLM), and d_f (class shift when one feature replaces
another inside a labeled example, asked of a fine-tuned classifier).
Their Pearson correlation across feature pairs is the headline number.

The correlation machinery also ingests distribution files produced by
external models, so nothing here assumes the distributions came from this
package's transformers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, UndefinedCorrelationError
from .models import ModelBundle, forward_cls, forward_mlm, pad_batch
from .seeding import rng_for
from .stats import pearson, tv_distance
from .synlang import MASK_ID, FeatureCodec, SynsetInventory
from .tasks import TaskDataset, domain_side

DEFAULT_TEMPLATE = "feature [MASK]"


def render_template(template: str, feature_tokens: tuple[int, ...]) -> tuple[list[int], int]:
    """Expand a template string into token ids; returns (tokens, mask index).

    Pieces are `feature` (the probed feature's tokens), `[MASK]`, or a
    literal token id. Exactly one [MASK] is required.
    """
    tokens: list[int] = []
    mask_at = []
    for piece in template.split():
        if piece == "[MASK]":
            mask_at.append(len(tokens))
            tokens.append(MASK_ID)
        elif piece == "feature":
            tokens.extend(feature_tokens)
        else:
            try:
                tokens.append(int(piece))
            except ValueError:
                raise InvalidArgumentError(f"unknown template piece {piece!r}") from None
    if len(mask_at) != 1:
        raise InvalidArgumentError(f"template needs exactly one [MASK], got {len(mask_at)}")
    return tokens, mask_at[0]


def mask_slot_distribution(bundle: ModelBundle, codec: FeatureCodec, feature: int,
                           template: str = DEFAULT_TEMPLATE) -> np.ndarray:
    """Full-vocabulary distribution at the template's mask slot."""
    tokens, mask_at = render_template(template, codec.encode_feature(feature))
    batch = pad_batch([tokens])
    return forward_mlm(bundle, batch, np.array([0]), np.array([mask_at + 1]))[0]


def d_f0(bundle_pre: ModelBundle, codec: FeatureCodec, a: int, b: int,
         template: str = DEFAULT_TEMPLATE) -> float:
    """TV between the mask-slot distributions when the template is filled
    with feature a versus feature b."""
    pa = mask_slot_distribution(bundle_pre, codec, a, template)
    pb = mask_slot_distribution(bundle_pre, codec, b, template)
    return tv_distance(pa, pb)


def saliency(bundle_ft: ModelBundle, token_ids: np.ndarray,
             spans: list[tuple[int, int]]) -> tuple[np.ndarray, int]:
    """Per-span saliency: TV between the classifier's distribution on the
    example and on the example with that span masked out. Returns the
    scores and the argmax span index."""
    token_ids = np.asarray(token_ids)
    variants = [token_ids]
    for start, stop in spans:
        if not 0 <= start < stop <= len(token_ids):
            raise InvalidArgumentError(f"span ({start}, {stop}) out of bounds")
        v = token_ids.copy()
        v[start:stop] = MASK_ID
        variants.append(v)
    probs = forward_cls(bundle_ft, pad_batch(variants))
    base = probs[0]
    scores = np.array([tv_distance(base, row) for row in probs[1:]])
    return scores, int(scores.argmax()) if len(scores) else -1


def replace_span(token_ids: np.ndarray, span: tuple[int, int],
                 a_tokens: tuple[int, ...], b_tokens: tuple[int, ...]) -> np.ndarray:
    start, stop = span
    token_ids = np.asarray(token_ids)
    if not 0 <= start < stop <= len(token_ids):
        raise InvalidArgumentError(f"span ({start}, {stop}) out of bounds")
    if tuple(int(t) for t in token_ids[start:stop]) != tuple(a_tokens):
        raise InvalidArgumentError("span does not hold the expected feature tokens")
    return np.concatenate([token_ids[:start], np.asarray(b_tokens, dtype=token_ids.dtype),
                           token_ids[stop:]])


def d_f(bundle_ft: ModelBundle, token_ids: np.ndarray, span: tuple[int, int],
        a_tokens: tuple[int, ...], b_tokens: tuple[int, ...]) -> float:
    """TV between class distributions before and after replacing feature a
    (at `span`) with feature b."""
    replaced = replace_span(token_ids, span, a_tokens, b_tokens)
    probs = forward_cls(bundle_ft, pad_batch([np.asarray(token_ids), replaced]))
    return tv_distance(probs[0], probs[1])


# -------------------------------------------------------------------- pairs

@dataclass(frozen=True)
class FeaturePair:
    pair_id: int
    kind: str  # "true" | "cross"
    a: int
    b: int
    x_tokens: np.ndarray
    span: tuple[int, int]


def build_feature_pairs(inv: SynsetInventory, codec: FeatureCodec,
                        dataset: TaskDataset, seed: int) -> list[FeaturePair]:
    """One true pair plus one seeded cross pair per synset.

    The true pair swaps a synset's observed feature for its partner; the
    cross pair swaps it for the partner feature of a different, uniformly
    drawn synset. Each pair is anchored at the first occurrence of the
    observed feature in the dataset; synsets that never occur are skipped
    (the report carries the realized counts).
    """
    occurrences: dict[int, tuple[np.ndarray, tuple[int, int]]] = {}
    for e in dataset.examples:
        side = domain_side(e.domain)
        sides = np.full(len(e.synsets), side, dtype=np.uint8)
        spans = codec.spans(inv, e.synsets, sides)
        for pos, s in enumerate(e.synsets):
            if int(s) not in occurrences:
                occurrences[int(s)] = (e.token_ids, spans[pos], side)
        if len(occurrences) == inv.n:
            break

    rng = rng_for(seed, "probe-pairs")
    pairs: list[FeaturePair] = []
    pair_id = 0
    for i in range(inv.n):
        j = int(rng.integers(inv.n - 1))
        j += j >= i  # uniform over synsets other than i
        if i not in occurrences:
            continue
        x, span, side = occurrences[i]
        obs = inv.feature_of(i, side)
        partner = inv.feature_of(i, 1 - side)
        pairs.append(FeaturePair(pair_id, "true", obs, partner, x, span))
        pair_id += 1
        pairs.append(FeaturePair(pair_id, "cross", obs, inv.feature_of(j, 1 - side), x, span))
        pair_id += 1
    return pairs


# ------------------------------------------------------------------- report

@dataclass
class ProbeReport:
    checkpoint_id: str
    size: int
    records: list[dict] = field(default_factory=list)
    pearson_r: float | None = None
    r_undefined: bool = False
    counts: dict = field(default_factory=dict)
    flip_rate_true_pairs: float | None = None


def run_probe(bundle_pre: ModelBundle, checkpoints: list[tuple[str, ModelBundle, int]],
              pairs: list[FeaturePair], codec: FeatureCodec,
              template: str = DEFAULT_TEMPLATE) -> list[ProbeReport]:
    """One report per fine-tuned checkpoint.

    d_f0 depends only on (a, b) and the pretrained model, so each feature's
    mask-slot distribution is computed once and shared across checkpoints.
    """
    if not pairs:
        raise InvalidArgumentError("empty pair list")
    features = sorted({p.a for p in pairs} | {p.b for p in pairs})
    slot = {f: mask_slot_distribution(bundle_pre, codec, f, template) for f in features}
    d0 = {}
    for p in pairs:
        if (p.a, p.b) not in d0:
            d0[(p.a, p.b)] = tv_distance(slot[p.a], slot[p.b])

    originals = pad_batch([p.x_tokens for p in pairs])
    replaced = pad_batch([
        replace_span(p.x_tokens, p.span, codec.encode_feature(p.a), codec.encode_feature(p.b))
        for p in pairs
    ])

    reports = []
    for checkpoint_id, bundle_ft, size in checkpoints:
        before = forward_cls(bundle_ft, originals)
        after = forward_cls(bundle_ft, replaced)
        records = []
        flips, true_count = 0, 0
        for idx, p in enumerate(pairs):
            df = tv_distance(before[idx], after[idx])
            records.append({"pair_id": p.pair_id, "kind": p.kind, "a": p.a, "b": p.b,
                            "d_f0": d0[(p.a, p.b)], "d_f": df})
            if p.kind == "true":
                true_count += 1
                if before[idx].argmax() != after[idx].argmax():
                    flips += 1
        report = ProbeReport(
            checkpoint_id=checkpoint_id,
            size=size,
            records=sorted(records, key=lambda r: r["pair_id"]),
            counts={k: sum(1 for r in records if r["kind"] == k) for k in ("true", "cross")},
            flip_rate_true_pairs=(flips / true_count) if true_count else None,
        )
        try:
            report.pearson_r = pearson([(r["d_f0"], r["d_f"]) for r in records])
        except UndefinedCorrelationError:
            report.r_undefined = True
        reports.append(report)
    return reports


PROBE_REPORT_FORMAT = "synmlm-probe-report"
PROBE_REPORT_VERSION = 1


def write_probe_reports(path: str | Path, reports: list[ProbeReport],
                        template: str = DEFAULT_TEMPLATE) -> None:
    payload = {
        "format": PROBE_REPORT_FORMAT,
        "version": PROBE_REPORT_VERSION,
        "template": template,
        "reports": [
            {
                "checkpoint_id": r.checkpoint_id,
                "size": r.size,
                "pearson_r": r.pearson_r,
                "r_undefined": r.r_undefined,
                "counts": r.counts,
                "flip_rate_true_pairs": r.flip_rate_true_pairs,
                "records": r.records,
            }
            for r in reports
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def read_probe_reports(path: str | Path) -> list[ProbeReport]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != PROBE_REPORT_FORMAT:
        raise InvalidArgumentError(f"{path} is not a probe report")
    return [
        ProbeReport(
            checkpoint_id=r["checkpoint_id"], size=r["size"], records=r["records"],
            pearson_r=r["pearson_r"], r_undefined=r["r_undefined"], counts=r["counts"],
            flip_rate_true_pairs=r["flip_rate_true_pairs"],
        )
        for r in payload["reports"]
    ]


# ------------------------------------------------ external distribution files

def read_distribution_pairs(path: str | Path) -> dict[int, float]:
    """TV per pair id from an externally produced distribution file.

    Each line is `pair_id support_size p1 ... pN`; every pair id must
    appear on exactly two lines with equal support, and the TV between
    those two vectors becomes that pair's value.
    """
    rows: dict[int, list[np.ndarray]] = {}
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3:
                raise InvalidArgumentError(f"{path}:{ln}: expected pair_id, support, probs")
            pid, support = int(parts[0]), int(parts[1])
            vec = np.array(parts[2:], dtype=np.float64)
            if vec.size != support:
                raise InvalidArgumentError(
                    f"{path}:{ln}: support {support} but {vec.size} probabilities"
                )
            rows.setdefault(pid, []).append(vec)
    out = {}
    for pid, vecs in sorted(rows.items()):
        if len(vecs) != 2:
            raise InvalidArgumentError(f"pair {pid} has {len(vecs)} lines, expected 2")
        if vecs[0].size != vecs[1].size:
            raise InvalidArgumentError(f"pair {pid} support sizes differ")
        out[pid] = tv_distance(vecs[0], vecs[1])
    return out


def correlation_from_files(f0_path: str | Path, f_path: str | Path) -> dict:
    """Pearson r between externally supplied d_f0 and d_f values, matched
    by pair id."""
    d0 = read_distribution_pairs(f0_path)
    df = read_distribution_pairs(f_path)
    shared = sorted(set(d0) & set(df))
    if len(shared) < 2:
        raise InvalidArgumentError("need at least 2 shared pair ids")
    pairs = [(d0[p], df[p]) for p in shared]
    try:
        r = pearson(pairs)
        undefined = False
    except UndefinedCorrelationError:
        r, undefined = None, True
    return {"pearson_r": r, "r_undefined": undefined, "num_pairs": len(shared)}


# ----------------------------------------------------- next-synset readout

def next_synset_distribution(bundle: ModelBundle, inv: SynsetInventory,
                             codec: FeatureCodec, prefix_tokens) -> np.ndarray:
    """The MLM's next-synset belief after a prefix, via a trailing mask.

    Runs `prefix [MASK]`, keeps the mask slot's probability on feature
    tokens only, and folds the two features of each synset together.
    Single-token codecs only (spans would be ambiguous otherwise).
    """
    if codec.mode != "single":
        raise InvalidArgumentError("next-synset readout expects a single-token codec")
    tokens = list(prefix_tokens) + [MASK_ID]
    batch = pad_batch([tokens])
    probs = forward_mlm(bundle, batch, np.array([0]), np.array([len(tokens)]))[0]
    out = np.zeros(inv.n, dtype=np.float64)
    for i, (a, b) in enumerate(inv.synsets):
        out[i] = probs[codec.token_map[a][0]] + probs[codec.token_map[b][0]]
    total = out.sum()
    if total <= 0:
        raise InvalidArgumentError("no probability mass on feature tokens")
    return out / total
