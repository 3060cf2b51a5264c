"""Pattern task tests: the scan against triple-enumeration oracles,
balance and mixture accounting, and label invariance to side choice."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_label, oracle_label_batch
from synmlm.errors import GenerationError, InvalidArgumentError
from synmlm.synlang import build_chain_pair, build_codec, build_inventory
from synmlm.tasks import (
    Pattern,
    PatternSet,
    TaskDatasetSpec,
    build_pattern_set,
    generate_task_dataset,
    label,
    label_batch,
    make_mixture,
    natural_positive_rate,
    read_dataset,
    write_dataset,
)


def _singleton_ps():
    return PatternSet((Pattern(frozenset({1}), frozenset({2}), frozenset({3})),), seed=0)


# ------------------------------------------------------------------ labeling

def test_label_in_order_match():
    assert label([1, 5, 2, 3], _singleton_ps()) is True


def test_label_order_violated():
    assert label([3, 2, 1], _singleton_ps()) is False


def test_label_s3_unmatched():
    assert label([1, 2], _singleton_ps()) is False


def test_label_same_position_cannot_serve_twice():
    ps = PatternSet((Pattern(frozenset({1}), frozenset({1}), frozenset({1})),), seed=0)
    assert label([1, 1], ps) is False
    assert label([1, 1, 1], ps) is True


def test_label_empty_rejected():
    with pytest.raises(InvalidArgumentError):
        label([], _singleton_ps())


def test_label_matches_oracle_random():
    inv = build_inventory(5, seed=2)
    ps = build_pattern_set(inv, num_patterns=2, set_size=2, seed=3)
    rng = np.random.default_rng(0)
    for _ in range(500):
        seq = rng.integers(0, 5, size=rng.integers(1, 12)).tolist()
        assert label(seq, ps) == oracle_label(seq, ps)


def test_label_exhaustive_short():
    # every sequence of length <= 5 over 5 synsets, scan vs triple oracle
    inv = build_inventory(5, seed=2)
    ps = build_pattern_set(inv, num_patterns=2, set_size=2, seed=3)
    for l in range(3, 6):
        seqs = np.array(list(itertools.product(range(5), repeat=l)), dtype=np.int64)
        got = label_batch(seqs, ps, n=5)
        want = oracle_label_batch(seqs, ps, n=5)
        assert (got == want).all()


@given(
    rows=st.integers(1, 30),
    length=st.integers(1, 20),
    seed=st.integers(0, 10**6),
)
@settings(max_examples=30, deadline=None)
def test_label_batch_matches_scalar(rows, length, seed):
    inv = build_inventory(6, seed=1)
    ps = build_pattern_set(inv, num_patterns=3, set_size=2, seed=seed)
    s = np.random.default_rng(seed).integers(0, 6, size=(rows, length))
    got = label_batch(s, ps, n=6)
    for r in range(rows):
        assert got[r] == label(s[r], ps)


# ------------------------------------------------------------------ patterns

def test_pattern_set_shapes():
    inv = build_inventory(64, seed=1)
    ps = build_pattern_set(inv, num_patterns=5, set_size=12, seed=1)
    assert len(ps.patterns) == 5
    for p in ps.patterns:
        assert len(p.s1) == len(p.s2) == len(p.s3) == 12
        assert all(0 <= s < 64 for s in p.s1 | p.s2 | p.s3)


def test_pattern_set_saturation():
    inv = build_inventory(3, seed=0)
    ps = build_pattern_set(inv, num_patterns=1, set_size=3, seed=0)
    p = ps.patterns[0]
    assert p.s1 == p.s2 == p.s3 == frozenset({0, 1, 2})


def test_pattern_set_too_big():
    inv = build_inventory(4, seed=0)
    with pytest.raises(InvalidArgumentError):
        build_pattern_set(inv, num_patterns=1, set_size=5, seed=0)


def test_pattern_set_deterministic_and_serializable():
    inv = build_inventory(16, seed=4)
    ps1 = build_pattern_set(inv, 5, 4, seed=9)
    ps2 = build_pattern_set(inv, 5, 4, seed=9)
    assert ps1 == ps2
    assert PatternSet.from_dict(ps1.to_dict()) == ps1


def test_pattern_validation():
    with pytest.raises(InvalidArgumentError):
        Pattern(frozenset(), frozenset({1}), frozenset({2}))
    with pytest.raises(InvalidArgumentError):
        Pattern(frozenset({1}), frozenset({1, 2}), frozenset({3}))
    with pytest.raises(InvalidArgumentError):
        PatternSet((), seed=0)


# ------------------------------------------------------------------ datasets

def _world(n=16, seed=5, set_size=1, length=24):
    inv = build_inventory(n, seed)
    codec = build_codec(inv, "single", "separate", seed)
    chains = build_chain_pair(n, seed)
    ps = build_pattern_set(inv, num_patterns=3, set_size=set_size, seed=seed)
    return inv, codec, chains, ps, length


def test_dataset_domain_purity_and_transitions():
    inv, codec, chains, ps, length = _world()
    spec = TaskDatasetSpec(domain="A-D1", size=60, length=length, seed=1)
    ds = generate_task_dataset(spec, ps, chains, codec, inv)
    lo, hi = codec.vocab_alpha
    edges = {(int(u), int(v)) for u, row in enumerate(chains.targets1) for v in row}
    for e in ds.examples:
        assert ((e.token_ids >= lo) & (e.token_ids < hi)).all()
        for a, b in zip(e.synsets, e.synsets[1:]):
            assert (int(a), int(b)) in edges


def test_dataset_label_invariance_under_side_flip():
    inv, codec, chains, ps, length = _world()
    spec = TaskDatasetSpec(domain="A-D1", size=40, length=length, seed=2)
    ds = generate_task_dataset(spec, ps, chains, codec, inv)
    decode = {codec.token_map[f]: s for s, pair in enumerate(inv.synsets) for f in pair}
    rng = np.random.default_rng(0)
    for e in ds.examples:
        flipped = rng.integers(0, 2, size=length).astype(np.uint8)
        tokens = codec.render(inv, e.synsets, flipped)
        back = [decode[(int(t),)] for t in tokens]
        assert label(back, ps) == e.y


def test_dataset_balance():
    inv, codec, chains, ps, length = _world()
    spec = TaskDatasetSpec(domain="B-D2", size=1000, length=length, seed=3)
    ds = generate_task_dataset(spec, ps, chains, codec, inv)
    assert 0.45 <= ds.positive_rate() <= 0.55
    assert ds.labels().sum() == 500  # alternating targets make it exact
    for e in ds.examples:
        assert label(e.synsets, ps) == e.y


def test_dataset_natural_balance_policy():
    inv, codec, chains, ps, length = _world()
    spec = TaskDatasetSpec(domain="A-D2", size=300, length=length, seed=4, balance="natural")
    ds = generate_task_dataset(spec, ps, chains, codec, inv)
    rate = natural_positive_rate(spec, ps, chains, draws=2000)
    assert abs(ds.positive_rate() - rate) < 0.1
    for e in ds.examples:
        assert label(e.synsets, ps) == e.y


def test_dataset_generation_failure_on_degenerate_rate():
    inv, codec, chains, _, _ = _world()
    saturated = build_pattern_set(inv, num_patterns=1, set_size=16, seed=0)
    spec = TaskDatasetSpec(domain="A-D1", size=10, length=24, seed=0)
    with pytest.raises(GenerationError):  # rate 1: every length-3+ walk matches
        generate_task_dataset(spec, saturated, chains, codec, inv)
    tiny = build_pattern_set(inv, num_patterns=1, set_size=1, seed=0)
    short = TaskDatasetSpec(domain="A-D1", size=10, length=2, seed=0)
    with pytest.raises(GenerationError):  # rate 0: too short for any triple
        generate_task_dataset(short, tiny, chains, codec, inv)


def test_dataset_deterministic(tmp_path):
    inv, codec, chains, ps, length = _world()
    spec = TaskDatasetSpec(domain="B-D1", size=50, length=length, seed=6)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_dataset(generate_task_dataset(spec, ps, chains, codec, inv), p1)
    write_dataset(generate_task_dataset(spec, ps, chains, codec, inv), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_dataset_round_trip(tmp_path):
    inv, codec, chains, ps, length = _world()
    spec = TaskDatasetSpec(domain="A-D2", size=30, length=length, seed=7)
    ds = generate_task_dataset(spec, ps, chains, codec, inv)
    path = tmp_path / "d.jsonl"
    write_dataset(ds, path)
    back = read_dataset(path)
    assert back.meta == ds.meta
    for e1, e2 in zip(ds.examples, back.examples):
        assert (e1.token_ids == e2.token_ids).all()
        assert e1.y == e2.y and e1.domain == e2.domain
        assert (e1.synsets == e2.synsets).all()


def test_dataset_spec_validation():
    with pytest.raises(InvalidArgumentError):
        TaskDatasetSpec(domain="C-D1", size=10).validate()
    with pytest.raises(InvalidArgumentError):
        TaskDatasetSpec(domain="A-D1", size=-1).validate()
    with pytest.raises(InvalidArgumentError):
        TaskDatasetSpec(domain="A-D1", size=10, balance="weird").validate()


# ------------------------------------------------------------------ mixtures

def _two_parts(size=600):
    inv, codec, chains, ps, length = _world()
    a = generate_task_dataset(
        TaskDatasetSpec(domain="A-D1", size=size, length=length, seed=8), ps, chains, codec, inv
    )
    b = generate_task_dataset(
        TaskDatasetSpec(domain="B-D2", size=size, length=length, seed=9), ps, chains, codec, inv
    )
    return a, b


def test_mixture_half_half():
    a, b = _two_parts()
    mix = make_mixture([(a, 0.5), (b, 0.5)], total=1000, seed=0)
    domains = [e.domain for e in mix.examples]
    assert len(mix) == 1000
    assert domains.count("A-D1") == 500
    assert domains.count("B-D2") == 500


def test_mixture_ninety_ten():
    a, b = _two_parts()
    mix = make_mixture([(a, 0.9), (b, 0.1)], total=600, seed=1)
    domains = [e.domain for e in mix.examples]
    assert domains.count("A-D1") == 540
    assert domains.count("B-D2") == 60


def test_mixture_identity():
    a, _ = _two_parts(size=100)
    mix = make_mixture([(a, 1.0)], total=100, seed=2)
    assert sorted(id(e) for e in mix.examples) == sorted(id(e) for e in a.examples)


def test_mixture_largest_remainder():
    a, b = _two_parts(size=100)
    c, _ = _two_parts(size=100)
    mix = make_mixture([(a, 1 / 3), (b, 1 / 3), (c, 1 / 3)], total=100, seed=3)
    counts = [p["size"] for p in mix.meta["mixture"]]
    assert counts == [34, 33, 33]  # equal remainders break toward earlier parts
    assert sum(counts) == 100


def test_mixture_bad_proportions():
    a, b = _two_parts(size=10)
    with pytest.raises(InvalidArgumentError):
        make_mixture([(a, 0.6), (b, 0.5)], total=10, seed=0)
    with pytest.raises(InvalidArgumentError):
        make_mixture([(a, 0.9), (b, 0.1)], total=100, seed=0)  # part b too small


def test_mixture_deterministic_shuffle():
    a, b = _two_parts(size=50)
    m1 = make_mixture([(a, 0.5), (b, 0.5)], total=80, seed=4)
    m2 = make_mixture([(a, 0.5), (b, 0.5)], total=80, seed=4)
    assert [e.domain for e in m1.examples] == [e.domain for e in m2.examples]
    assert all((x.token_ids == y.token_ids).all() for x, y in zip(m1.examples, m2.examples))
