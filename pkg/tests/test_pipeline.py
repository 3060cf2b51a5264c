"""End-to-end pipeline behavior on a tiny manifest: generation checksums,
idempotence, cell results, the locked result table, and probing."""

import json

import numpy as np
import pytest

from synmlm.errors import InvalidArgumentError, NotFoundError, ValidationError
from synmlm.manifest import validate_manifest
from synmlm.pipeline import (
    Workspace,
    load_world,
    merge_results,
    read_results,
    run_finetune_cell,
    run_gen,
    run_pretrain,
    run_probe_cmd,
    starting_bundle,
)
from synmlm.probing import read_probe_reports
from synmlm.synlang import read_corpus
from synmlm.tasks import read_dataset

from test_manifest import tiny_manifest


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    """One generated+pretrained tiny workspace shared by the module."""
    root = tmp_path_factory.mktemp("artifacts")
    ws = Workspace(root, validate_manifest(tiny_manifest()))
    run_gen(ws)
    for variant in ("with-dh", "without-dh", "cbow"):
        run_pretrain(ws, variant)
    return ws


def test_gen_layout_and_checksums(built):
    ws = built
    assert ws.world_path.exists()
    assert ws.corpus_path("with").exists()
    assert ws.corpus_path("without").exists()
    files = json.loads(ws.checksums_path.read_text())["files"]
    assert "world.json" in files
    assert "corpora/with-dh.jsonl" in files
    # pools exist for preset domains, test sets for all four
    for domain in ("A-D1", "B-D2"):
        assert ws.data_path(domain, "train").exists()
        assert ws.data_path(domain, "val").exists()
    for domain in ("A-D1", "B-D1", "A-D2", "B-D2"):
        assert ws.data_path(domain, "test").exists()
    # no train pool for domains absent from every preset
    assert not ws.data_path("A-D2", "train").exists()


def test_gen_idempotent(built):
    before = json.loads(built.checksums_path.read_text())
    again = run_gen(built)
    assert before["files"] == again


def test_gen_deterministic_across_roots(built, tmp_path):
    ws2 = Workspace(tmp_path, validate_manifest(tiny_manifest()))
    files2 = run_gen(ws2)
    files1 = json.loads(built.checksums_path.read_text())["files"]
    assert files1 == files2


def test_corpora_share_synset_walks(built):
    with_dh = read_corpus(built.corpus_path("with"))
    without_dh = read_corpus(built.corpus_path("without"))
    for a, b in zip(with_dh.records, without_dh.records):
        assert np.array_equal(a.synsets, b.synsets)
        assert a.k == b.k
    assert any(not np.array_equal(a.sides, b.sides)
               for a, b in zip(with_dh.records, without_dh.records))


def test_digest_guard_rejects_other_manifest(built):
    raw = tiny_manifest()
    raw["seed"] = 99
    other = Workspace(built.dir.parent, validate_manifest(raw))
    other.dir = built.dir  # force the same tree
    with pytest.raises(ValidationError):
        other.check_digest()


def test_load_world_matches_generation(built):
    inv, codec, chains, patterns = load_world(built)
    assert inv.n == 8
    assert codec.vocab_size == 3 + 16
    assert chains.targets1.shape == (8, 2)
    assert len(patterns.patterns) == 3


def test_pool_sizes(built):
    m = built.manifest
    train = read_dataset(built.data_path("A-D1", "train"))
    assert len(train) == m.max_train_size()
    test = read_dataset(built.data_path("B-D1", "test"))
    assert len(test) == m.task["eval_size"]
    labels = test.labels()
    assert abs(labels.mean() - 0.5) <= 0.5 / len(labels) + 1e-9  # balanced


def test_pretrain_artifacts(built):
    for variant in ("with-dh", "without-dh"):
        assert built.pretrain_path(variant).exists()
        assert built.pretrain_log_path(variant).exists()
    assert built.pretrain_path("cbow").exists()


def test_pretrain_idempotent(built):
    stamp = built.pretrain_path("with-dh").stat().st_mtime_ns
    run_pretrain(built, "with-dh")
    assert built.pretrain_path("with-dh").stat().st_mtime_ns == stamp


def test_pretrain_unknown_variant(built):
    with pytest.raises(InvalidArgumentError):
        run_pretrain(built, "sideways")


def test_pretrain_missing_corpus(tmp_path):
    ws = Workspace(tmp_path, validate_manifest(tiny_manifest()))
    with pytest.raises(NotFoundError):
        run_pretrain(ws, "with-dh")


def test_finetune_cell_rows_and_result_file(built):
    rows = run_finetune_cell(built, "mix", "with-dh", 8, 0)
    assert len(rows) == 4
    assert {r["domain"] for r in rows} == {"A-D1", "B-D1", "A-D2", "B-D2"}
    for r in rows:
        assert 0.0 <= r["accuracy"] <= 1.0
    cell = built.cell_dir("mix", "with-dh", 8, 0)
    result = json.loads((cell / "result.json").read_text())
    comp = {c["domain"]: c["size"] for c in result["train_composition"]}
    assert comp == {"A-D1": 4, "B-D2": 4}  # exact 50/50 of size 8
    assert (cell / "metrics.log").exists()
    assert (cell / "checkpoint.ckpt").exists()  # probe cell (rep 0)


def test_finetune_cell_idempotent(built):
    first = built.results_path.read_bytes()
    run_finetune_cell(built, "mix", "with-dh", 8, 0)
    assert built.results_path.read_bytes() == first


def test_finetune_nonprobe_cell_saves_no_checkpoint(built):
    run_finetune_cell(built, "mix", "with-dh", 8, 1)
    assert not (built.cell_dir("mix", "with-dh", 8, 1) / "checkpoint.ckpt").exists()


def test_finetune_rejects_cells_outside_manifest(built):
    with pytest.raises(InvalidArgumentError):
        run_finetune_cell(built, "mix", "with-dh", 12, 0)  # size not listed
    with pytest.raises(InvalidArgumentError):
        run_finetune_cell(built, "pure", "cbow-init", 8, 0)  # variant not listed
    with pytest.raises(InvalidArgumentError):
        run_finetune_cell(built, "mix", "with-dh", 8, 5)  # replicate out of range
    with pytest.raises(InvalidArgumentError):
        run_finetune_cell(built, "nope", "with-dh", 8, 0)


def test_all_variants_produce_cells(built):
    for variant in ("without-dh", "from-scratch", "cbow-init", "shuffle-weight"):
        rows = run_finetune_cell(built, "mix", variant, 8, 0)
        assert len(rows) == 4


def test_results_table_sorted_and_parseable(built):
    text = built.results_path.read_text()
    lines = text.strip().split("\n")
    assert lines[0] == "preset,variant,size,seed,domain,accuracy"
    body = lines[1:]
    assert body == sorted(body)
    rows = read_results(built.results_path)
    assert all(0.0 <= r["accuracy"] <= 1.0 for r in rows)


def test_merge_results_replaces_by_key(built):
    rows = read_results(built.results_path)
    n = len(rows)
    merge_results(built, [dict(rows[0], accuracy=0.123456789)])
    after = read_results(built.results_path)
    assert len(after) == n
    k = (rows[0]["preset"], rows[0]["variant"], rows[0]["size"], rows[0]["seed"],
         rows[0]["domain"])
    got = [r for r in after if (r["preset"], r["variant"], r["size"], r["seed"],
                                r["domain"]) == k]
    assert got[0]["accuracy"] == pytest.approx(0.123456789)
    merge_results(built, [rows[0]])  # restore


def test_results_roundtrip_bytes(built):
    before = built.results_path.read_bytes()
    merge_results(built, [])
    assert built.results_path.read_bytes() == before


def test_starting_bundle_unknown_variant(built):
    with pytest.raises(InvalidArgumentError):
        starting_bundle(built, "mix", "mystery", 8, 0, vocab_size=19)


def test_starting_bundle_missing_artifacts(tmp_path):
    ws = Workspace(tmp_path, validate_manifest(tiny_manifest()))
    with pytest.raises(NotFoundError):
        starting_bundle(ws, "mix", "with-dh", 8, 0, vocab_size=19)
    with pytest.raises(NotFoundError):
        starting_bundle(ws, "mix", "cbow-init", 8, 0, vocab_size=19)
    with pytest.raises(NotFoundError):
        starting_bundle(ws, "mix", "shuffle-weight", 8, 0, vocab_size=19)


def test_probe_requires_checkpoints(built):
    # size 16 of the probe cell has not been fine-tuned yet
    with pytest.raises(NotFoundError):
        run_probe_cmd(built)


def test_probe_report_end_to_end(built):
    run_finetune_cell(built, "mix", "with-dh", 16, 0)
    path = run_probe_cmd(built)
    reports = read_probe_reports(path)
    assert [r.checkpoint_id for r in reports] == ["with-dh-8", "with-dh-16"]
    assert [r.size for r in reports] == [8, 16]
    for r in reports:
        assert r.counts["true"] == 8 and r.counts["cross"] == 8
        assert r.pearson_r is not None or r.r_undefined
    # idempotent: second call returns the same file untouched
    stamp = path.stat().st_mtime_ns
    assert run_probe_cmd(built) == path
    assert path.stat().st_mtime_ns == stamp
