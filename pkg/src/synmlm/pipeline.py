"""Artifact pipeline tying the manifest to files on disk.

Layout under the artifact root, one subtree per manifest name:

    world.json                  inventory + codec + chains + patterns
    corpora/{with,without}-dh.jsonl
    gen-checksums.json          sha256 of every generation artifact
    pretrain/<variant>.ckpt     MLM checkpoints (+ .log), cbow.tsv
    data/<domain>-<split>.jsonl shared train/val pools and test sets
    cells/<preset>/<variant>/<size>/s<rep>/
                                result.json, metrics.log, checkpoint.ckpt
    results.csv                 one row per (cell, test domain)
    probe/report.json

Every command is idempotent: completed outputs are detected and skipped,
so a crashed run resumes by re-invoking, and concurrent cell workers only
contend on the result-table lock.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, NotFoundError, ValidationError
from .manifest import PRETRAIN_VARIANTS, ExperimentManifest
from .models import (
    ModelBundle,
    init_from_cbow,
    load_bundle,
    read_cbow_table,
    save_bundle,
    shuffle_weights,
    train_cbow,
    write_cbow_table,
)
from .probing import build_feature_pairs, run_probe, write_probe_reports
from .seeding import stream_key
from .synlang import (
    CorpusSpec,
    FeatureCodec,
    MarkovChainPair,
    SynsetInventory,
    build_chain_pair,
    build_codec,
    build_inventory,
    generate_corpus,
    read_corpus,
    write_corpus,
)
from .tasks import (
    DOMAINS,
    PatternSet,
    TaskDatasetSpec,
    build_pattern_set,
    generate_task_dataset,
    make_mixture,
    read_dataset,
    write_dataset,
)
from .training import evaluate, fine_tune, pretrain_mlm

ARTIFACT_ROOT_ENV = "SYNMLM_ARTIFACTS"
WORLD_FORMAT = "synmlm-world"
RESULT_HEADER = "preset,variant,size,seed,domain,accuracy"


def resolve_root(out_dir: str | None) -> Path:
    if out_dir:
        return Path(out_dir)
    return Path(os.environ.get(ARTIFACT_ROOT_ENV, "artifacts"))


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    """Path arithmetic plus the manifest digest guard for one artifact tree."""

    def __init__(self, root: Path | str, manifest: ExperimentManifest):
        self.manifest = manifest
        self.dir = Path(root) / manifest.name

    # ---- paths ----------------------------------------------------------

    @property
    def world_path(self) -> Path:
        return self.dir / "world.json"

    def corpus_path(self, dh: str) -> Path:
        return self.dir / "corpora" / f"{dh}-dh.jsonl"

    def pretrain_path(self, variant: str) -> Path:
        if variant == "cbow":
            return self.dir / "pretrain" / "cbow.tsv"
        return self.dir / "pretrain" / f"{variant}.ckpt"

    def pretrain_log_path(self, variant: str) -> Path:
        return self.dir / "pretrain" / f"{variant}.log"

    def data_path(self, domain: str, split: str) -> Path:
        return self.dir / "data" / f"{domain}-{split}.jsonl"

    def cell_dir(self, preset: str, variant: str, size: int, rep: int) -> Path:
        return self.dir / "cells" / preset / variant / str(size) / f"s{rep}"

    @property
    def results_path(self) -> Path:
        return self.dir / "results.csv"

    @property
    def probe_report_path(self) -> Path:
        return self.dir / "probe" / "report.json"

    @property
    def checksums_path(self) -> Path:
        return self.dir / "gen-checksums.json"

    # ---- manifest digest guard ------------------------------------------

    def check_digest(self) -> None:
        """Refuse to mix artifacts from two different manifests in one tree."""
        stamp = self.dir / "manifest-digest.txt"
        digest = self.manifest.digest()
        if stamp.exists():
            if stamp.read_text().strip() != digest:
                raise ValidationError(
                    f"{self.dir} holds artifacts for a different manifest; "
                    "use a fresh --out-dir or delete the tree", [str(self.dir)]
                )
        else:
            self.dir.mkdir(parents=True, exist_ok=True)
            _atomic_write(stamp, digest + "\n")


# ------------------------------------------------------------------ gen

def _used_domains(manifest: ExperimentManifest) -> list[str]:
    used = {d for mix in manifest.presets.values() for d in mix}
    return [d for d in DOMAINS if d in used]


def run_gen(ws: Workspace) -> dict:
    """Build world, corpora, and task datasets; returns the checksum map."""
    m = ws.manifest
    ws.check_digest()
    if ws.checksums_path.exists():
        return json.loads(ws.checksums_path.read_text())["files"]

    for sub in ("corpora", "data"):
        (ws.dir / sub).mkdir(parents=True, exist_ok=True)

    lang = m.language
    inv = build_inventory(lang["num_synsets"], seed=m.seed)
    codec = build_codec(inv, mode=lang["codec_mode"],
                        vocab_sharing=lang["vocab_sharing"], seed=m.seed)
    chains = build_chain_pair(lang["num_synsets"], seed=m.seed)
    patterns = build_pattern_set(inv, num_patterns=m.patterns["num_patterns"],
                                 set_size=m.patterns["set_size"], seed=m.seed)
    world = {
        "format": WORLD_FORMAT,
        "version": 1,
        "inventory": inv.to_dict(),
        "codec": codec.to_dict(),
        "chains": chains.to_dict(),
        "patterns": patterns.to_dict(),
    }
    _atomic_write(ws.world_path, json.dumps(world) + "\n")

    # both corpora share the seed so their synset walks line up exactly
    for dh in ("with", "without"):
        spec = CorpusSpec(num_sequences=m.corpus["num_sequences"],
                          length=m.corpus["length"], dh=dh, seed=m.seed)
        write_corpus(generate_corpus(spec, inv, codec, chains), ws.corpus_path(dh))

    train_size = m.max_train_size()
    eval_size = m.task["eval_size"]
    for domain in _used_domains(m):
        for split, size in (("train", train_size), ("val", eval_size)):
            spec = TaskDatasetSpec(domain=domain, size=size, length=m.task["length"],
                                   seed=stream_key(m.seed, "task", domain, split))
            write_dataset(generate_task_dataset(spec, patterns, chains, codec, inv),
                          ws.data_path(domain, split))
    for domain in DOMAINS:
        spec = TaskDatasetSpec(domain=domain, size=eval_size, length=m.task["length"],
                               seed=stream_key(m.seed, "task", domain, "test"))
        write_dataset(generate_task_dataset(spec, patterns, chains, codec, inv),
                      ws.data_path(domain, "test"))

    files = {}
    for p in sorted(ws.dir.rglob("*")):
        if p.is_file() and p.suffix in (".json", ".jsonl") and p.name != "gen-checksums.json":
            files[str(p.relative_to(ws.dir))] = _sha256(p)
    _atomic_write(ws.checksums_path, json.dumps(
        {"manifest_digest": m.digest(), "files": files}, indent=1, sort_keys=True) + "\n")
    return files


def load_world(ws: Workspace) -> tuple[SynsetInventory, FeatureCodec, MarkovChainPair, PatternSet]:
    if not ws.world_path.exists():
        raise NotFoundError(f"world file missing: {ws.world_path} (run gen first)")
    w = json.loads(ws.world_path.read_text())
    if w.get("format") != WORLD_FORMAT:
        raise ValidationError(f"{ws.world_path} is not a world file")
    return (SynsetInventory.from_dict(w["inventory"]), FeatureCodec.from_dict(w["codec"]),
            MarkovChainPair.from_dict(w["chains"]), PatternSet.from_dict(w["patterns"]))


# --------------------------------------------------------------- pretrain

def run_pretrain(ws: Workspace, variant: str) -> Path:
    m = ws.manifest
    ws.check_digest()
    if variant not in PRETRAIN_VARIANTS:
        raise InvalidArgumentError(
            f"unknown pretrain variant {variant!r}, expected one of {PRETRAIN_VARIANTS}")
    out = ws.pretrain_path(variant)
    if out.exists():
        return out
    out.parent.mkdir(parents=True, exist_ok=True)

    if variant == "cbow":
        corpus_path = ws.corpus_path("with")
        if not corpus_path.exists():
            raise NotFoundError(f"corpus missing: {corpus_path} (run gen first)")
        corpus = read_corpus(corpus_path)
        c = m.cbow
        model = train_cbow(corpus, window=c["window"], dim=c["dim"], epochs=c["epochs"],
                           seed=stream_key(m.seed, "cbow"), lr=c["learning_rate"],
                           batch_size=c["batch_size"])
        write_cbow_table(out, model)
        return out

    dh = "with" if variant == "with-dh" else "without"
    corpus_path = ws.corpus_path(dh)
    if not corpus_path.exists():
        raise NotFoundError(f"corpus missing: {corpus_path} (run gen first)")
    corpus = read_corpus(corpus_path)
    _, codec, _, _ = load_world(ws)

    cfg = m.transformer_config(codec.vocab_size)
    bundle = ModelBundle.build(cfg, seed=stream_key(m.seed, "pretrain-init", variant))
    result = pretrain_mlm(bundle, corpus,
                          m.pretrain_config(seed=stream_key(m.seed, "pretrain", variant)))
    result.metrics.write(ws.pretrain_log_path(variant))
    save_bundle(out, bundle, extra={
        "variant": variant,
        "initial_val_loss": result.initial_val_loss,
        "final_val_loss": result.final_val_loss,
        "steps": result.steps,
    })
    return out


# --------------------------------------------------------------- finetune

def _load_pools(ws: Workspace, domains: list[str], split: str):
    pools = {}
    for domain in domains:
        path = ws.data_path(domain, split)
        if not path.exists():
            raise NotFoundError(f"dataset missing: {path} (run gen first)")
        pools[domain] = read_dataset(path)
    return pools


def starting_bundle(ws: Workspace, preset: str, variant: str, size: int, rep: int,
                    vocab_size: int) -> ModelBundle:
    m = ws.manifest
    cfg = m.transformer_config(vocab_size)
    if variant in ("with-dh", "without-dh"):
        path = ws.pretrain_path(variant)
        if not path.exists():
            raise NotFoundError(f"checkpoint missing: {path} (run pretrain first)")
        bundle, _ = load_bundle(path)
        return bundle
    if variant == "from-scratch":
        return ModelBundle.build(cfg, seed=stream_key(m.seed, "scratch-init", preset, size, rep))
    if variant == "cbow-init":
        path = ws.pretrain_path("cbow")
        if not path.exists():
            raise NotFoundError(f"cbow table missing: {path} (run pretrain --variant cbow first)")
        return init_from_cbow(cfg, read_cbow_table(path),
                              seed=stream_key(m.seed, "cbow-init", preset, size, rep))
    if variant == "shuffle-weight":
        path = ws.pretrain_path("with-dh")
        if not path.exists():
            raise NotFoundError(f"checkpoint missing: {path} (run pretrain first)")
        bundle, _ = load_bundle(path)
        return shuffle_weights(bundle, seed=stream_key(m.seed, "shuffle", preset, size, rep))
    raise InvalidArgumentError(f"unknown fine-tune variant {variant!r}")


def _is_probe_cell(m: ExperimentManifest, preset: str, variant: str, rep: int) -> bool:
    p = m.probe
    return preset == p["preset"] and variant == p["variant"] and rep == p["replicate"]


def run_finetune_cell(ws: Workspace, preset: str, variant: str, size: int, rep: int) -> list[dict]:
    """Train and evaluate one cell; returns its result rows (idempotent)."""
    m = ws.manifest
    ws.check_digest()
    if preset not in m.presets:
        raise InvalidArgumentError(f"unknown preset {preset!r}")
    if not any(e.preset == preset and e.variant == variant and size in e.sizes
               for e in m.experiments):
        raise InvalidArgumentError(
            f"cell ({preset}, {variant}, {size}) is not part of this manifest")
    if not 0 <= rep < m.seed_replicates:
        raise InvalidArgumentError(f"seed replicate {rep} out of range")

    cell = ws.cell_dir(preset, variant, size, rep)
    result_path = cell / "result.json"
    if result_path.exists():
        rows = json.loads(result_path.read_text())["rows"]
        merge_results(ws, rows)
        return rows

    mix = m.presets[preset]
    mix_domains = sorted(mix)
    train_pools = _load_pools(ws, mix_domains, "train")
    val_pools = _load_pools(ws, mix_domains, "val")
    test_sets = _load_pools(ws, DOMAINS, "test")
    parts = [(train_pools[d], mix[d]) for d in mix_domains]
    train_set = make_mixture(parts, size, seed=stream_key(m.seed, "mix", preset, size, rep, "train"))
    val_parts = [(val_pools[d], mix[d]) for d in mix_domains]
    val_set = make_mixture(val_parts, m.task["eval_size"],
                           seed=stream_key(m.seed, "mix", preset, size, rep, "val"))

    _, codec, _, _ = load_world(ws)
    bundle = starting_bundle(ws, preset, variant, size, rep, codec.vocab_size)
    cfg = m.finetune_config(seed=stream_key(m.seed, "finetune", preset, variant, size, rep))
    result = fine_tune(bundle, train_set, val_set, cfg)

    rows = []
    for domain in DOMAINS:
        acc = evaluate(result.bundle, test_sets[domain]).accuracy
        rows.append({"preset": preset, "variant": variant, "size": size,
                     "seed": rep, "domain": domain, "accuracy": acc})

    cell.mkdir(parents=True, exist_ok=True)
    result.metrics.write(cell / "metrics.log")
    if _is_probe_cell(m, preset, variant, rep):
        save_bundle(cell / "checkpoint.ckpt", result.bundle,
                    extra={"cell": f"{preset}/{variant}/{size}/s{rep}"})
    _atomic_write(result_path, json.dumps({
        "rows": rows,
        "chosen_epoch": result.chosen_epoch,
        "epochs_run": result.epochs_run,
        "best_val_accuracy": result.best_val_accuracy,
        "train_composition": train_set.meta["mixture"],
    }, indent=1) + "\n")
    merge_results(ws, rows)
    return rows


# ------------------------------------------------------------ result table

def _row_line(r: dict) -> str:
    return (f"{r['preset']},{r['variant']},{r['size']},{r['seed']},"
            f"{r['domain']},{r['accuracy']:.9g}")


def _row_key(r: dict):
    return (r["preset"], r["variant"], r["size"], r["seed"], r["domain"])


def read_results(path: Path) -> list[dict]:
    if not path.exists():
        return []
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != RESULT_HEADER:
            raise ValidationError(f"{path} has unexpected header {header!r}")
        for line in f:
            preset, variant, size, seed, domain, acc = line.strip().split(",")
            rows.append({"preset": preset, "variant": variant, "size": int(size),
                         "seed": int(seed), "domain": domain, "accuracy": float(acc)})
    return rows


def merge_results(ws: Workspace, new_rows: list[dict]) -> None:
    """Fold rows into results.csv, rewriting it sorted, under an exclusive lock.

    Keyed by (preset, variant, size, seed, domain); a rerun of the same cell
    replaces its rows, so the table never grows duplicates.
    """
    path = ws.results_path
    lock_path = path.with_suffix(".csv.lock")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(lock_path, "w") as lock:
        fcntl.flock(lock, fcntl.LOCK_EX)
        table = {_row_key(r): r for r in read_results(path)}
        for r in new_rows:
            table[_row_key(r)] = r
        lines = [RESULT_HEADER] + [_row_line(table[k]) for k in sorted(table)]
        _atomic_write(path, "\n".join(lines) + "\n")


# ------------------------------------------------------------------ probe

def run_probe_cmd(ws: Workspace) -> Path:
    m = ws.manifest
    ws.check_digest()
    out = ws.probe_report_path
    if out.exists():
        return out

    p = m.probe
    pre_path = ws.pretrain_path(p["variant"])
    if not pre_path.exists():
        raise NotFoundError(f"checkpoint missing: {pre_path} (run pretrain first)")
    bundle_pre, _ = load_bundle(pre_path)

    inv, codec, _, _ = load_world(ws)
    anchor_domain = sorted(m.presets[p["preset"]])[0]
    anchor = _load_pools(ws, [anchor_domain], "test")[anchor_domain]
    pairs = build_feature_pairs(inv, codec, anchor, seed=stream_key(m.seed, "probe"))

    sizes = [s for e in m.experiments
             if e.preset == p["preset"] and e.variant == p["variant"] for s in e.sizes]
    checkpoints = []
    for size in sorted(set(sizes)):
        ckpt = ws.cell_dir(p["preset"], p["variant"], size, p["replicate"]) / "checkpoint.ckpt"
        if not ckpt.exists():
            raise NotFoundError(f"fine-tuned checkpoint missing: {ckpt} (run finetune first)")
        bundle_ft, _ = load_bundle(ckpt)
        checkpoints.append((f"{p['variant']}-{size}", bundle_ft, size))
    if not checkpoints:
        raise ValidationError("manifest probe settings select no fine-tune cells")

    reports = run_probe(bundle_pre, checkpoints, pairs, codec, template=p["template"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_probe_reports(out, reports, template=p["template"])
    return out
