"""Experiment manifests: one JSON file that pins every knob of a run.

The manifest is the reproducibility boundary. Every artifact (corpora,
datasets, checkpoints, result rows) is derived from the manifest plus its
global seed through named RNG streams, so two runs of the same manifest
agree byte for byte. Validation is strict: missing or unknown fields fail
with their dotted paths listed, since a silently ignored typo would break
that guarantee.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError
from .models import TransformerConfig
from .probing import render_template
from .tasks import DOMAINS
from .training import FinetuneConfig, PretrainConfig

MANIFEST_FORMAT = "synmlm-manifest"
MANIFEST_VERSION = 1

FT_VARIANTS = ("with-dh", "without-dh", "from-scratch", "cbow-init", "shuffle-weight")
PRETRAIN_VARIANTS = ("with-dh", "without-dh", "cbow")


def _check_int(lo=None, hi=None):
    def check(v):
        if not isinstance(v, int) or isinstance(v, bool):
            raise ValueError("expected an integer")
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}")
        if hi is not None and v > hi:
            raise ValueError(f"must be <= {hi}")
        return v
    return check


def _check_float(lo=None, hi=None):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError("expected a number")
        v = float(v)
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}")
        if hi is not None and v > hi:
            raise ValueError(f"must be <= {hi}")
        return v
    return check


def _check_choice(*options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {options}")
        return v
    return check


def _check_name(v):
    if not isinstance(v, str) or not v:
        raise ValueError("expected a nonempty string")
    if not all(c.isalnum() or c == "-" for c in v) or v != v.lower():
        raise ValueError("use lowercase letters, digits, and dashes")
    return v


def _section(raw: dict, path: str, schema: dict, errors: list[str]) -> dict:
    """Validate one dict level against {field: checker}; collects dotted
    error paths instead of raising so one pass reports everything."""
    if not isinstance(raw, dict):
        errors.append(f"{path}: expected an object")
        return {}
    out = {}
    for key, checker in schema.items():
        if key not in raw:
            errors.append(f"{path}.{key}: missing")
            continue
        try:
            out[key] = checker(raw[key])
        except ValueError as e:
            errors.append(f"{path}.{key}: {e}")
    for key in raw:
        if key not in schema:
            errors.append(f"{path}.{key}: unknown field")
    return out


_SCHEMAS = {
    "language": {
        "num_synsets": _check_int(lo=2),
        "codec_mode": _check_choice("single", "multi"),
        "vocab_sharing": _check_choice("separate", "shared"),
    },
    "corpus": {
        "num_sequences": _check_int(lo=2),
        "length": _check_int(lo=2),
    },
    "patterns": {
        "num_patterns": _check_int(lo=1),
        "set_size": _check_int(lo=1),
    },
    "task": {
        "length": _check_int(lo=3),
        "eval_size": _check_int(lo=1),
    },
    "model": {
        "num_layers": _check_int(lo=1),
        "num_heads": _check_int(lo=1),
        "model_dim": _check_int(lo=1),
        "ff_dim": _check_int(lo=1),
        "max_positions": _check_int(lo=2),
        "dropout": _check_float(lo=0.0, hi=0.999),
    },
    "pretrain": {
        "epochs": _check_int(lo=1),
        "batch_size": _check_int(lo=1),
        "learning_rate": _check_float(lo=0.0),
        "mask_rate": _check_float(lo=0.001, hi=0.999),
        "val_count": _check_int(lo=1),
    },
    "cbow": {
        "window": _check_int(lo=1),
        "dim": _check_int(lo=1),
        "epochs": _check_int(lo=1),
        "learning_rate": _check_float(lo=0.0),
        "batch_size": _check_int(lo=1),
    },
    "finetune": {
        "max_epochs": _check_int(lo=1),
        "batch_size": _check_int(lo=1),
        "learning_rate": _check_float(lo=0.0),
        "patience": _check_int(lo=1),
    },
    "probe": {
        "preset": _check_name,
        # d_f0 interrogates the pretrained MLM, so only those variants qualify
        "variant": _check_choice("with-dh", "without-dh"),
        "replicate": _check_int(lo=0),
        "template": lambda v: v if isinstance(v, str) else _fail("expected a string"),
    },
}


def _fail(msg):
    raise ValueError(msg)


@dataclass(frozen=True)
class Experiment:
    preset: str
    variant: str
    sizes: tuple[int, ...]


@dataclass(frozen=True)
class ExperimentManifest:
    name: str
    seed: int
    language: dict
    corpus: dict
    patterns: dict
    task: dict
    model: dict
    pretrain: dict
    cbow: dict
    finetune: dict
    presets: dict[str, dict[str, float]]
    size_grid: tuple[int, ...]
    seed_replicates: int
    experiments: tuple[Experiment, ...]
    probe: dict
    raw: dict = field(repr=False, default_factory=dict)

    # ---- derived configs ------------------------------------------------

    def transformer_config(self, vocab_size: int) -> TransformerConfig:
        return TransformerConfig(vocab_size=vocab_size, **self.model)

    def pretrain_config(self, seed: int) -> PretrainConfig:
        p = self.pretrain
        return PretrainConfig(epochs=p["epochs"], batch_size=p["batch_size"],
                              lr=p["learning_rate"], mask_rate=p["mask_rate"],
                              val_count=p["val_count"], seed=seed)

    def finetune_config(self, seed: int) -> FinetuneConfig:
        f = self.finetune
        return FinetuneConfig(max_epochs=f["max_epochs"], batch_size=f["batch_size"],
                              lr=f["learning_rate"], patience=f["patience"], seed=seed)

    def max_train_size(self) -> int:
        return max(s for e in self.experiments for s in e.sizes)

    def cells(self):
        """Every (preset, variant, size, replicate) cell, in manifest order."""
        for e in self.experiments:
            for size in e.sizes:
                for rep in range(self.seed_replicates):
                    yield e.preset, e.variant, size, rep

    def digest(self) -> str:
        """Stable content hash used to detect stale artifact trees."""
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def validate_manifest(raw: dict) -> ExperimentManifest:
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ValidationError("manifest must be a JSON object", ["<root>"])

    top_known = {"format", "version", "name", "seed", "language", "corpus", "patterns",
                 "task", "model", "pretrain", "cbow", "finetune", "presets",
                 "size_grid", "seed_replicates", "experiments", "probe"}
    for key in raw:
        if key not in top_known:
            errors.append(f"{key}: unknown field")
    for key in top_known:
        if key not in raw:
            errors.append(f"{key}: missing")

    if raw.get("format") not in (None, MANIFEST_FORMAT):
        errors.append(f"format: expected {MANIFEST_FORMAT!r}")
    if raw.get("version") not in (None, MANIFEST_VERSION):
        errors.append(f"version: expected {MANIFEST_VERSION}")

    name = raw.get("name", "")
    try:
        name = _check_name(name)
    except ValueError as e:
        errors.append(f"name: {e}")
    try:
        seed = _check_int(lo=0)(raw.get("seed", None))
    except ValueError as e:
        errors.append(f"seed: {e}")
        seed = 0

    sections = {key: _section(raw.get(key, {}), key, schema, errors)
                for key, schema in _SCHEMAS.items()}

    presets = raw.get("presets", {})
    if not isinstance(presets, dict) or not presets:
        errors.append("presets: expected a nonempty object")
        presets = {}
    clean_presets: dict[str, dict[str, float]] = {}
    for pname, mix in presets.items():
        try:
            _check_name(pname)
        except ValueError as e:
            errors.append(f"presets.{pname}: {e}")
            continue
        if not isinstance(mix, dict) or not mix:
            errors.append(f"presets.{pname}: expected a nonempty object")
            continue
        ok = True
        for domain, frac in mix.items():
            if domain not in DOMAINS:
                errors.append(f"presets.{pname}.{domain}: unknown domain")
                ok = False
            elif isinstance(frac, bool) or not isinstance(frac, (int, float)) or not 0 < frac <= 1:
                errors.append(f"presets.{pname}.{domain}: fraction must be in (0, 1]")
                ok = False
        if ok and abs(sum(mix.values()) - 1.0) > 1e-9:
            errors.append(f"presets.{pname}: fractions must sum to 1")
            ok = False
        if ok:
            clean_presets[pname] = {d: float(f) for d, f in mix.items()}

    grid = raw.get("size_grid", [])
    if (not isinstance(grid, list) or not grid
            or any(isinstance(s, bool) or not isinstance(s, int) or s < 1 for s in grid)
            or sorted(set(grid)) != grid):
        errors.append("size_grid: expected strictly increasing positive integers")
        grid = []

    try:
        replicates = _check_int(lo=1)(raw.get("seed_replicates", None))
    except ValueError as e:
        errors.append(f"seed_replicates: {e}")
        replicates = 1

    experiments: list[Experiment] = []
    raw_exps = raw.get("experiments", [])
    if not isinstance(raw_exps, list) or not raw_exps:
        errors.append("experiments: expected a nonempty list")
        raw_exps = []
    for i, e in enumerate(raw_exps):
        cell = _section(e, f"experiments[{i}]", {
            "preset": _check_name,
            "variant": _check_choice(*FT_VARIANTS),
            "sizes": lambda v: v,
        }, errors)
        if len(cell) < 3:
            continue
        if cell["preset"] not in clean_presets:
            errors.append(f"experiments[{i}].preset: no preset named {cell['preset']!r}")
            continue
        sizes = cell["sizes"]
        if not isinstance(sizes, list) or not sizes or any(s not in grid for s in sizes):
            errors.append(f"experiments[{i}].sizes: every size must come from size_grid")
            continue
        experiments.append(Experiment(cell["preset"], cell["variant"], tuple(sizes)))

    probe = sections.get("probe", {})
    if probe:
        if probe.get("preset") not in clean_presets:
            errors.append("probe.preset: not a defined preset")
        if probe.get("replicate", 0) >= replicates:
            errors.append("probe.replicate: must be < seed_replicates")
        if "template" in probe:
            try:
                render_template(probe["template"], (0,))
            except Exception as e:
                errors.append(f"probe.template: {e}")

    # cross-field checks only make sense once the pieces parsed
    if not errors:
        lang, model, corpus, task = (sections["language"], sections["model"],
                                     sections["corpus"], sections["task"])
        if lang["codec_mode"] == "single" and lang["vocab_sharing"] == "shared":
            errors.append("language.vocab_sharing: single-token features cannot share a vocabulary")
        if model["model_dim"] % model["num_heads"] != 0:
            errors.append("model.model_dim: must be divisible by model.num_heads")
        # +1 for [CLS]; multi-token features can spend up to 3 tokens per synset
        per = 1 if lang["codec_mode"] == "single" else 3
        need = max(corpus["length"], task["length"]) * per + 1
        if model["max_positions"] < need:
            errors.append(f"model.max_positions: must be >= {need} for these sequence lengths")
        if corpus["num_sequences"] <= sections["pretrain"]["val_count"]:
            errors.append("pretrain.val_count: must be smaller than corpus.num_sequences")
        if sections["patterns"]["set_size"] > lang["num_synsets"]:
            errors.append("patterns.set_size: cannot exceed language.num_synsets")
        if any(e.variant == "cbow-init" for e in experiments) \
                and sections["cbow"]["dim"] != model["model_dim"]:
            errors.append("cbow.dim: must equal model.model_dim to initialize the embedding")

    if errors:
        raise ValidationError(
            "invalid manifest: " + "; ".join(sorted(errors)), sorted(errors)
        )

    return ExperimentManifest(
        name=name, seed=seed,
        language=sections["language"], corpus=sections["corpus"],
        patterns=sections["patterns"], task=sections["task"],
        model=sections["model"], pretrain=sections["pretrain"],
        cbow=sections["cbow"], finetune=sections["finetune"],
        presets=clean_presets, size_grid=tuple(grid),
        seed_replicates=replicates, experiments=tuple(experiments),
        probe=probe, raw=raw,
    )


def load_manifest(path: str | Path) -> ExperimentManifest:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest file {path} does not exist", [str(path)])
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"manifest {path} is not valid JSON: {e}", [str(path)]) from e
    return validate_manifest(raw)
