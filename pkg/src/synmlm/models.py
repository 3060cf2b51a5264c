"""Transformer encoder with MLM and classification heads, plus the CBOW
baseline, embedding transfer, and the per-tensor weight shuffle.

Input layout is [CLS] + rendered tokens (+ [PAD]); the classifier reads
only the CLS position. Attention masking is additive (-1e9 on pad keys),
the MLM head is untied from the input embedding, and the classifier head
starts at zero so an untrained model emits exactly [0.5, 0.5].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ParamStore, Tensor
from .errors import InvalidArgumentError
from .seeding import rng_for
from .synlang import CLS_ID, NUM_SPECIALS, PAD_ID, Corpus

ATTN_MASK_VALUE = -1e9
INIT_STD = 0.02


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int
    num_layers: int = 6
    num_heads: int = 12
    model_dim: int = 384
    ff_dim: int = 1536
    max_positions: int = 257
    dropout: float = 0.1

    def validate(self) -> None:
        if self.model_dim % self.num_heads != 0:
            raise InvalidArgumentError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.vocab_size <= NUM_SPECIALS:
            raise InvalidArgumentError("vocab_size must exceed the special tokens")
        if self.max_positions < 2:
            raise InvalidArgumentError("max_positions must fit CLS plus one token")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgumentError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class ModelBundle:
    """Parameter store plus the forward passes that read it."""

    def __init__(self, config: TransformerConfig, store: ParamStore):
        config.validate()
        self.config = config
        self.store = store

    # ---------------------------------------------------------------- init

    @classmethod
    def build(cls, config: TransformerConfig, seed: int, dtype=np.float32) -> "ModelBundle":
        config.validate()
        store = ParamStore(dtype=dtype)

        def normal(name, shape):
            store.add(name, rng_for(seed, "init", name).normal(0.0, INIT_STD, shape))

        normal("tok_emb", (config.vocab_size, config.model_dim))
        normal("pos_emb", (config.max_positions, config.model_dim))
        store.add("ln_emb.gamma", np.ones(config.model_dim))
        store.add("ln_emb.beta", np.zeros(config.model_dim))
        for i in range(config.num_layers):
            p = f"layer{i}."
            for w in ("q", "k", "v", "o"):
                normal(p + f"attn.{w}.w", (config.model_dim, config.model_dim))
                store.add(p + f"attn.{w}.b", np.zeros(config.model_dim))
            store.add(p + "ln1.gamma", np.ones(config.model_dim))
            store.add(p + "ln1.beta", np.zeros(config.model_dim))
            normal(p + "ff.w1", (config.model_dim, config.ff_dim))
            store.add(p + "ff.b1", np.zeros(config.ff_dim))
            normal(p + "ff.w2", (config.ff_dim, config.model_dim))
            store.add(p + "ff.b2", np.zeros(config.model_dim))
            store.add(p + "ln2.gamma", np.ones(config.model_dim))
            store.add(p + "ln2.beta", np.zeros(config.model_dim))
        normal("mlm_head.w", (config.model_dim, config.vocab_size))
        store.add("mlm_head.b", np.zeros(config.vocab_size))
        store.add("cls_head.w", np.zeros((config.model_dim, 2)))
        store.add("cls_head.b", np.zeros(2))
        return cls(config, store)

    # ------------------------------------------------------------- forward

    def encode(self, token_batch: np.ndarray, train_rng: np.random.Generator | None = None) -> Tensor:
        """Hidden states (B, T, D); train_rng enables dropout."""
        tokens = np.asarray(token_batch)
        if tokens.ndim != 2:
            raise InvalidArgumentError("token batch must be (batch, positions)")
        B, T = tokens.shape
        if T > self.config.max_positions:
            raise InvalidArgumentError(
                f"sequence length {T} exceeds max_positions {self.config.max_positions}"
            )
        s = self.store
        cfg = self.config
        head_dim = cfg.model_dim // cfg.num_heads
        inv_sqrt = 1.0 / np.sqrt(head_dim)

        pad_mask = np.where(tokens == PAD_ID, ATTN_MASK_VALUE, 0.0)
        pad_bias = Tensor(pad_mask[:, None, None, :].astype(s.dtype))

        def drop(t: Tensor) -> Tensor:
            return ad.dropout(t, cfg.dropout, train_rng) if train_rng is not None else t

        x = ad.embedding(s["tok_emb"], tokens) + ad.embedding(
            s["pos_emb"], np.broadcast_to(np.arange(T), (B, T))
        )
        x = drop(ad.layer_norm(x, s["ln_emb.gamma"], s["ln_emb.beta"]))

        for i in range(cfg.num_layers):
            p = f"layer{i}."

            def split(t: Tensor) -> Tensor:
                return t.reshape(B, T, cfg.num_heads, head_dim).transpose((0, 2, 1, 3))

            q = split(x @ s[p + "attn.q.w"] + s[p + "attn.q.b"])
            k = split(x @ s[p + "attn.k.w"] + s[p + "attn.k.b"])
            v = split(x @ s[p + "attn.v.w"] + s[p + "attn.v.b"])
            scores = ad.scale(q @ k.transpose((0, 1, 3, 2)), inv_sqrt) + pad_bias
            ctx = ad.softmax(scores) @ v
            ctx = ctx.transpose((0, 2, 1, 3)).reshape(B, T, cfg.model_dim)
            attn_out = drop(ctx @ s[p + "attn.o.w"] + s[p + "attn.o.b"])
            x = ad.layer_norm(x + attn_out, s[p + "ln1.gamma"], s[p + "ln1.beta"])

            h = ad.gelu(x @ s[p + "ff.w1"] + s[p + "ff.b1"])
            ff_out = drop(h @ s[p + "ff.w2"] + s[p + "ff.b2"])
            x = ad.layer_norm(x + ff_out, s[p + "ln2.gamma"], s[p + "ln2.beta"])
        return x

    def mlm_logits(self, token_batch, batch_idx, pos_idx, train_rng=None) -> Tensor:
        h = self.encode(token_batch, train_rng)
        rows = ad.gather_rows(h, batch_idx, pos_idx)
        return rows @ self.store["mlm_head.w"] + self.store["mlm_head.b"]

    def cls_logits(self, token_batch, train_rng=None) -> Tensor:
        h = self.encode(token_batch, train_rng)
        B = h.shape[0]
        cls_rows = ad.gather_rows(h, np.arange(B), np.zeros(B, dtype=np.int64))
        return cls_rows @ self.store["cls_head.w"] + self.store["cls_head.b"]


def forward_mlm(bundle: ModelBundle, token_batch, batch_idx, pos_idx) -> np.ndarray:
    """Probability rows over the vocabulary at the requested positions."""
    return ad.softmax(bundle.mlm_logits(token_batch, batch_idx, pos_idx)).data


def forward_cls(bundle: ModelBundle, token_batch) -> np.ndarray:
    """Binary class distributions, one row per batch element."""
    return ad.softmax(bundle.cls_logits(token_batch)).data


def pad_batch(token_lists, length: int | None = None) -> np.ndarray:
    """[CLS] + tokens + [PAD]* as a dense (B, T) int32 matrix."""
    seqs = [np.asarray(t) for t in token_lists]
    longest = max((len(s) for s in seqs), default=0)
    if length is None:
        length = longest + 1
    elif length < longest + 1:
        raise InvalidArgumentError(f"length {length} too short for batch of {longest} tokens")
    out = np.full((len(seqs), length), PAD_ID, dtype=np.int32)
    out[:, 0] = CLS_ID
    for i, s in enumerate(seqs):
        out[i, 1 : 1 + len(s)] = s
    return out


# ------------------------------------------------------------- checkpoints

def save_bundle(path: str | Path, bundle: ModelBundle, optimizer: Adam | None = None,
                extra: dict | None = None) -> None:
    ad.save_checkpoint(path, {"transformer": bundle.config.to_dict()}, bundle.store,
                       optimizer=optimizer, extra=extra)


def load_bundle(path: str | Path) -> tuple[ModelBundle, dict]:
    loaded = ad.load_checkpoint(path)
    if "transformer" not in loaded["config"]:
        raise InvalidArgumentError(f"{path} is not a transformer checkpoint")
    config = TransformerConfig(**loaded["config"]["transformer"])
    store = ParamStore(dtype=np.dtype(loaded["dtype"]).type)
    for name, arr in loaded["arrays"].items():
        store.add(name, arr)
    return ModelBundle(config, store), loaded["extra"]


# ------------------------------------------------------------------- cbow

@dataclass
class CbowModel:
    dim: int
    window: int
    vocab_size: int
    w_in: np.ndarray  # (vocab, dim)
    w_out: np.ndarray  # (dim, vocab)


def train_cbow(corpus: Corpus, window: int, dim: int, epochs: int, seed: int,
               lr: float = 0.5, batch_size: int = 64) -> CbowModel:
    """Full-softmax CBOW over the rendered token sequences.

    The context of a position is every token within `window` on either
    side, excluding the center. Context sums come from prefix sums and the
    input-embedding scatter reuses the same rolling trick, so one batch is
    a handful of dense ops. Sequences are grouped by rendered length so
    batches stay rectangular.
    """
    if window < 1:
        raise InvalidArgumentError("window must be >= 1")
    if not corpus.records:
        raise InvalidArgumentError("corpus is empty")
    vocab = int(max(r.token_ids.max() for r in corpus.records)) + 1
    rng = rng_for(seed, "cbow")
    w_in = rng.normal(0.0, 0.5 / dim, (vocab, dim)).astype(np.float32)
    w_out = np.zeros((dim, vocab), dtype=np.float32)

    by_len: dict[int, list[np.ndarray]] = {}
    for r in corpus.records:
        by_len.setdefault(len(r.token_ids), []).append(r.token_ids)
    grouped = [np.stack(group) for group in by_len.values()]

    for epoch in range(epochs):
        batches = []
        for g in grouped:
            perm = rng.permutation(len(g))
            batches.extend(g[perm[i : i + batch_size]]
                           for i in range(0, len(g), batch_size))
        order = rng.permutation(len(batches))
        for bi in order:
            toks = batches[bi]
            B, T = toks.shape
            emb = w_in[toks]  # (B, T, dim)
            csum = np.zeros((B, T + 1, dim), dtype=np.float32)
            np.cumsum(emb, axis=1, out=csum[:, 1:])
            lo = np.maximum(np.arange(T) - window, 0)
            hi = np.minimum(np.arange(T) + window + 1, T)
            ctx_sum = csum[:, hi] - csum[:, lo] - emb
            cnt = (hi - lo - 1).astype(np.float32)
            keep = cnt > 0
            h = ctx_sum / np.maximum(cnt, 1.0)[None, :, None]

            h2 = h.reshape(B * T, dim)
            logits = h2 @ w_out
            z = logits - logits.max(axis=-1, keepdims=True)
            e = np.exp(z)
            p = e / e.sum(axis=-1, keepdims=True)
            flat = toks.reshape(-1)
            p[np.arange(B * T), flat] -= 1.0
            p[np.broadcast_to(~keep, (B, T)).reshape(-1)] = 0.0
            total = int(keep.sum()) * B

            g_out = h2.T @ p / total
            g_h = (p @ w_out.T).reshape(B, T, dim) / total
            r = g_h / np.maximum(cnt, 1.0)[None, :, None]
            rsum = np.zeros((B, T + 1, dim), dtype=np.float32)
            np.cumsum(r, axis=1, out=rsum[:, 1:])
            # token j feeds every center whose window covers j; scatter-add
            # per token id via a one-hot matmul (BLAS beats np.add.at here)
            g_tok = (rsum[:, hi] - rsum[:, lo] - r).reshape(B * T, dim)
            onehot = np.zeros((B * T, vocab), dtype=np.float32)
            onehot[np.arange(B * T), flat] = 1.0
            g_in = onehot.T @ g_tok

            w_out -= lr * g_out
            w_in -= lr * g_in
    return CbowModel(dim=dim, window=window, vocab_size=vocab, w_in=w_in, w_out=w_out)


def cbow_nearest_neighbor_accuracy(cbow: CbowModel, inv, codec) -> float:
    """Fraction of synsets whose a-feature token's cosine nearest neighbor
    (over all feature tokens) is its own b-feature token. Single-token
    codecs only."""
    if codec.mode != "single":
        raise InvalidArgumentError("nearest-neighbor sweep expects a single-token codec")
    feat_tokens = np.array([codec.token_map[f][0] for f in range(2 * inv.n)])
    vecs = cbow.w_in[feat_tokens]
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    unit = vecs / np.maximum(norms, 1e-12)
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)
    tok_to_row = {int(t): i for i, t in enumerate(feat_tokens)}
    hits = 0
    for a, b in inv.synsets:
        ra, rb = tok_to_row[codec.token_map[a][0]], tok_to_row[codec.token_map[b][0]]
        if sims[ra].argmax() == rb:
            hits += 1
    return hits / inv.n


def init_from_cbow(config: TransformerConfig, cbow: CbowModel, seed: int) -> ModelBundle:
    """Fresh random transformer whose token embedding rows come from CBOW.

    Token ids CBOW never saw (the specials, and any id past its vocab)
    keep their random initialization.
    """
    if cbow.dim != config.model_dim:
        raise InvalidArgumentError(
            f"cbow dim {cbow.dim} != model_dim {config.model_dim}"
        )
    bundle = ModelBundle.build(config, seed)
    emb = bundle.store["tok_emb"].data
    upto = min(cbow.vocab_size, config.vocab_size)
    emb[NUM_SPECIALS:upto] = cbow.w_in[NUM_SPECIALS:upto]
    return bundle


CBOW_TABLE_FORMAT = "synmlm-cbow-table"


def write_cbow_table(path: str | Path, cbow: CbowModel) -> None:
    """Plain text: header line, then `token_id v1 v2 ...` per row. %.9g
    round-trips float32 exactly."""
    with open(path, "w") as f:
        f.write(f"# {CBOW_TABLE_FORMAT} dim={cbow.dim} window={cbow.window} "
                f"vocab={cbow.vocab_size}\n")
        for tok in range(cbow.vocab_size):
            vals = " ".join(f"{v:.9g}" for v in cbow.w_in[tok])
            f.write(f"{tok} {vals}\n")


def read_cbow_table(path: str | Path) -> CbowModel:
    with open(path) as f:
        header = f.readline().split()
        if len(header) < 2 or header[1] != CBOW_TABLE_FORMAT:
            raise InvalidArgumentError(f"{path} is not a cbow table")
        fields = dict(kv.split("=") for kv in header[2:])
        dim, window, vocab = int(fields["dim"]), int(fields["window"]), int(fields["vocab"])
        w_in = np.zeros((vocab, dim), dtype=np.float32)
        for line in f:
            parts = line.split()
            w_in[int(parts[0])] = np.array(parts[1:], dtype=np.float32)
    return CbowModel(dim=dim, window=window, vocab_size=vocab, w_in=w_in,
                     w_out=np.zeros((dim, vocab), dtype=np.float32))


# ----------------------------------------------------------------- shuffle

def shuffle_weights(bundle: ModelBundle, seed: int) -> ModelBundle:
    """Permute each parameter tensor's elements uniformly, preserving its
    shape and value multiset."""
    store = ParamStore(dtype=bundle.store.dtype)
    for name, p in bundle.store.items():
        flat = p.data.reshape(-1)
        perm = rng_for(seed, "shuffle", name).permutation(flat.size)
        store.add(name, flat[perm].reshape(p.data.shape))
    return ModelBundle(bundle.config, store)
