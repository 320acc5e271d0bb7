"""A small pre-LayerNorm decoder-only transformer with editable FFN memories.

Each block's feed-forward net is bias-free, ``m = W · f(W_in · h)``, so the
hidden activation ``f(W_in · h)`` is the key and ``W`` (shape
``d_model x ffn_inner``) maps keys to values. Linear maps are stored as
``(out, in)`` matrices throughout.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

BOS, PAD, EOS = "<s>", "<pad>", "."
CHECKPOINT_VERSION = "1"


class TokenizationError(ValueError):
    pass


class TrainingDiverged(ArithmeticError):
    pass


class Tokenizer:
    """Whitespace word tokenizer over a closed vocabulary."""

    def __init__(self, vocab: Sequence[str]):
        self.vocab = tuple(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ValueError("duplicate vocabulary entries")

    @classmethod
    def from_words(cls, words) -> "Tokenizer":
        specials = [PAD, BOS, EOS]
        return cls(specials + sorted(set(words) - set(specials)))

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def pad(self) -> int:
        return self.index[PAD]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    def encode(self, text: str | Sequence[str], bos: bool = False) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        try:
            ids = [self.index[w] for w in words]
        except KeyError as exc:
            raise TokenizationError(f"unknown token {exc.args[0]!r}") from None
        return [self.bos] + ids if bos else ids

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.vocab[i] for i in ids if i not in (self.bos, self.pad))


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 8
    n_heads: int = 4
    ffn_inner: int = 512
    activation: str = "gelu"
    max_seq_len: int = 48
    local_layers: int = 0
    local_window: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.local_layers <= self.n_layers:
            raise ValueError("local_layers must lie in [0, n_layers]")
        if self.local_window < 1:
            raise ValueError("local_window must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.ffn_inner < self.d_model:
            raise ValueError("ffn_inner must be >= d_model")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")


def weight_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.ffn_inner
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_seq_len, d)}
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d), p + "attn.wv": (d, d), p + "attn.wo": (d, d),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "ffn.w_in": (f, d), p + "ffn.w_out": (d, f),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "unembed": (cfg.vocab_size, d)})
    return shapes


def ffn_weight_name(layer: int) -> str:
    return f"blocks.{layer}.ffn.w_out"


def init_weights(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    out = {}
    for name, shape in weight_shapes(cfg).items():
        if name.endswith(".g"):
            w = np.ones(shape)
        elif name.endswith(".b"):
            w = np.zeros(shape)
        else:
            std = 0.02
            if name.endswith(("attn.wo", "ffn.w_out")):
                std /= math.sqrt(2 * cfg.n_layers)
            w = rng.normal(0.0, std, size=shape)
        out[name] = w.astype(np.float32)
    return out


@dataclass(frozen=True)
class Checkpoint:
    """Config, weights and vocabulary. Treat as immutable; patching returns a copy."""

    config: ModelConfig
    weights: dict[str, np.ndarray]
    vocab: tuple[str, ...]
    version: str = CHECKPOINT_VERSION

    def __post_init__(self):
        shapes = weight_shapes(self.config)
        if set(shapes) != set(self.weights):
            raise ValueError("weight names do not match the config")
        for k, shape in shapes.items():
            if self.weights[k].shape != shape:
                raise ValueError(f"{k}: shape {self.weights[k].shape} != {shape}")
            self.weights[k].flags.writeable = False

    @property
    def tokenizer(self) -> Tokenizer:
        return Tokenizer(self.vocab)

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.weights):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.weights[k], dtype="<f4").tobytes())
        return h.hexdigest()

    def save(self, directory) -> Path:
        """Write ``manifest.json`` plus a little-endian f32 ``weights.bin``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        table, offset, chunks = {}, 0, []
        for k in sorted(self.weights):
            arr = np.ascontiguousarray(self.weights[k], dtype="<f4")
            table[k] = {"shape": list(arr.shape), "offset": offset}
            offset += arr.size
            chunks.append(arr.reshape(-1))
        (directory / "weights.bin").write_bytes(np.concatenate(chunks).tobytes())
        manifest = {"format": self.version, "config": asdict(self.config), "tensors": table,
                    "vocab": list(self.vocab)}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
        return directory

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        if manifest.get("format") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
        blob = np.frombuffer((directory / "weights.bin").read_bytes(), dtype="<f4")
        weights = {}
        for k, entry in manifest["tensors"].items():
            size = int(np.prod(entry["shape"]))
            weights[k] = blob[entry["offset"]: entry["offset"] + size].reshape(entry["shape"]).astype(np.float32)
        return cls(ModelConfig(**manifest["config"]), weights, tuple(manifest["vocab"]))


def new_model(cfg: ModelConfig, tokenizer: Tokenizer) -> Checkpoint:
    if cfg.vocab_size != len(tokenizer):
        raise ValueError("config vocab_size differs from the tokenizer")
    return Checkpoint(cfg, init_weights(cfg), tokenizer.vocab)


def patch_ffn_weight(model: Checkpoint, layer: int, new_w: np.ndarray) -> Checkpoint:
    """Copy of ``model`` whose layer-``layer`` value matrix is ``new_w``."""
    if not 0 <= layer < model.config.n_layers:
        raise IndexError(f"layer {layer} out of range")
    name = ffn_weight_name(layer)
    new_w = np.asarray(new_w, dtype=np.float32)
    if new_w.shape != model.weights[name].shape:
        raise ad.DimensionError(f"new weight shape {new_w.shape} != {model.weights[name].shape}")
    weights = dict(model.weights)
    weights[name] = new_w.copy()
    return Checkpoint(model.config, weights, model.vocab, model.version)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

@dataclass
class HiddenTrace:
    """Per-layer activations, each ``(batch, seq, dim)``."""

    ffn_input: list[np.ndarray] = field(default_factory=list)
    keys: list[np.ndarray] = field(default_factory=list)
    ffn_output: list[np.ndarray] = field(default_factory=list)
    resid: list[np.ndarray] = field(default_factory=list)
    attn_out: list[np.ndarray] = field(default_factory=list)


def _act(cfg: ModelConfig):
    return ad.gelu if cfg.activation == "gelu" else ad.relu


def _linear(x, w):
    return ad.matmul(x, ad.transpose(w))


def _causal_mask(t: int, dtype, window: int = 0) -> np.ndarray:
    """Additive mask; ``window > 0`` also hides keys more than ``window - 1`` back."""
    mask = np.triu(np.full((t, t), -1e9, dtype=dtype), k=1)
    if window:
        mask += np.tril(np.full((t, t), -1e9, dtype=dtype), k=-window)
    return mask


class _Runner:
    """Evaluates blocks for a given parameter mapping (arrays or tracked tensors)."""

    def __init__(self, cfg: ModelConfig, params):
        self.cfg = cfg
        self.p = params
        self.act = _act(cfg)

    def embed(self, ids: np.ndarray):
        t = ids.shape[1]
        if t > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        pos = ad.getitem(self.p["pos_emb"], slice(0, t))
        return ad.add(ad.embedding(self.p["tok_emb"], ids), pos)

    def attention(self, x, i: int):
        cfg, p = self.cfg, self.p
        pre = f"blocks.{i}."
        b, t, d = x.shape
        h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        a = ad.layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])

        def heads(w):
            return ad.transpose(ad.reshape(_linear(a, p[pre + w]), (b, t, h, dh)), (0, 2, 1, 3))

        q, k, v = heads("attn.wq"), heads("attn.wk"), heads("attn.wv")
        scores = ad.add(ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh)),
                        _causal_mask(t, x.dtype, cfg.local_window if i < cfg.local_layers else 0))
        ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return _linear(ctx, p[pre + "attn.wo"])

    def ffn(self, x, i: int):
        pre = f"blocks.{i}."
        hin = ad.layernorm(x, self.p[pre + "ln2.g"], self.p[pre + "ln2.b"])
        keys = self.act(_linear(hin, self.p[pre + "ffn.w_in"]))
        return hin, keys, _linear(keys, self.p[pre + "ffn.w_out"])

    def head(self, x):
        x = ad.layernorm(x, self.p["ln_f.g"], self.p["ln_f.b"])
        return _linear(x, self.p["unembed"])

    def blocks(self, x, start: int, stop: int, trace: HiddenTrace | None = None, subst=None):
        for i in range(start, stop):
            mid = ad.add(x, self.attention(x, i))
            hin, keys, m = self.ffn(mid, i)
            if subst is not None and subst[0] == i:
                m = ad.put_rows(m, subst[1], subst[2])
            x = ad.add(mid, m)
            if trace is not None:
                trace.attn_out.append(mid.data)
                trace.ffn_input.append(hin.data)
                trace.keys.append(keys.data)
                trace.ffn_output.append(m.data)
                trace.resid.append(x.data)
        return x


def pad_batch(seqs: Sequence[Sequence[int]], pad: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a ``(batch, max_len)`` id array; also return lengths."""
    lengths = np.array([len(s) for s in seqs])
    out = np.full((len(seqs), int(lengths.max())), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def _as_batch(tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    return ids[None, :] if ids.ndim == 1 else ids


def _check_ids(model: Checkpoint, ids: np.ndarray) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        raise TokenizationError("token id outside the vocabulary")


def forward_logits(model: Checkpoint, tokens) -> np.ndarray:
    ids = _as_batch(tokens)
    _check_ids(model, ids)
    run = _Runner(model.config, model.weights)
    x = run.blocks(run.embed(ids), 0, model.config.n_layers)
    return run.head(x).data


def forward_with_trace(model: Checkpoint, tokens) -> tuple[np.ndarray, HiddenTrace]:
    """Next-token distributions per position plus the per-layer trace.

    ``tokens`` may be one sequence or a padded batch; outputs keep the batch
    axis only when the input had one.
    """
    ids = _as_batch(tokens)
    _check_ids(model, ids)
    run = _Runner(model.config, model.weights)
    trace = HiddenTrace()
    x = run.blocks(run.embed(ids), 0, model.config.n_layers, trace=trace)
    probs = ad.softmax(run.head(x), axis=-1).data
    if np.asarray(tokens).ndim == 1:
        probs = probs[0]
        trace = HiddenTrace(*[[a[0] for a in arrs] for arrs in
                              (trace.ffn_input, trace.keys, trace.ffn_output, trace.resid, trace.attn_out)])
    return probs, trace


def hidden_at_layer(model: Checkpoint, tokens, layer: int) -> np.ndarray:
    """Residual-stream output of block ``layer`` at the last position."""
    if not 0 <= layer < model.config.n_layers:
        raise IndexError(f"layer {layer} out of range")
    ids = _as_batch(tokens)
    _check_ids(model, ids)
    run = _Runner(model.config, model.weights)
    x = run.blocks(run.embed(ids), 0, layer + 1)
    return np.array(x.data[0, -1])


class SubstitutionSite:
    """Pre-computed prefix of the network for repeated FFN-output substitution.

    Blocks below ``layer`` and the attention half of block ``layer`` depend
    only on the tokens, so they run once. :meth:`logits` then evaluates the
    remainder with ``ffn_output[rows] := replacement``; under an active tape
    the result is differentiable w.r.t. the replacement.
    """

    def __init__(self, model: Checkpoint, ids: np.ndarray, layer: int):
        if not 0 <= layer < model.config.n_layers:
            raise IndexError(f"layer {layer} out of range")
        _check_ids(model, ids)
        self.model = model
        self.layer = layer
        self.run = _Runner(model.config, model.weights)
        x = self.run.blocks(self.run.embed(ids), 0, layer)
        self.mid = ad.add(x, self.run.attention(x, layer))
        self.ffn_input, self.keys, self.ffn_output = (t.data for t in self.run.ffn(self.mid, layer))

    def logits(self, rows: tuple[np.ndarray, ...], replacement):
        m = ad.put_rows(Tensor._wrap(self.ffn_output), rows, replacement)
        x = ad.add(self.mid, m)
        x = self.run.blocks(x, self.layer + 1, self.model.config.n_layers)
        return self.run.head(x)


def run_with_substitution(model: Checkpoint, tokens, layer: int, position: int, replacement) -> np.ndarray:
    """Next-token distributions when the layer's FFN output at ``position`` is replaced."""
    ids = _as_batch(tokens)
    if not 0 <= position < ids.shape[1]:
        raise IndexError(f"position {position} out of range")
    site = SubstitutionSite(model, ids, layer)
    rows = (np.arange(ids.shape[0]), np.full(ids.shape[0], position))
    probs = ad.softmax(site.logits(rows, replacement), axis=-1).data
    return probs[0] if np.asarray(tokens).ndim == 1 else probs


def generate(model: Checkpoint, prompt: Sequence[int], max_new: int, temperature: float = 0.0,
             rng: np.random.Generator | None = None, stop: int | None = None) -> list[int]:
    """Greedy (``temperature == 0``) or sampled continuation of ``prompt``."""
    if temperature > 0 and rng is None:
        raise ValueError("sampling needs a seeded generator")
    ids = list(prompt)
    out = []
    for _ in range(max_new):
        if len(ids) >= model.config.max_seq_len:
            break
        logits = forward_logits(model, ids)[0, -1].astype(np.float64)
        if temperature > 0:
            z = logits / temperature
            p = np.exp(z - z.max())
            p /= p.sum()
            nxt = int(rng.choice(len(p), p=p))
        else:
            nxt = int(np.argmax(logits))
        ids.append(nxt)
        out.append(nxt)
        if stop is not None and nxt == stop:
            break
    return out


def sequence_logprob(model: Checkpoint, prompts: Sequence[Sequence[int]],
                     targets: Sequence[Sequence[int]]) -> np.ndarray:
    """Mean per-token log-probability of each target continuation (teacher forced)."""
    seqs = [list(p) + list(t[:-1]) for p, t in zip(prompts, targets)]
    ids, _ = pad_batch(seqs, 0)
    logits = forward_logits(model, ids).astype(np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = np.empty(len(prompts))
    for i, (p, t) in enumerate(zip(prompts, targets)):
        pos = np.arange(len(p) - 1, len(p) - 1 + len(t))
        out[i] = logp[i, pos, list(t)].mean()
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    epochs: int = 60
    batch_size: int = 32
    seq_len: int = 40
    lr: float = 3e-3
    min_lr: float = 1e-4
    warmup_steps: int = 100
    weight_decay: float = 0.01
    seed: int = 0


def pack_sentences(sentences: Sequence[Sequence[int]], seq_len: int, bos: int,
                   rng: np.random.Generator, weights=None) -> list[tuple[list[int], list[float]]]:
    """Concatenate shuffled sentences into ``BOS``-led rows of at most ``seq_len`` tokens.

    Each row comes with per-token loss weights (the weight applies when the
    token is the prediction target).
    """
    rows, cur, cw = [], [bos], [0.0]
    for i in rng.permutation(len(sentences)):
        s = list(sentences[i])[: seq_len - 1]
        w = [1.0] * len(s) if weights is None else list(weights[i])[: seq_len - 1]
        if len(cur) + len(s) > seq_len and len(cur) > 1:
            rows.append((cur, cw))
            cur, cw = [bos], [0.0]
        cur.extend(s)
        cw.extend(w)
    if len(cur) > 1:
        rows.append((cur, cw))
    return rows


def lm_loss(cfg: ModelConfig, params, ids: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted next-token cross-entropy; ``weights[:, j]`` scores predicting ``ids[:, j]``."""
    run = _Runner(cfg, params)
    logits = run.head(run.blocks(run.embed(ids[:, :-1]), 0, cfg.n_layers))
    return ad.cross_entropy(logits, ids[:, 1:], weights[:, 1:])


def train(corpus: Sequence[Sequence[int]], config: ModelConfig, tokenizer: Tokenizer,
          schedule: Schedule = Schedule(), weights=None, callback=None) -> tuple[Checkpoint, list[float]]:
    """Next-token training with AdamW, linear warmup and cosine decay.

    ``corpus`` is a list of token-id sentences, packed into rows led by
    ``BOS``. ``weights`` optionally gives a per-token loss weight for each
    sentence. Returns the checkpoint and per-epoch mean losses.
    """
    if not corpus:
        raise ValueError("empty corpus")
    flat = np.concatenate([np.asarray(s) for s in corpus])
    if flat.min() < 0 or flat.max() >= config.vocab_size:
        raise TokenizationError("corpus ids fall outside the vocabulary")
    if schedule.seq_len > config.max_seq_len + 1:
        raise ValueError("seq_len exceeds the model's max_seq_len")
    rng = np.random.default_rng(schedule.seed)
    params = init_weights(config)
    no_decay = {k for k in params if k.endswith((".g", ".b")) or k == "pos_emb"}
    opt = ad.AdamW(params, schedule.lr, betas=(0.9, 0.98), weight_decay=schedule.weight_decay,
                   no_decay=no_decay)
    n_rows = len(pack_sentences(corpus, schedule.seq_len, tokenizer.bos, np.random.default_rng(0)))
    total = schedule.epochs * -(-n_rows // schedule.batch_size)
    history, step = [], 0
    for epoch in range(schedule.epochs):
        rows = pack_sentences(corpus, schedule.seq_len, tokenizer.bos, rng, weights)
        losses = []
        start = time.perf_counter()
        for b in range(0, len(rows), schedule.batch_size):
            chunk = rows[b: b + schedule.batch_size]
            ids, _ = pad_batch([r for r, _ in chunk], tokenizer.pad)
            wts = np.zeros(ids.shape, dtype=np.float32)
            for i, (_, w) in enumerate(chunk):
                wts[i, : len(w)] = w
            lr = _lr_at(step, total, schedule)
            with ad.GradTape() as tape:
                tracked = {k: tape.watch(Tensor._wrap(v)) for k, v in opt.params.items()}
                loss = lm_loss(config, tracked, ids, wts)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss {value} at epoch {epoch} step {step} (lr {lr:.2e})")
            grads = ad.backward(tape, loss)
            g = {k: grads[t] for k, t in tracked.items() if t in grads}
            _clip(g, 1.0)
            opt.step(g, lr)
            losses.append(value)
            step += 1
        history.append(float(np.mean(losses)))
        log.info("epoch %d loss %.4f (%.1fs)", epoch, history[-1], time.perf_counter() - start)
        if callback is not None:
            callback(epoch, history[-1], opt.params)
    return Checkpoint(config, {k: v.astype(np.float32) for k, v in opt.params.items()},
                      tokenizer.vocab), history


def _lr_at(step: int, total: int, s: Schedule) -> float:
    if step < s.warmup_steps:
        return s.lr * (step + 1) / s.warmup_steps
    frac = (step - s.warmup_steps) / max(1, total - s.warmup_steps)
    return s.min_lr + 0.5 * (s.lr - s.min_lr) * (1 + math.cos(math.pi * min(frac, 1.0)))


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm > max_norm:
        for k in grads:
            grads[k] = grads[k] * (max_norm / norm)


def greedy_batch(model: Checkpoint, prompts: Sequence[Sequence[int]], n_new: int) -> list[list[int]]:
    """Greedy-decode ``n_new`` tokens for each prompt, batched with right padding."""
    seqs = [list(p) for p in prompts]
    for _ in range(n_new):
        ids, lengths = pad_batch(seqs, 0)
        logits = forward_logits(model, ids)
        nxt = logits[np.arange(len(seqs)), lengths - 1].argmax(axis=-1)
        for s, t in zip(seqs, nxt):
            s.append(int(t))
    return [s[len(p):] for s, p in zip(seqs, prompts)]


def fact_recall(model: Checkpoint, g, templates: str = "all", batch: int = 256) -> float:
    """Fraction of (triple, template) pairs whose object greedy decoding reproduces.

    ``templates`` is ``"prompts"``, ``"paraphrases"`` or ``"all"``.
    """
    tok = model.tokenizer
    prompts, golds = [], []
    for t in g.triples:
        rel = g.relations[t.r]
        chosen = {"prompts": rel.prompts, "paraphrases": rel.paraphrases,
                  "all": rel.prompts + rel.paraphrases}[templates]
        for tpl in chosen:
            prompts.append(tok.encode(tpl.replace("{s}", g.entities[t.s]), bos=True))
            golds.append(tok.encode(g.entities[t.o]))
    hits = 0
    for width in sorted({len(x) for x in golds}):
        idx = [i for i, x in enumerate(golds) if len(x) == width]
        for b in range(0, len(idx), batch):
            chunk = idx[b: b + batch]
            outs = greedy_batch(model, [prompts[i] for i in chunk], width)
            hits += sum(out == golds[i] for out, i in zip(outs, chunk))
    return hits / len(golds)
