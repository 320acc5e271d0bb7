"""Rank-one FFN editing with a graph-augmented value vector.

One layer's second FFN matrix ``W`` (``m = W k``) receives the update

    W_hat = W + (m* - W k*) (C^-1 k*)^T / ((C^-1 k*)^T k*)

where ``C`` is the uncentered key covariance, ``k*`` the subject key
averaged over random prefixes, and ``m*`` a value vector found by
optimization. The value is ``m_s + z``, with ``z`` either an RGNN encoding
of the edit's subgraph (``glame`` and its ablations) or a free vector
(``rome``).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import lm
from . import rgnn
from .autodiff import ContractError, NumericalError, Tensor
from .world import ESSENCE_PROMPT, EditRequest, KnowledgeGraph, Subgraph, build_subgraph

log = logging.getLogger(__name__)

METHODS = ("glame", "rome", "glame_gnn", "glame_mlp")


class EditError(RuntimeError):
    """Failure inside one stage of an edit; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class DegenerateSample(ValueError):
    pass


class OptimizationDiverged(ArithmeticError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


def _digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f4").tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# Covariance
# ---------------------------------------------------------------------------

@dataclass
class CovarianceCache:
    layer: int
    c: np.ndarray
    samples: int
    ridge: float

    def __post_init__(self):
        if self.c.ndim != 2 or self.c.shape[0] != self.c.shape[1]:
            raise ad.DimensionError("covariance must be square")

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.c, dtype="<f8").tobytes()).hexdigest()

    def save(self, path) -> None:
        np.savez(path, c=self.c, layer=self.layer, samples=self.samples, ridge=self.ridge)

    @classmethod
    def load(cls, path) -> "CovarianceCache":
        with np.load(path) as z:
            return cls(int(z["layer"]), z["c"], int(z["samples"]), float(z["ridge"]))


def collect_keys(model: lm.Checkpoint, sequences: Sequence[Sequence[int]], layer: int,
                 batch: int = 64) -> np.ndarray:
    """Every non-pad position's FFN key at ``layer`` as a ``(positions, ffn_inner)`` array."""
    if not sequences:
        raise DegenerateSample("empty key sample")
    out = []
    for b in range(0, len(sequences), batch):
        chunk = sequences[b: b + batch]
        ids, lengths = lm.pad_batch(chunk, model.tokenizer.pad)
        site = lm.SubstitutionSite(model, ids, layer)
        for i, n in enumerate(lengths):
            out.append(site.keys[i, :n])
    return np.concatenate(out)


def estimate_covariance(model: lm.Checkpoint, sequences: Sequence[Sequence[int]], layer: int,
                        ridge: float = 1e-6, max_ridge: float = 1.0) -> CovarianceCache:
    """``C = sum k k^T`` over all positions, plus ``eps * mean(diag C) * I``.

    ``eps`` starts at ``ridge`` and grows tenfold until ``C`` factorizes.
    """
    keys = collect_keys(model, sequences, layer).astype(np.float64)
    c = keys.T @ keys
    scale = float(np.mean(np.diag(c)))
    if scale <= 0:
        raise DegenerateSample("all sampled keys are zero")
    eps = ridge
    while True:
        reg = c + eps * scale * np.eye(len(c))
        try:
            np.linalg.cholesky(reg)
            return CovarianceCache(layer, reg, len(keys), eps)
        except np.linalg.LinAlgError:
            eps *= 10
            if eps > max_ridge:
                raise NumericalError(f"covariance not SPD even with ridge {eps / 10:g}")


# ---------------------------------------------------------------------------
# Prompts and keys
# ---------------------------------------------------------------------------

def subject_position(ids: Sequence[int], subject: Sequence[int]) -> int:
    """Index of the last token of the last occurrence of ``subject`` in ``ids``."""
    n = len(subject)
    if n == 0:
        raise ValueError("empty subject")
    for start in range(len(ids) - n, -1, -1):
        if list(ids[start: start + n]) == list(subject):
            return start + n - 1
    raise ValueError("subject tokens not found in prompt")


def sample_prefixes(model: lm.Checkpoint, count: int, seed: int, length: tuple[int, int] = (2, 10),
                    temperature: float = 1.0) -> list[list[int]]:
    """``count`` context prefixes: the empty one, then samples from the model.

    Each sampled prefix is ``length``-bounded and closed with the sentence
    terminator so the prompt starts a fresh sentence.
    """
    if count < 1:
        raise ValueError("need at least one prefix")
    lo, hi = length
    if not 1 <= lo <= hi:
        raise ValueError("bad prefix length range")
    rng = np.random.default_rng(seed)
    tok = model.tokenizer
    out: list[list[int]] = [[]]
    while len(out) < count:
        n = int(rng.integers(lo, hi + 1))
        gen = lm.generate(model, [tok.bos], n, temperature=temperature, rng=rng)
        if not gen or gen[-1] != tok.eos:
            gen = gen + [tok.eos]
        out.append(gen)
    return out


def contexts(model: lm.Checkpoint, prompt: str, prefixes: Sequence[Sequence[int]]) -> list[list[int]]:
    tok = model.tokenizer
    body = tok.encode(prompt)
    return [[tok.bos] + list(x) + body for x in prefixes]


def compute_kstar(model: lm.Checkpoint, edit: EditRequest, subject: str,
                  prefixes: Sequence[Sequence[int]], layer: int) -> np.ndarray:
    """Mean FFN key at the subject's last token over the prefixed prompts."""
    tok = model.tokenizer
    seqs = contexts(model, edit.prompt, prefixes)
    subj = tok.encode(subject)
    pos = np.array([subject_position(s, subj) for s in seqs])
    ids, _ = lm.pad_batch(seqs, tok.pad)
    site = lm.SubstitutionSite(model, ids, layer)
    return site.keys[np.arange(len(seqs)), pos].astype(np.float64).mean(axis=0)


# ---------------------------------------------------------------------------
# Closed form
# ---------------------------------------------------------------------------

def rank_one_update(w: np.ndarray, c: np.ndarray, k: np.ndarray, m: np.ndarray,
                    min_denominator: float = 1e-12) -> np.ndarray:
    """Least change to ``w`` (in the ``C`` metric) with ``w_hat @ k == m``.

    Computed in float64; the result keeps ``w``'s dtype.
    """
    w64 = np.asarray(w, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if w64.ndim != 2 or k.shape != (w64.shape[1],) or m.shape != (w64.shape[0],):
        raise ad.DimensionError(f"shapes W{w64.shape} k{k.shape} m{m.shape} do not fit m = W k")
    if c.shape != (len(k), len(k)):
        raise ad.DimensionError(f"covariance {c.shape} does not match key size {len(k)}")
    if not np.any(k):
        raise ContractError("k* is zero")
    u = ad.solve_spd(c, k)
    denom = float(u @ k)
    if not denom > min_denominator:
        raise NumericalError(f"singular update: (C^-1 k)^T k = {denom:g}")
    w_hat = w64 + np.outer(m - w64 @ k, u / denom)
    return w_hat.astype(np.asarray(w).dtype)


def key_drift(w: np.ndarray, w_hat: np.ndarray, keys: np.ndarray) -> float:
    """``||W_hat K - W K||_F / ||W K||_F`` for keys stored as rows."""
    k = np.asarray(keys, dtype=np.float64).T
    base = np.asarray(w, dtype=np.float64) @ k
    delta = (np.asarray(w_hat, dtype=np.float64) - np.asarray(w, dtype=np.float64)) @ k
    return float(np.linalg.norm(delta) / np.linalg.norm(base))


# ---------------------------------------------------------------------------
# Value optimization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EditConfig:
    method: str = "glame"
    layer: int = 0
    init_layer: int = 0
    n: int = 2
    m: int = 20
    lam: float = 6.25e-2
    prefixes: int = 10
    prefix_temperature: float = 1.0
    prefix_length: tuple[int, int] = (2, 10)
    lr: float = 0.5
    encoder_lr: float = 1e-3
    weight_decay: float = 0.0
    max_steps: int = 100
    stop_loss: float = 1e-2
    encoder_gain: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.prefixes < 1 or self.max_steps < 1:
            raise ValueError("prefix count and max steps must be positive")
        if self.stop_loss <= 0 or self.lr <= 0 or self.encoder_lr <= 0 or self.encoder_gain <= 0:
            raise ValueError("thresholds and learning rate must be positive")
        if self.n < 0 or self.m < 1:
            raise ValueError("need n >= 0 and m >= 1")

    @property
    def gnn_layers(self) -> int:
        return max(self.n, 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prefix_length"] = list(self.prefix_length)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EditConfig":
        d = dict(d)
        if "prefix_length" in d:
            d["prefix_length"] = tuple(d["prefix_length"])
        return cls(**d)


@dataclass
class Optimized:
    z: np.ndarray
    m_s: np.ndarray
    m_star: np.ndarray
    trace: list[float]
    stop_reason: str
    params: rgnn.RgnnParams | None


class _Objective:
    """Substituted forward passes shared by every optimization step."""

    def __init__(self, model: lm.Checkpoint, g: KnowledgeGraph, edit: EditRequest,
                 prefixes: Sequence[Sequence[int]], layer: int):
        tok = model.tokenizer
        subject = g.entities[edit.s]
        target = tok.encode(g.entities[edit.o_new])
        subj = tok.encode(subject)
        rows = [s + target[:-1] for s in contexts(model, edit.prompt, prefixes)]
        kl_row = tok.encode(ESSENCE_PROMPT.replace("{s}", subject), bos=True)
        seqs = rows + [kl_row]
        self.n_ctx = len(rows)
        self.pos = np.array([subject_position(s, subj) for s in seqs])
        ids, _ = lm.pad_batch(seqs, tok.pad)
        self.site = lm.SubstitutionSite(model, ids, layer)
        self.sub_rows = (np.arange(len(seqs)), self.pos)
        self.base = self.site.ffn_output[self.sub_rows]
        self.m_s = self.base[: self.n_ctx].astype(np.float64).mean(axis=0)
        # target log-prob positions: (row, position, token), weight 1 / (N |o*|)
        r_ix, p_ix, t_ix = [], [], []
        for j, s in enumerate(rows):
            start = len(s) - len(target)
            for i, t in enumerate(target):
                r_ix.append(j)
                p_ix.append(start + i)
                t_ix.append(t)
        self.pick = (np.array(r_ix), np.array(p_ix), np.array(t_ix))
        self.scale = 1.0 / (self.n_ctx * len(target))
        self.kl_pos = len(kl_row) - 1
        with_id = self.site.logits(self.sub_rows, self.base).data[self.n_ctx, self.kl_pos]
        self.ref_logp = _log_softmax_np(with_id)

    def loss(self, z: Tensor, lam: float) -> tuple[Tensor, float, float]:
        logits = self.site.logits(self.sub_rows, ad.add(self.base, z))
        logp = ad.log_softmax(logits, axis=-1)
        lp = ad.mul(ad.sum(ad.getitem(logp, self.pick)), -self.scale)
        la = ad.kl_divergence(ad.getitem(logp, (self.n_ctx, self.kl_pos)), self.ref_logp)
        total = ad.add(lp, ad.mul(la, lam)) if lam else lp
        return total, lp.item(), la.item()


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    return (z - np.log(np.exp(z).sum())).astype(x.dtype)


def optimize_mstar(model: lm.Checkpoint, g: KnowledgeGraph, edit: EditRequest, sub: Subgraph | None,
                   init: rgnn.NodeInitTable | None, config: EditConfig,
                   prefixes: Sequence[Sequence[int]]) -> Optimized:
    """Fit the value vector; only the encoder (or the free vector) is trained."""
    obj = _Objective(model, g, edit, prefixes, config.layer)
    d = model.config.d_model
    if config.method == "rome":
        params = {"delta": np.zeros(d, np.float32)}
    else:
        if init is None or (config.method != "glame_mlp" and sub is None):
            raise ContractError(f"method {config.method} needs a subgraph and node table")
        params = rgnn.RgnnParams.identity(d, config.gnn_layers, gain=config.encoder_gain).as_dict()
    lr = config.lr if config.method == "rome" else config.encoder_lr
    opt = ad.AdamW(params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=config.weight_decay)

    def encode(p):
        if config.method == "rome":
            return p["delta"]
        n = config.gnn_layers
        pair = ([p[f"w1.{i}"] for i in range(n)], [p[f"w2.{i}"] for i in range(n)])
        if config.method == "glame":
            return rgnn.encode(sub, init, pair)
        if config.method == "glame_gnn":
            return rgnn.encode_gnn_ablation(sub, init, pair)
        return rgnn.encode_mlp_ablation(init.entities[edit.s], pair)

    trace: list[float] = []
    reason = "max_steps"
    for step in range(config.max_steps + 1):
        with ad.GradTape() as tape:
            tracked = {k: tape.watch(Tensor._wrap(v)) for k, v in opt.params.items()}
            z = encode(tracked)
            loss, lp, la = obj.loss(z, config.lam)
        value = loss.item()
        trace.append(value)
        if not math.isfinite(value):
            raise OptimizationDiverged(f"loss {value} at step {step}", trace)
        log.debug("step %d loss %.4f (nll %.4f kl %.4f)", step, value, lp, la)
        if value < config.stop_loss:
            reason = "early_stop"
            break
        if step == config.max_steps:
            break
        grads = ad.backward(tape, loss)
        opt.step({k: grads[t] if t in grads else np.zeros_like(t.data) for k, t in tracked.items()})
    z_final = np.asarray(z.data, dtype=np.float64)
    final_params = None if config.method == "rome" else rgnn.RgnnParams.from_dict(
        {k: np.array(v) for k, v in opt.params.items()})
    return Optimized(z_final, obj.m_s, obj.m_s + z_final, trace, reason, final_params)


# ---------------------------------------------------------------------------
# Edit driver
# ---------------------------------------------------------------------------

@dataclass
class EditSolution:
    edit: EditRequest
    config: EditConfig
    k_star: np.ndarray
    m_star: np.ndarray
    w_hat: np.ndarray
    w: np.ndarray
    trace: list[float]
    stop_reason: str
    params: rgnn.RgnnParams | None
    subgraph: Subgraph | None
    model_digest: str
    cache_digest: str
    extras: dict = field(default_factory=dict)

    @property
    def constraint_residual(self) -> float:
        got = self.w_hat.astype(np.float64) @ self.k_star
        return float(np.linalg.norm(got - self.m_star) / np.linalg.norm(self.m_star))

    def update_singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.w_hat.astype(np.float64) - self.w.astype(np.float64), compute_uv=False)

    def report(self) -> dict:
        sv = self.update_singular_values()
        return {
            "edit": asdict(self.edit),
            "config": self.config.to_dict(),
            "model_digest": self.model_digest,
            "covariance_digest": self.cache_digest,
            "loss_trace": [round(float(x), 8) for x in self.trace],
            "stop_reason": self.stop_reason,
            "steps": len(self.trace) - 1,
            "residuals": {
                "constraint": self.constraint_residual,
                "rank_ratio": float(sv[1] / sv[0]) if sv[0] > 0 else 0.0,
                "update_norm": float(sv[0]),
                "z_norm": float(np.linalg.norm(self.m_star - (self.w.astype(np.float64) @ self.k_star))),
            },
            "digests": {
                "k_star": _digest(self.k_star),
                "m_star": _digest(self.m_star),
                "w_hat": _digest(self.w_hat),
                "rgnn": self.params.digest() if self.params is not None else None,
            },
            "subgraph": json.loads(self.subgraph.to_json()) if self.subgraph is not None else None,
            **self.extras,
        }

    def to_json(self) -> str:
        return json.dumps(self.report(), sort_keys=True, indent=1)

    def save_tensors(self, path) -> None:
        arrays = {"k_star": self.k_star, "m_star": self.m_star, "w_hat": self.w_hat}
        if self.params is not None:
            arrays.update({f"rgnn.{k}": v for k, v in self.params.as_dict().items()})
        np.savez(path, **arrays)


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, EditError):
            raise EditError(self.name, exc) from exc
        return False


def edit(model: lm.Checkpoint, g: KnowledgeGraph, request: EditRequest, cache: CovarianceCache,
         config: EditConfig, leak_filter: Sequence[int] = ()) -> tuple[lm.Checkpoint, EditSolution]:
    """Subgraph, node init, value fit, key, closed form, patch; in that order."""
    if cache.layer != config.layer:
        raise EditError("setup", ValueError(f"covariance is for layer {cache.layer}, edit targets {config.layer}"))
    sub = init = None
    if config.method != "rome":
        with _Stage("build_subgraph"):
            sub = build_subgraph(g, request, config.n, config.m, leak_filter)
        with _Stage("init_node_reprs"):
            init = rgnn.init_node_reprs(model, g, sub, config.init_layer)
    with _Stage("prefixes"):
        prefixes = sample_prefixes(model, config.prefixes, config.seed, config.prefix_length,
                                   config.prefix_temperature)
    with _Stage("optimize_mstar"):
        fit = optimize_mstar(model, g, request, sub, init, config, prefixes)
    with _Stage("compute_kstar"):
        k_star = compute_kstar(model, request, g.entities[request.s], prefixes, config.layer)
    name = lm.ffn_weight_name(config.layer)
    w = model.weights[name]
    with _Stage("rank_one_update"):
        w_hat = rank_one_update(w, cache.c, k_star, fit.m_star)
    with _Stage("patch_ffn_weight"):
        new_model = lm.patch_ffn_weight(model, config.layer, w_hat)
    sol = EditSolution(request, config, k_star, fit.m_star, w_hat, np.array(w), fit.trace, fit.stop_reason,
                       fit.params, sub, model.digest(), cache.digest())
    return new_model, sol


def edit_sequence(model: lm.Checkpoint, g: KnowledgeGraph, requests: Sequence[EditRequest],
                  cache: CovarianceCache, config: EditConfig,
                  leak_filter: Sequence[int] = ()) -> tuple[lm.Checkpoint, list[EditSolution]]:
    """Apply edits one after another, each on the previous result, with one covariance."""
    seen = set()
    for r in requests:
        if (r.s, r.r) in seen:
            raise ValueError(f"two edits rewrite ({r.s}, {r.r})")
        seen.add((r.s, r.r))
    sols = []
    for i, r in enumerate(requests):
        try:
            model, sol = edit(model, g, r, cache, config, leak_filter)
        except EditError as exc:
            raise EditError(f"edit {i}/{exc.stage}", exc.cause) from exc
        sols.append(sol)
    return model, sols
