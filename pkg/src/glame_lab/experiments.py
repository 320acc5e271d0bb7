"""End-to-end desk runs: world, host model, covariance, edits and scores."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import editor, evalkit, lm
from .world import KnowledgeGraph, WorldSpec, answer_weights, generate_world, render_training_corpus

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HostSpec:
    """Everything that determines the trained host checkpoint."""

    entities: int = 200
    relations: int = 20
    triples_per_entity: int = 3
    world_seed: int = 7
    repetitions: int = 1
    multi_hop: float = 0.0
    essence: bool = True
    corpus_seed: int = 0
    context_weight: float = 0.1
    d_model: int = 128
    n_layers: int = 8
    n_heads: int = 4
    ffn_inner: int = 512
    local_layers: int = 2
    local_window: int = 2
    model_seed: int = 0
    epochs: int = 100
    batch_size: int = 16
    lr: float = 2e-3
    train_seed: int = 0

    def digest(self) -> str:
        # the relation templates shape the corpus, so they key the cache too
        templates = [list(r.prompts + r.paraphrases) for r in self.world().relations]
        doc = {"spec": asdict(self), "templates": templates}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def world(self) -> KnowledgeGraph:
        return generate_world(WorldSpec(self.entities, self.relations, self.triples_per_entity), self.world_seed)


def tokenizer_for(g: KnowledgeGraph) -> lm.Tokenizer:
    return lm.Tokenizer.from_words(g.words())


def train_host(spec: HostSpec, g: KnowledgeGraph | None = None, callback=None) -> tuple[lm.Checkpoint, list[float]]:
    g = g if g is not None else spec.world()
    tok = tokenizer_for(g)
    sentences = render_training_corpus(g, spec.repetitions, spec.corpus_seed, spec.multi_hop, spec.essence)
    corpus = [tok.encode(w) for w, _ in sentences]
    cfg = lm.ModelConfig(len(tok), spec.d_model, spec.n_layers, spec.n_heads, spec.ffn_inner,
                         local_layers=spec.local_layers, local_window=spec.local_window, seed=spec.model_seed)
    sched = lm.Schedule(epochs=spec.epochs, batch_size=spec.batch_size, lr=spec.lr, seed=spec.train_seed)
    return lm.train(corpus, cfg, tok, sched, weights=answer_weights(sentences, spec.context_weight),
                    callback=callback)


def cached_host(spec: HostSpec, root) -> lm.Checkpoint:
    """Load the host for ``spec`` from ``root``, training and saving it on a miss."""
    path = Path(root) / f"host-{spec.digest()}"
    if (path / "manifest.json").exists():
        return lm.Checkpoint.load(path)
    model, history = train_host(spec)
    model.save(path)
    (path / "history.json").write_text(json.dumps({"spec": asdict(spec), "loss": history}, indent=1))
    return model


def corpus_sequences(model: lm.Checkpoint, g: KnowledgeGraph, seed: int = 0,
                     essence: bool = True) -> list[list[int]]:
    """One ``BOS``-led sentence per rendered fact, shuffled with ``seed``."""
    tok = model.tokenizer
    return [tok.encode(w, bos=True) for w, _ in render_training_corpus(g, 1, seed, essence=essence)]


def covariance_for(model: lm.Checkpoint, g: KnowledgeGraph, layer: int, samples: int = 1000,
                   seed: int = 0, ridge: float = 1e-6) -> editor.CovarianceCache:
    seqs = corpus_sequences(model, g)
    pick = np.random.default_rng(seed).choice(len(seqs), min(samples, len(seqs)), replace=False)
    return editor.estimate_covariance(model, [seqs[i] for i in sorted(pick)], layer, ridge)


def heldout_keys(model: lm.Checkpoint, g: KnowledgeGraph, layer: int, subject: int, count: int = 100,
                 seed: int = 1) -> np.ndarray:
    """``count`` keys from random corpus positions in sentences that never mention ``subject``."""
    tok = model.tokenizer
    subj = tok.encode(g.entities[subject])
    seqs = [s for s in corpus_sequences(model, g, seed)
            if not any(s[i: i + len(subj)] == subj for i in range(len(s) - len(subj) + 1))]
    keys = editor.collect_keys(model, seqs[:64], layer)
    rng = np.random.default_rng(seed)
    return keys[np.sort(rng.choice(len(keys), min(count, len(keys)), replace=False))]


def frozen_except(before: lm.Checkpoint, after: lm.Checkpoint, name: str) -> bool:
    """True when every tensor other than ``name`` is bit-identical."""
    return all(np.array_equal(before.weights[k].view(np.uint32), after.weights[k].view(np.uint32))
               for k in before.weights if k != name)


@dataclass
class EditRecord:
    case_id: int
    result: evalkit.CaseResult
    stop_reason: str
    steps: int
    final_loss: float
    drift: float
    constraint: float
    rank_ratio: float
    frozen: bool
    seconds: float
    error: str | None = None


@dataclass
class SuiteResult:
    method: str
    records: list[EditRecord] = field(default_factory=list)

    @property
    def ok(self) -> list[EditRecord]:
        return [r for r in self.records if r.error is None]

    def scores(self) -> evalkit.Scores:
        return evalkit.aggregate([r.result for r in self.ok])

    def early_stop_rate(self) -> float:
        return float(np.mean([r.stop_reason == "early_stop" for r in self.ok]))

    def csv(self) -> str:
        return evalkit.scores_csv([r.result for r in self.ok], self.scores(), {"method": self.method})

    def summary(self) -> dict:
        ok = self.ok
        return {
            "method": self.method, "edits": len(self.records), "failed": len(self.records) - len(ok),
            "scores": self.scores().as_dict() if ok else None,
            "early_stop_rate": self.early_stop_rate() if ok else 0.0,
            "max_drift": max((r.drift for r in ok), default=float("nan")),
            "max_constraint": max((r.constraint for r in ok), default=float("nan")),
            "max_rank_ratio": max((r.rank_ratio for r in ok), default=float("nan")),
            "all_frozen": all(r.frozen for r in ok),
            "mean_steps": float(np.mean([r.steps for r in ok])) if ok else 0.0,
        }


def run_suite(model: lm.Checkpoint, g: KnowledgeGraph, cases: Sequence[evalkit.EvalCase],
              cache: editor.CovarianceCache, config: editor.EditConfig, leak_filter: bool = True,
              matcher: str = "fuzzy", report_dir=None) -> SuiteResult:
    """Edit the base model once per case and score each post-edit model."""
    out = SuiteResult(config.method)
    weight = lm.ffn_weight_name(config.layer)
    for case in cases:
        start = time.perf_counter()
        leak = sorted(case.leak_filter) if leak_filter else ()
        try:
            new, sol = editor.edit(model, g, case.edit, cache, config, leak)
        except editor.EditError as exc:
            log.warning("case %d failed: %s", case.case_id, exc)
            out.records.append(EditRecord(case.case_id, None, "error", 0, float("nan"), float("nan"),
                                          float("nan"), float("nan"), False, 0.0, str(exc)))
            continue
        result = evalkit.score_case(new, g, case, matcher)
        sv = sol.update_singular_values()
        rec = EditRecord(case.case_id, result, sol.stop_reason, len(sol.trace) - 1, float(sol.trace[-1]),
                         editor.key_drift(sol.w, sol.w_hat, heldout_keys(model, g, config.layer, case.edit.s)),
                         sol.constraint_residual, float(sv[1] / sv[0]) if sv[0] > 0 else 0.0,
                         frozen_except(model, new, weight), time.perf_counter() - start)
        out.records.append(rec)
        if report_dir is not None:
            d = Path(report_dir)
            d.mkdir(parents=True, exist_ok=True)
            (d / f"edit-{case.case_id:04d}.json").write_text(sol.to_json())
        log.info("%s case %d: %s in %d steps (%.1fs)", config.method, case.case_id, rec.stop_reason,
                 rec.steps, rec.seconds)
    return out


def desk_cases(g: KnowledgeGraph, count: int = 50, seed: int = 0, template: int = 0) -> list[evalkit.EvalCase]:
    edits = evalkit.make_edits(g, count, seed, template)
    return evalkit.make_cases(g, edits, evalkit.CaseSpec(template=template), seed)


def with_method(config: editor.EditConfig, method: str) -> editor.EditConfig:
    return replace(config, method=method)
