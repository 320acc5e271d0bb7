"""Counterfactual edit cases and the four post-edit metrics.

Probability metrics compare two objects' mean per-token log-probabilities
under the same prompt. Portability greedy-decodes multi-hop questions and
accepts a generation when a fuzzy partial-ratio match against the gold
surface form reaches the threshold.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from rapidfuzz import fuzz

from . import lm
from .world import EditRequest, KnowledgeGraph, Triple, apply_edit_to_graph, multi_hop_question, render

log = logging.getLogger(__name__)

CASE_FORMAT = 1


@dataclass(frozen=True)
class Neighbor:
    prompt: str
    subject: int
    truth: int


@dataclass(frozen=True)
class HopQuestion:
    hops: int
    question: str
    answer: int
    chain: tuple[int, ...]


@dataclass(frozen=True)
class EvalCase:
    case_id: int
    edit: EditRequest
    paraphrases: tuple[str, ...]
    neighbors: tuple[Neighbor, ...]
    questions: tuple[HopQuestion, ...]

    @property
    def leak_filter(self) -> frozenset[int]:
        """Gold answers of the portability questions; kept out of the edit subgraph."""
        return frozenset(q.answer for q in self.questions)

    def to_json(self, g: KnowledgeGraph) -> str:
        e = self.edit
        return json.dumps({
            "format": CASE_FORMAT, "case_id": self.case_id,
            "edit": {**asdict(e), "subject": g.entities[e.s], "relation": g.relations[e.r].name,
                     "target_true": g.entities[e.o], "target_new": g.entities[e.o_new]},
            "paraphrase_prompts": list(self.paraphrases),
            "neighborhood": [{"prompt": n.prompt, "subject": n.subject, "truth": n.truth,
                              "truth_text": g.entities[n.truth]} for n in self.neighbors],
            "portability": [{"hops": q.hops, "question": q.question, "answer": q.answer,
                             "answer_text": g.entities[q.answer], "chain": list(q.chain),
                             "recalled": [g.relations[r].name for r in q.chain]} for q in self.questions],
            "leak_filter": sorted(self.leak_filter),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalCase":
        d = json.loads(text)
        if d.get("format") != CASE_FORMAT:
            raise ValueError(f"unsupported case format {d.get('format')!r}")
        e = d["edit"]
        return cls(d["case_id"], EditRequest(e["s"], e["r"], e["o"], e["o_new"], e["prompt"]),
                   tuple(d["paraphrase_prompts"]),
                   tuple(Neighbor(n["prompt"], n["subject"], n["truth"]) for n in d["neighborhood"]),
                   tuple(HopQuestion(q["hops"], q["question"], q["answer"], tuple(q["chain"]))
                         for q in d["portability"]))


def save_cases(path, cases: Sequence[EvalCase], g: KnowledgeGraph) -> None:
    with open(path, "w") as fh:
        for c in cases:
            fh.write(c.to_json(g) + "\n")


def load_cases(path) -> list[EvalCase]:
    with open(path) as fh:
        return [EvalCase.from_json(line) for line in fh if line.strip()]


@dataclass(frozen=True)
class CaseSpec:
    neighbors: int = 5
    questions: int = 1
    hops: tuple[int, ...] = (2,)
    template: int = 0


def _paths(g: KnowledgeGraph, start: int, length: int) -> list[list[Triple]]:
    """All outgoing edge paths of exactly ``length`` edges from ``start``."""
    paths = [[]]
    for _ in range(length):
        paths = [p + [t] for p in paths for t in g.out_edges(p[-1].o if p else start)]
    return paths


def make_edits(g: KnowledgeGraph, count: int, seed: int, template: int = 0,
               require_hops: int = 2) -> list[EditRequest]:
    """Distinct-subject counterfactuals whose new object starts a ``require_hops``-hop chain."""
    rng = np.random.default_rng(seed)
    starts = [e for e in range(len(g.entities)) if _paths(g, e, require_hops - 1)]
    out, used = [], set()
    for i in rng.permutation(len(g.triples)):
        t = g.triples[i]
        if t.s in used or len(g.objects(t.s, t.r)) != 1:
            continue
        cands = [e for e in starts if e not in (t.s, t.o)]
        if not cands:
            continue
        out.append(EditRequest.create(g, t.s, t.r, int(rng.choice(cands)), template))
        used.add(t.s)
        if len(out) == count:
            break
    if len(out) < count:
        log.warning("only %d of %d edits could be drawn", len(out), count)
    return out


def make_cases(g: KnowledgeGraph, edits: Iterable[EditRequest], spec: CaseSpec = CaseSpec(),
               seed: int = 0) -> list[EvalCase]:
    """Paraphrase, neighborhood and multi-hop sets for each edit.

    Multi-hop answers come from the graph with that edit applied. Cases
    without a usable neighbor or question are skipped with a warning.
    """
    rng = np.random.default_rng(seed)
    cases = []
    for i, e in enumerate(edits):
        post = apply_edit_to_graph(g, e)
        rel = g.relations[e.r]
        subject = g.entities[e.s]
        paras = tuple(render(t, subject) for t in rel.prompts + rel.paraphrases
                      if render(t, subject) != e.prompt)
        pool = [t for t in g.triples if t.r == e.r and t.s != e.s and t.o != e.o_new]
        pick = rng.permutation(len(pool))[: spec.neighbors]
        neighbors = tuple(Neighbor(g.prompt(pool[j].s, e.r, spec.template), pool[j].s, pool[j].o)
                          for j in sorted(pick))
        questions = []
        for h in spec.hops:
            paths = [p for p in _paths(post, e.o_new, h - 1) if p[-1].o not in (e.s, e.o_new)]
            for j in sorted(rng.permutation(len(paths))[: spec.questions]):
                chain = (e.r,) + tuple(t.r for t in paths[j])
                questions.append(HopQuestion(h, multi_hop_question(g, e.s, chain), paths[j][-1].o, chain))
        if not neighbors or not questions:
            log.warning("edit %d skipped: %d neighbors, %d questions", i, len(neighbors), len(questions))
            continue
        cases.append(EvalCase(i, e, paras, neighbors, tuple(questions)))
    return cases


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def _compare(model: lm.Checkpoint, g: KnowledgeGraph, prompts: Sequence[str], first: Sequence[int],
             second: Sequence[int], space: str = "log") -> np.ndarray:
    """Indicator ``score(first | prompt) > score(second | prompt)`` per prompt."""
    tok = model.tokenizer
    enc = [tok.encode(p, bos=True) for p in prompts]
    a = lm.sequence_logprob(model, enc, [tok.encode(g.entities[o]) for o in first])
    b = lm.sequence_logprob(model, enc, [tok.encode(g.entities[o]) for o in second])
    if space == "prob":
        a, b = np.exp(a), np.exp(b)
    elif space != "log":
        raise ValueError("space must be 'log' or 'prob'")
    return a > b


def fuzzy_match(generation: str, gold: str, threshold: float = 90.0) -> bool:
    return fuzz.partial_ratio(gold.lower(), generation.lower()) >= threshold


def exact_match(generation: str, gold: str, threshold: float = 90.0) -> bool:
    return f" {gold.lower()} " in f" {generation.lower()} "


MATCHERS: dict[str, Callable[[str, str, float], bool]] = {"fuzzy": fuzzy_match, "exact": exact_match}


@dataclass
class CaseResult:
    case_id: int
    efficacy: float
    paraphrase: float
    neighborhood: float
    portability: float
    generations: list[str] = field(default_factory=list)


def score_case(model: lm.Checkpoint, g: KnowledgeGraph, case: EvalCase, matcher: str = "fuzzy",
               threshold: float = 90.0, max_new: int = 3, space: str = "log") -> CaseResult:
    """All four metrics for one case on one (typically post-edit) model."""
    e = case.edit
    eff = _compare(model, g, [e.prompt], [e.o_new], [e.o], space)
    par = _compare(model, g, case.paraphrases, [e.o_new] * len(case.paraphrases),
                   [e.o] * len(case.paraphrases), space) if case.paraphrases else np.zeros(0)
    nb = _compare(model, g, [n.prompt for n in case.neighbors], [n.truth for n in case.neighbors],
                  [e.o_new] * len(case.neighbors), space)
    tok = model.tokenizer
    gens = [tok.decode(out) for out in lm.greedy_batch(
        model, [tok.encode(q.question, bos=True) for q in case.questions], max_new)]
    match = MATCHERS[matcher]
    port = [match(gen, g.entities[q.answer], threshold) for gen, q in zip(gens, case.questions)]
    return CaseResult(case.case_id, 100.0 * float(eff.mean()),
                      100.0 * float(par.mean()) if len(par) else float("nan"),
                      100.0 * float(nb.mean()), 100.0 * float(np.mean(port)), gens)


def efficacy_score(model: lm.Checkpoint, g: KnowledgeGraph, cases: Sequence[EvalCase], space: str = "log") -> float:
    if not cases:
        raise ValueError("no cases")
    return 100.0 * float(np.mean(_compare(model, g, [c.edit.prompt for c in cases],
                                          [c.edit.o_new for c in cases], [c.edit.o for c in cases], space)))


def paraphrase_score(model: lm.Checkpoint, g: KnowledgeGraph, cases: Sequence[EvalCase], space: str = "log") -> float:
    per = [_compare(model, g, c.paraphrases, [c.edit.o_new] * len(c.paraphrases),
                    [c.edit.o] * len(c.paraphrases), space).mean() for c in cases if c.paraphrases]
    return 100.0 * float(np.mean(per))


def neighborhood_score(model: lm.Checkpoint, g: KnowledgeGraph, cases: Sequence[EvalCase], space: str = "log") -> float:
    per = [_compare(model, g, [n.prompt for n in c.neighbors], [n.truth for n in c.neighbors],
                    [c.edit.o_new] * len(c.neighbors), space).mean() for c in cases]
    return 100.0 * float(np.mean(per))


def portability_score(model: lm.Checkpoint, g: KnowledgeGraph, cases: Sequence[EvalCase], matcher: str = "fuzzy",
                      threshold: float = 90.0, max_new: int = 3) -> float:
    return float(np.mean([score_case(model, g, c, matcher, threshold, max_new).portability for c in cases]))


def editing_score(values: Sequence[float]) -> float:
    """Harmonic mean of the component percentages; 0 when any component is 0."""
    if any(v < 0 for v in values):
        raise ValueError("scores must be non-negative")
    return float(statistics.harmonic_mean(values))


@dataclass
class Scores:
    efficacy: float
    paraphrase: float
    neighborhood: float
    portability: float
    editing: float
    degenerate: bool

    @classmethod
    def from_components(cls, efficacy: float, paraphrase: float, neighborhood: float,
                        portability: float) -> "Scores":
        parts = [efficacy, paraphrase, neighborhood, portability]
        return cls(*parts, editing_score(parts), any(v == 0 for v in parts))

    def as_dict(self) -> dict:
        return asdict(self)


def aggregate(results: Sequence[CaseResult]) -> Scores:
    if not results:
        raise ValueError("no case results")
    par = [r.paraphrase for r in results if not np.isnan(r.paraphrase)]
    return Scores.from_components(float(np.mean([r.efficacy for r in results])),
                                  float(np.mean(par)) if par else 0.0,
                                  float(np.mean([r.neighborhood for r in results])),
                                  float(np.mean([r.portability for r in results])))


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def scores_csv(results: Sequence[CaseResult], total: Scores, extra: dict | None = None) -> str:
    """Per-case rows plus an ``all`` row, with fixed float formatting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(extra or {})
    w.writerow(cols + ["case", "efficacy", "paraphrase", "neighborhood", "portability", "editing"])
    lead = [str(v) for v in (extra or {}).values()]
    for r in results:
        w.writerow(lead + [r.case_id] + [_fmt(v) for v in (r.efficacy, r.paraphrase, r.neighborhood, r.portability)]
                   + [""])
    w.writerow(lead + ["all"] + [_fmt(v) for v in (total.efficacy, total.paraphrase, total.neighborhood,
                                                    total.portability, total.editing)])
    return buf.getvalue()


def scores_json(results: Sequence[CaseResult], total: Scores) -> str:
    return json.dumps({"scores": total.as_dict(),
                       "cases": [asdict(r) for r in results]}, sort_keys=True, indent=1)
