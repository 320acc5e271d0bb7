"""Synthetic knowledge graphs, corpus rendering and edit-induced subgraphs."""

from __future__ import annotations

import json
import itertools
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1
SLOT = "{s}"

FAMILY_WORDS = (
    "brava", "corin", "delta", "elmo", "fenra", "galen", "havo", "istra", "jorun", "kelva",
    "lumo", "mirra", "nadir", "orvo", "pella", "quill", "rasta", "sorin", "tavi", "ulmo",
    "vessa", "wendo", "xari", "yorra", "zemla",
)
RELATION_WORDS = (
    "capital", "founder", "rival", "mentor", "ally", "anthem", "author", "owner", "patron", "heir",
    "partner", "sponsor", "editor", "keeper", "pilot", "coach", "tenant", "critic", "sibling", "envoy",
    "guide", "herald", "scribe", "warden",
)
DEFAULT_PROMPTS = ("the {w} of {s}", "{w} for {s}")
DEFAULT_PARAPHRASES = ("as for the {w} , that of {s}",)
ESSENCE_PROMPT = "{s} is a"


class WorldError(ValueError):
    """Invalid or infeasible knowledge-graph content."""


@dataclass(frozen=True)
class Triple:
    s: int
    r: int
    o: int


@dataclass(frozen=True)
class Relation:
    name: str
    prompts: tuple[str, ...]
    paraphrases: tuple[str, ...]
    functional: bool = True

    @classmethod
    def from_word(cls, word: str) -> "Relation":
        return cls(word, tuple(t.format(w=word, s=SLOT) for t in DEFAULT_PROMPTS),
                   tuple(t.format(w=word, s=SLOT) for t in DEFAULT_PARAPHRASES))


def _check_template(t: str) -> None:
    if t.count(SLOT) != 1 or t.replace(SLOT, "").count("{") or t.replace(SLOT, "").count("}"):
        raise WorldError(f"template needs exactly one {SLOT} slot: {t!r}")
    if t.strip() == SLOT:
        raise WorldError(f"template renders nothing around the subject: {t!r}")


def render(template: str, subject: str) -> str:
    return template.replace(SLOT, subject)


class KnowledgeGraph:
    """Entity/relation tables plus a set of triples. Immutable after construction."""

    def __init__(self, entities: Sequence[str], relations: Sequence[Relation], triples: Iterable[Triple]):
        self.entities = tuple(entities)
        self.relations = tuple(relations)
        if len(set(self.entities)) != len(self.entities):
            raise WorldError("duplicate entity surface forms")
        for rel in self.relations:
            if len(rel.prompts) < 2 or len(rel.paraphrases) < 1:
                raise WorldError(f"relation {rel.name!r} needs >= 2 prompt and >= 1 paraphrase templates")
            for t in rel.prompts + rel.paraphrases:
                _check_template(t)
        seen: set[Triple] = set()
        ordered = []
        for t in triples:
            if not (0 <= t.s < len(self.entities) and 0 <= t.o < len(self.entities)):
                raise WorldError(f"triple {t} references an unknown entity")
            if not 0 <= t.r < len(self.relations):
                raise WorldError(f"triple {t} references an unknown relation")
            if t in seen:
                raise WorldError(f"duplicate triple {t}")
            seen.add(t)
            ordered.append(t)
        self.triples = tuple(sorted(ordered, key=lambda t: (t.s, t.r, t.o)))
        self._set = frozenset(self.triples)
        self._out: dict[int, list[Triple]] = {}
        for t in self.triples:
            self._out.setdefault(t.s, []).append(t)
        for s, edges in self._out.items():
            per_rel = Counter(t.r for t in edges)
            for r, n in per_rel.items():
                if n > 1 and self.relations[r].functional:
                    raise WorldError(f"functional relation {self.relations[r].name!r} has {n} objects for entity {s}")
        self.relation_frequency = Counter(t.r for t in self.triples)
        self._entity_index = {name: i for i, name in enumerate(self.entities)}
        self._relation_index = {rel.name: i for i, rel in enumerate(self.relations)}

    def __contains__(self, t: Triple) -> bool:
        return t in self._set

    def __len__(self) -> int:
        return len(self.triples)

    def out_edges(self, entity: int) -> list[Triple]:
        return list(self._out.get(entity, ()))

    def objects(self, s: int, r: int) -> list[int]:
        return [t.o for t in self._out.get(s, ()) if t.r == r]

    def entity_id(self, name: str) -> int:
        return self._entity_index[name]

    def relation_id(self, name: str) -> int:
        return self._relation_index[name]

    def prompt(self, s: int, r: int, template: int = 0) -> str:
        return render(self.relations[r].prompts[template], self.entities[s])

    def words(self) -> set[str]:
        out = {w for w in ESSENCE_PROMPT.split() if w != SLOT}
        for name in self.entities:
            out.update(name.split())
        for rel in self.relations:
            out.update(rel.name.split())
            for t in rel.prompts + rel.paraphrases:
                out.update(w for w in t.split() if w != SLOT)
        return out

    def to_jsonl(self, path) -> None:
        """Write in the ingestible JSON-lines triple format."""
        with open(path, "w") as fh:
            header = {
                "format": FORMAT_VERSION,
                "entities": list(self.entities),
                "relations": {
                    rel.name: {"prompts": list(rel.prompts), "paraphrases": list(rel.paraphrases),
                               "functional": rel.functional}
                    for rel in self.relations
                },
            }
            fh.write(json.dumps(header) + "\n")
            for t in self.triples:
                fh.write(json.dumps({"s": self.entities[t.s], "r": self.relations[t.r].name,
                                     "o": self.entities[t.o]}) + "\n")


@dataclass(frozen=True)
class WorldSpec:
    entities: int
    relations: int
    triples_per_entity: int
    two_hop_fraction: float = 0.8
    single_token_names: bool = False


def _words(base: Sequence[str], n: int, rng_seed: int) -> list[str]:
    if n <= len(base):
        return list(base[:n])
    syll = ["ka", "lo", "mi", "ne", "ru", "sa", "to", "vi", "zu", "pe"]
    extra = []
    for a, b, c in itertools.product(syll, repeat=3):
        w = a + b + c
        if w not in base:
            extra.append(w)
    rng = np.random.default_rng(rng_seed)
    rng.shuffle(extra)
    return list(base) + extra[: n - len(base)]


def entity_names(count: int, single_token: bool = False) -> list[str]:
    """Two-token names (family word + index) so subjects span several tokens."""
    per_family = 10
    families = _words(FAMILY_WORDS, -(-count // per_family), 11)
    sep = "" if single_token else " "
    return [f"{families[i // per_family]}{sep}{i % per_family + 1}" for i in range(count)]


def generate_world(spec: WorldSpec, seed: int) -> KnowledgeGraph:
    """Sample a world where every entity has ``triples_per_entity`` outgoing facts.

    Relations are drawn with skewed popularity so relation frequencies differ;
    all relations are functional.
    """
    if spec.entities < 1 or spec.relations < 1 or spec.triples_per_entity < 1:
        raise WorldError("world counts must be positive")
    if spec.triples_per_entity > spec.relations:
        raise WorldError("functional relations cannot give an entity more facts than there are relations")
    if spec.entities < 2:
        raise WorldError("objects must differ from subjects, need >= 2 entities")
    rng = np.random.default_rng(seed)
    names = entity_names(spec.entities, spec.single_token_names)
    relations = [Relation.from_word(w) for w in _words(RELATION_WORDS, spec.relations, 13)]
    weights = 1.0 / np.arange(1, spec.relations + 1) ** 0.8
    weights /= weights.sum()
    triples = []
    for s in range(spec.entities):
        rels = rng.choice(spec.relations, size=spec.triples_per_entity, replace=False, p=weights)
        for r in sorted(int(x) for x in rels):
            o = int(rng.integers(spec.entities - 1))
            o = o + 1 if o >= s else o
            triples.append(Triple(s, r, o))
    g = KnowledgeGraph(names, relations, triples)
    if two_hop_coverage(g) < spec.two_hop_fraction:
        raise WorldError("two-hop path coverage below the requested fraction")
    return g


def two_hop_coverage(g: KnowledgeGraph) -> float:
    """Fraction of entities with at least one outgoing path of length 2."""
    hits = sum(1 for e in range(len(g.entities))
               if any(g.out_edges(t.o) for t in g.out_edges(e)))
    return hits / len(g.entities)


def entity_type(name: str) -> str:
    """Type word of an entity: the first word of its surface form."""
    return name.split()[0]


def render_training_corpus(g: KnowledgeGraph, repetitions: int, seed: int, multi_hop: float = 0.0,
                           essence: bool = False) -> list[tuple[list[str], int]]:
    """Sentences as ``(words, answer_length)``; the answer is the object plus ``"."``.

    Every triple is rendered through every template ``repetitions`` times.
    ``multi_hop`` adds that fraction of the graph's two-hop chains as
    question sentences; ``essence`` adds ``"<entity> is a <type> ."`` for
    every entity. The result is shuffled with ``seed``.
    """
    sentences = []
    if essence:
        for name in g.entities:
            ans = [entity_type(name), "."]
            sentences.extend([(render(ESSENCE_PROMPT, name).split() + ans, 2)] * repetitions)
    for t in g.triples:
        rel = g.relations[t.r]
        obj = g.entities[t.o].split() + ["."]
        for template in rel.prompts + rel.paraphrases:
            if template.count(SLOT) != 1:
                raise WorldError(f"template slot mismatch: {template!r}")
            sentences.extend([(render(template, g.entities[t.s]).split() + obj, len(obj))] * repetitions)
    rng = np.random.default_rng(seed)
    if multi_hop > 0:
        chains = [(t1, t2) for t1 in g.triples for t2 in g.out_edges(t1.o)]
        keep = rng.random(len(chains)) < multi_hop
        for (t1, t2), k in zip(chains, keep):
            if k:
                q = multi_hop_question(g, t1.s, [t1.r, t2.r]).split()
                obj = g.entities[t2.o].split() + ["."]
                sentences.extend([(q + obj, len(obj))] * repetitions)
    order = rng.permutation(len(sentences))
    return [sentences[i] for i in order]


def render_corpus(g: KnowledgeGraph, repetitions: int, seed: int,
                  multi_hop: float = 0.0) -> list[list[str]]:
    """Word lists of :func:`render_training_corpus`, each ending in ``"."``."""
    return [w for w, _ in render_training_corpus(g, repetitions, seed, multi_hop)]


def answer_weights(sentences: Sequence[tuple[Sequence[str], int]], context: float = 0.1) -> list[list[float]]:
    """Per-token loss weights: 1 on answer tokens, ``context`` elsewhere."""
    return [[context] * (len(w) - n) + [1.0] * n for w, n in sentences]


def multi_hop_question(g: KnowledgeGraph, s: int, chain: Sequence[int]) -> str:
    """``the r_k of the ... of the r_1 of s`` for a relation chain r_1..r_k."""
    text = g.entities[s]
    for r in chain:
        text = f"the {g.relations[r].name} of {text}"
    return text


def ingest_triples(path) -> KnowledgeGraph:
    """Read a JSON-lines triple file, optionally led by a header record.

    The header may carry ``entities`` (list of surface forms) and
    ``relations`` (name -> templates). Without a header, entities and
    relations are taken from the triples and relations get default templates.
    """
    header = None
    raw = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise WorldError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise WorldError(f"line {lineno}: expected an object")
            if "s" not in rec and header is None and not raw:
                header = rec
                if header.get("format", FORMAT_VERSION) != FORMAT_VERSION:
                    raise WorldError(f"line {lineno}: unsupported format {header.get('format')!r}")
                continue
            if not all(isinstance(rec.get(k), str) for k in ("s", "r", "o")):
                raise WorldError(f"line {lineno}: triple needs string fields s, r, o")
            raw.append((lineno, rec["s"], rec["r"], rec["o"]))
    header = header or {}
    if "entities" in header:
        entities = list(header["entities"])
    else:
        entities = list(dict.fromkeys(x for _, s, _, o in raw for x in (s, o)))
    if "relations" in header:
        relations = [Relation(name, tuple(spec["prompts"]), tuple(spec["paraphrases"]),
                              bool(spec.get("functional", True)))
                     for name, spec in header["relations"].items()]
    else:
        relations = [Relation.from_word(r) for r in dict.fromkeys(r for _, _, r, _ in raw)]
    ent_ix = {e: i for i, e in enumerate(entities)}
    rel_ix = {r.name: i for i, r in enumerate(relations)}
    triples = []
    for lineno, s, r, o in raw:
        for name, table in ((s, ent_ix), (o, ent_ix)):
            if name not in table:
                raise WorldError(f"line {lineno}: dangling entity reference {name!r}")
        if r not in rel_ix:
            raise WorldError(f"line {lineno}: dangling relation reference {r!r}")
        triples.append(Triple(ent_ix[s], rel_ix[r], ent_ix[o]))
    return KnowledgeGraph(entities, relations, triples)


@dataclass(frozen=True)
class EditRequest:
    """Counterfactual rewrite of ``(s, r, o)`` into ``(s, r, o_new)``."""

    s: int
    r: int
    o: int
    o_new: int
    prompt: str

    @classmethod
    def create(cls, g: KnowledgeGraph, s: int, r: int, o_new: int, template: int = 0) -> "EditRequest":
        objs = g.objects(s, r)
        if len(objs) != 1:
            raise WorldError(f"({s}, {r}) has {len(objs)} objects; edits need exactly one")
        if objs[0] == o_new:
            raise WorldError("new object equals the current object")
        if not 0 <= o_new < len(g.entities):
            raise WorldError(f"unknown entity {o_new}")
        return cls(s, r, objs[0], o_new, g.prompt(s, r, template))


def apply_edit_to_graph(g: KnowledgeGraph, e: EditRequest) -> KnowledgeGraph:
    triples = [t for t in g.triples if t != Triple(e.s, e.r, e.o)]
    new = Triple(e.s, e.r, e.o_new)
    if new not in g:
        triples.append(new)
    return KnowledgeGraph(g.entities, g.relations, triples)


def prioritize_relations(g: KnowledgeGraph, edges: Iterable[Triple]) -> list[Triple]:
    """Rarer relations first; ties by (relation id, tail id)."""
    return sorted(edges, key=lambda t: (g.relation_frequency.get(t.r, 0), t.r, t.o))


@dataclass(frozen=True)
class Subgraph:
    """Edit-induced subgraph rooted at the subject.

    ``edges`` holds ``(head, relation, tail, depth)``; the edited edge has
    depth 0 and edges leaving a depth-d node have depth d + 1.
    """

    root: int
    target: int
    relation: int
    n: int
    m: int
    edges: tuple[tuple[int, int, int, int], ...]
    depth: dict[int, int] = field(compare=False)

    @property
    def nodes(self) -> list[int]:
        return sorted(self.depth)

    def neighbors(self, node: int) -> list[tuple[int, int]]:
        """``(relation, tail)`` pairs for the node's outgoing subgraph edges."""
        return [(r, t) for h, r, t, _ in self.edges if h == node]

    def relations(self) -> list[int]:
        return sorted({r for _, r, _, _ in self.edges})

    def to_json(self) -> str:
        return json.dumps({
            "format": FORMAT_VERSION, "root": self.root, "target": self.target, "relation": self.relation,
            "n": self.n, "m": self.m,
            "edges": [{"h": h, "r": r, "t": t, "depth": d} for h, r, t, d in self.edges],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Subgraph":
        d = json.loads(text)
        if d.get("format") != FORMAT_VERSION:
            raise WorldError(f"unsupported subgraph format {d.get('format')!r}")
        edges = tuple((e["h"], e["r"], e["t"], e["depth"]) for e in d["edges"])
        depth = {d["root"]: 0, d["target"]: 0}
        for h, r, t, dep in edges:
            depth.setdefault(t, dep)
        return cls(d["root"], d["target"], d["relation"], d["n"], d["m"], edges, depth)


def build_subgraph(g: KnowledgeGraph, e: EditRequest, n: int, m: int,
                   leak_filter: Iterable[int] = ()) -> Subgraph:
    """Breadth-first sample of outgoing edges around the new object.

    Nodes with depth < n are expanded once: their outgoing edges minus those
    into ``leak_filter`` are prioritized and the first ``m`` kept. Kept edges
    into already-present nodes stay in the edge list but do not re-expand
    the node. The subject itself is never expanded.
    """
    if n < 0 or m < 1:
        raise ValueError("need n >= 0 and m >= 1")
    if not 0 <= e.o_new < len(g.entities):
        raise WorldError(f"new object {e.o_new} is not in the graph")
    leak = frozenset(leak_filter)
    if e.s in leak or e.o_new in leak:
        raise WorldError("leak filter may not contain the subject or the new object")
    depth = {e.s: 0, e.o_new: 0}
    edges = [(e.s, e.r, e.o_new, 0)]
    queue = deque([e.o_new]) if n > 0 else deque()
    while queue:
        v = queue.popleft()
        d = depth[v]
        cands = [t for t in g.out_edges(v) if t.o not in leak]
        for t in prioritize_relations(g, cands)[:m]:
            edges.append((v, t.r, t.o, d + 1))
            if t.o not in depth:
                depth[t.o] = d + 1
                if d + 1 < n:
                    queue.append(t.o)
    return Subgraph(e.s, e.o_new, e.r, n, m, tuple(edges), depth)
