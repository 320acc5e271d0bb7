import json

import numpy as np
import pytest

from glame_lab import world as W
from glame_lab.world import EditRequest, Triple, WorldError, WorldSpec


def small_world(seed, entities=30, relations=6, per=3):
    return W.generate_world(WorldSpec(entities, relations, per, two_hop_fraction=0.0), seed)


def oracle_subgraph(g, e, n, m, leak=()):
    """Level-synchronous expansion written independently of the library."""
    leak = set(leak)
    rank = lambda t: (g.relation_frequency[t.r], t.r, t.o)  # noqa: E731
    edges = {(e.s, e.r, e.o_new, 0)}
    depth = {e.s: 0, e.o_new: 0}
    frontier = [e.o_new] if n > 0 else []
    level = 0
    while frontier and level < n:
        nxt = []
        for v in frontier:
            kept = sorted((t for t in g.triples if t.s == v and t.o not in leak), key=rank)[:m]
            for t in kept:
                edges.add((v, t.r, t.o, level + 1))
                if t.o not in depth:
                    depth[t.o] = level + 1
                    nxt.append(t.o)
        frontier = nxt
        level += 1
    return edges, depth


def random_edit(g, rng):
    t = g.triples[rng.integers(len(g.triples))]
    o_new = int(rng.choice([x for x in range(len(g.entities)) if x not in (t.o, t.s)]))
    return EditRequest.create(g, t.s, t.r, o_new)


@pytest.mark.parametrize("seed", range(20))
def test_subgraph_matches_oracle(seed):
    g = small_world(seed)
    rng = np.random.default_rng(seed)
    e = random_edit(g, rng)
    for n in range(4):
        for m in range(1, 6):
            sub = W.build_subgraph(g, e, n, m)
            want_edges, want_depth = oracle_subgraph(g, e, n, m)
            assert set(sub.edges) == want_edges, (n, m)
            assert sub.depth == want_depth, (n, m)


@pytest.mark.parametrize("seed", range(5))
def test_subgraph_leak_filter_matches_oracle(seed):
    g = small_world(seed + 100)
    rng = np.random.default_rng(seed)
    e = random_edit(g, rng)
    leak = {int(x) for x in rng.choice(len(g.entities), 6, replace=False)} - {e.s, e.o_new}
    sub = W.build_subgraph(g, e, 3, 2, leak)
    want_edges, _ = oracle_subgraph(g, e, 3, 2, leak)
    assert set(sub.edges) == want_edges
    assert not any(t in leak for _, _, t, d in sub.edges if d > 0)


def test_subgraph_n0_is_the_edit_edge():
    g = small_world(1)
    e = random_edit(g, np.random.default_rng(0))
    sub = W.build_subgraph(g, e, 0, 5)
    assert sub.edges == ((e.s, e.r, e.o_new, 0),)
    assert set(sub.nodes) == {e.s, e.o_new}


def test_subgraph_rejects_bad_arguments():
    g = small_world(2)
    e = random_edit(g, np.random.default_rng(0))
    with pytest.raises(ValueError):
        W.build_subgraph(g, e, -1, 2)
    with pytest.raises(ValueError):
        W.build_subgraph(g, e, 1, 0)
    with pytest.raises(WorldError):
        W.build_subgraph(g, e, 1, 2, leak_filter=[e.o_new])


def test_subgraph_json_roundtrip():
    g = small_world(3)
    sub = W.build_subgraph(g, random_edit(g, np.random.default_rng(1)), 2, 3)
    assert W.Subgraph.from_json(sub.to_json()) == sub


def test_rarer_relations_first():
    ents = ["a 1", "b 1", "c 1", "d 1"]
    rels = [W.Relation.from_word(w) for w in ("x", "y")]
    # relation 0 appears 3 times, relation 1 once
    triples = [Triple(1, 0, 2), Triple(1, 1, 3), Triple(2, 0, 3), Triple(3, 0, 1)]
    g = W.KnowledgeGraph(ents, rels, triples + [Triple(0, 1, 2)])
    e = EditRequest.create(g, 0, 1, 1)
    sub = W.build_subgraph(g, e, 1, 1)
    assert sub.edges[1] == (1, 1, 3, 1)


def test_generate_world_is_deterministic_and_sized():
    spec = WorldSpec(40, 8, 3)
    a, b = W.generate_world(spec, 5), W.generate_world(spec, 5)
    assert a.triples == b.triples and a.entities == b.entities
    assert len(a) == 40 * 3
    assert all(len(a.out_edges(s)) == 3 for s in range(40))
    assert all(t.s != t.o for t in a.triples)
    assert W.generate_world(spec, 6).triples != a.triples


def test_generate_world_coverage_and_errors():
    g = W.generate_world(WorldSpec(50, 8, 3), 0)
    assert W.two_hop_coverage(g) >= 0.8
    with pytest.raises(WorldError):
        W.generate_world(WorldSpec(10, 2, 3), 0)
    with pytest.raises(WorldError):
        W.generate_world(WorldSpec(0, 2, 1), 0)


def test_relation_frequencies_are_skewed():
    g = W.generate_world(WorldSpec(200, 20, 3), 7)
    freq = [g.relation_frequency[r] for r in range(20)]
    assert freq[0] > freq[-1]


def test_graph_validation():
    rels = [W.Relation.from_word("x")]
    with pytest.raises(WorldError):
        W.KnowledgeGraph(["a", "a"], rels, [])
    with pytest.raises(WorldError):
        W.KnowledgeGraph(["a", "b"], rels, [Triple(0, 0, 5)])
    with pytest.raises(WorldError):
        W.KnowledgeGraph(["a", "b"], rels, [Triple(0, 0, 1), Triple(0, 0, 1)])
    with pytest.raises(WorldError, match="functional"):
        W.KnowledgeGraph(["a", "b", "c"], rels, [Triple(0, 0, 1), Triple(0, 0, 2)])
    with pytest.raises(WorldError, match="slot"):
        W.KnowledgeGraph(["a"], [W.Relation("x", ("no slot", "{s} y"), ("{s} z",))], [])


def test_templates_render_subject_once():
    g = small_world(0)
    for r in range(len(g.relations)):
        for t in range(2):
            assert g.prompt(3, r, t).count(g.entities[3]) == 1
    for rel in g.relations:
        for t in rel.prompts + rel.paraphrases:
            # every template ends on the subject, right before the answer
            assert t.split()[-1] == W.SLOT


def test_training_corpus_shapes():
    g = small_world(4, entities=10)
    plain = W.render_training_corpus(g, 2, 0)
    assert len(plain) == 2 * len(g) * 3
    assert all(words[-1] == "." for words, _ in plain)
    assert all(n == len(g.entities[0].split()) + 1 for _, n in plain)
    rich = W.render_training_corpus(g, 1, 0, essence=True)
    essence = [w for w, _ in rich if w[-4:-2] == ["is", "a"]]
    assert len(essence) == len(g.entities)
    assert all(w[-2] == W.entity_type(" ".join(w[:-4])) for w in essence)
    assert W.render_training_corpus(g, 1, 0) == W.render_training_corpus(g, 1, 0)


def test_multi_hop_sentences_added():
    g = small_world(5, entities=10)
    base = len(W.render_training_corpus(g, 1, 0))
    assert len(W.render_training_corpus(g, 1, 0, multi_hop=1.0)) > base


def test_answer_weights():
    w = W.answer_weights([(["a", "b", "c", "."], 2)], context=0.25)
    assert w == [[0.25, 0.25, 1.0, 1.0]]


def test_multi_hop_question_wording():
    g = small_world(6)
    q = W.multi_hop_question(g, 0, [1, 2])
    assert q == f"the {g.relations[2].name} of the {g.relations[1].name} of {g.entities[0]}"


def test_edit_request_validation():
    g = small_world(7)
    t = g.triples[0]
    with pytest.raises(WorldError):
        EditRequest.create(g, t.s, t.r, t.o)
    missing = next(r for r in range(len(g.relations)) if not g.objects(t.s, r))
    with pytest.raises(WorldError):
        EditRequest.create(g, t.s, missing, 1)
    e = EditRequest.create(g, t.s, t.r, (t.o + 1) % len(g.entities) or 2)
    g2 = W.apply_edit_to_graph(g, e)
    assert g2.objects(e.s, e.r) == [e.o_new]
    assert len(g2) == len(g)


def test_jsonl_roundtrip(tmp_path):
    g = small_world(8)
    path = tmp_path / "g.jsonl"
    g.to_jsonl(path)
    h = W.ingest_triples(path)
    assert h.entities == g.entities and h.triples == g.triples
    assert [r.prompts for r in h.relations] == [r.prompts for r in g.relations]


@pytest.mark.parametrize("body, match", [
    ('{"s": "a", "r": "x", "o": "b"}\n{oops\n', "line 2"),
    ('{"s": "a", "r": "x"}\n', "line 1"),
    ('{"entities": ["a"]}\n{"s": "a", "r": "x", "o": "b"}\n', "dangling entity"),
    ('{"format": 99}\n', "unsupported"),
])
def test_ingest_errors(tmp_path, body, match):
    path = tmp_path / "bad.jsonl"
    path.write_text(body)
    with pytest.raises(WorldError, match=match):
        W.ingest_triples(path)


def test_ingest_headerless(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in [
        {"s": "a 1", "r": "x", "o": "b 1"}, {"s": "b 1", "r": "y", "o": "a 1"}]))
    g = W.ingest_triples(path)
    assert g.entities == ("a 1", "b 1") and len(g) == 2
