"""
World and host model
====================

Build the synthetic knowledge graph, render its training corpus and train
(or load from cache) the 8-block host transformer. Prints fact recall.
"""

import sys

from glame_lab import experiments as X
from glame_lab import lm
from glame_lab.world import render_training_corpus

cache = sys.argv[1] if len(sys.argv) > 1 else "runs/hosts"

# the default desk-scale world: 200 entities, 20 relations, 3 facts each
spec = X.HostSpec()
g = spec.world()
print(len(g.entities), "entities,", len(g.relations), "relations,", len(g), "triples")

# entity names are two tokens: a family word plus an index
print(g.entities[:5])

# every fact is rendered with each relation template, ending on the subject
t = g.triples[0]
for i in range(len(g.relations[t.r].prompts)):
    print(g.prompt(t.s, t.r, i), "->", g.entities[t.o])

# corpus: fact sentences plus one "{s} is a {family}" sentence per entity
sentences = render_training_corpus(g, spec.repetitions, spec.corpus_seed, essence=spec.essence)
print(len(sentences), "training sentences, e.g.", " ".join(sentences[0][0]))

# about five minutes on one CPU the first time, then read from disk
model = X.cached_host(spec, cache)
print("fact recall", lm.fact_recall(model, g))

# greedy continuation of a fact prompt
prompt = model.tokenizer.encode(g.prompt(t.s, t.r, 0), bos=True)
print(model.tokenizer.decode(lm.generate(model, prompt, 3)))
