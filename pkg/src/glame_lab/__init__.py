"""Graph-augmented rank-one knowledge editing on a toy transformer.

Modules: ``autodiff`` (tape-based reverse mode on numpy), ``world``
(synthetic knowledge graphs and edit subgraphs), ``lm`` (decoder-only host
model), ``rgnn`` (relational graph encoder), ``editor`` (value fitting and
the closed-form update), ``evalkit`` (edit cases and metrics),
``experiments`` (end-to-end runs) and ``cli``.
"""

__version__ = "0.1.0"
