"""Multi-reference conditioning testbed.

Anchored prompts plus per-reference concept embeddings inside a small
flow-matching video transformer, trained and evaluated on a procedurally
generated multi-entity glyph-video task.
"""

__version__ = "0.1.0"
