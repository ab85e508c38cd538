"""Desk-scale multimodal colonoscopy pipeline.

Compiles taxonomy-annotated images into instruction dialogues, trains a toy
multimodal language model behind a token-reducing multigranularity adapter,
and benchmarks CLS/REG/REC conversational tasks.
"""

__version__ = "0.1.0"
