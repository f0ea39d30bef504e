"""Bridge a CTC speech encoder and a decoder-only LM through pseudo-speech
embeddings reconstructed from the encoder's posterior distributions."""

from . import checkpoint, cli, connector, ctc, lexicon, metrics, models, rng, synthdata, tensor

__all__ = [
    "checkpoint",
    "cli",
    "connector",
    "ctc",
    "lexicon",
    "metrics",
    "models",
    "rng",
    "synthdata",
    "tensor",
]
