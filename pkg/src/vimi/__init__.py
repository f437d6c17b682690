"""Retrieval-grounded video generation testbed.

Pipeline pieces: a BM25 memory over image-text pairs, multimodal prompt
assembly (retrieval-augmented and instruction-prefixed), a deterministic
conditioning encoder, EDM-style diffusion training math with a toy dense
denoiser, a second-order deterministic sampler with classifier-free
guidance and a two-stage cascade, and Frechet-distance evaluation.
"""

__version__ = "0.1.0"
