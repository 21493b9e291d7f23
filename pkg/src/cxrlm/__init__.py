"""cxrlm: a desk-scale multimodal image/report modeling lab.

Synthetic pseudo-CXR corpus generation, a VQ image tokenizer trained with
an edge- and feature-preserving reconstruction loss, a unified-vocabulary
autoregressive transformer over text and image tokens, and an evaluation
harness (text metrics, Frechet-distance proxy, AUROC, finding F1).
"""

__version__ = "0.1.0"
