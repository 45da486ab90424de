"""Vector-quantized item codes for transferable sequential recommendation.

The package learns discrete item codes from precomputed text embeddings
(optimized product quantization), pre-trains a contrastive self-attentive
next-item model over mixed-domain interaction data on top of a code
embedding table, and transfers it to new domains by learning a
Gumbel-Sinkhorn-relaxed permutation between downstream codes and the
pre-trained table before fine-tuning that table.
"""

__version__ = "0.1.0"
