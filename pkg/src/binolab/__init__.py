"""binolab: a desk-scale lab for weight-embedded text watermarking.

Trains a tiny decoder-only language model, attaches two LoRA adapter sets
(a text-generating performer and a detecting observer), optimizes them so
the performer's generations separate from human text under a
perplexity-ratio score, and evaluates detection with ROC/PR metrics.
"""

__version__ = "0.1.0"
