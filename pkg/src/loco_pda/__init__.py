"""Low-cost partial domain adaptation via class-conditional activation replay.

A deployed classifier's predictions estimate which classes the target domain
actually contains; a conditional VAE trained on the pruned model's
feature-space activations then generates a class-proportional pool, and only
the pruned model's linear classifier is retrained on it. No input samples are
ever stored.
"""

__version__ = "0.1.0"
