"""emonet: multi-corpus speech emotion recognition with residual adapters.

A numpy implementation of a log-mel frontend, an attention-pooled residual
CNN with per-corpus adapter branches, multi-corpus round-robin training with
several transfer regimes, and UAR / McNemar evaluation tooling.
"""

__version__ = "0.1.0"
