"""nsqt: a desk-scale lab for sequence-level training of non-autoregressive
sequence-to-sequence models, with enumeration oracles small enough to check
every estimator exactly."""

__version__ = "0.1.0"
