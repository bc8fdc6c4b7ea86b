"""Episode embeddings for user-activity comparison: training, evaluation, baselines."""

__version__ = "0.1.0"
