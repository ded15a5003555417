"""Evidence-subset search over two-stream classifiers.

Train lightweight selector/predictor streams over discrete evidence units
(hourly time-series windows and note-chunk embeddings), beam-search compact
evidence sets that reproduce the full-input decision, and evaluate
faithfulness against ranking/saliency/random/exhaustive baselines on
synthetic cohorts with planted ground truth.
"""

__version__ = "0.1.0"
