"""Reading-scanpath synthesis toolkit.

Synthesizes human-like reading scanpaths (fixation sequences over words)
conditioned on precomputed text embeddings via an adversarially trained
generator, scores them against real scanpaths (1-D MultiMatch, temporally
binned normalized Levenshtein distance, inter-subject baseline, skipping F1),
and feeds them to downstream text classifiers, including intent-aware
generator finetuning driven by a task loss.
"""

__version__ = "0.1.0"
