"""Author linking for multi-market forum posts.

Posts are encoded from three channels (text through a gated CNN/attention
fusion, posting time, and interaction-graph context), aggregated into
episode embeddings, trained with per-market softmax heads (optionally
multi-task with a cross-market identity head), and evaluated with cosine
retrieval metrics.
"""

__version__ = "0.1.0"
