"""microprobe: pixel and object classification on precomputed feature volumes.

Shallow learning (a from-scratch random forest) and attentive probing
(Gaussian-masked cross-attention adapters trained with the built-in
autodiff core) over dense per-pixel embeddings, plus the sampling,
metrics and pipeline tooling for label-budget experiments.
"""

__version__ = "0.1.0"
