"""Multi-view nonlinear ICA laboratory.

Synthetic multi-view generators, a small autodiff/MLP core, contrastive
training with structured logits, sufficiently-distinct-views checks,
multi-view aggregation with gauge conditions, evaluation metrics and the
Darmois negative control.
"""
__version__ = "0.1.0"
