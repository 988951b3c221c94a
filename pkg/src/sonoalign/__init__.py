"""Semantic-aware contrastive alignment of ultrasound-style image
features with structured captions: soft-label priors from a diagnostic
taxonomy, bipartite label-graph text enhancement, and a dual contrastive
plus semantic objective, all on a self-contained float64 autodiff core."""

__version__ = "0.1.0"
