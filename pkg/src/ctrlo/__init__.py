"""Controllable object-centric learning: query-conditioned Slot Attention
with a control contrastive loss, on synthetic patch-feature scenes."""

__version__ = "0.1.0"
