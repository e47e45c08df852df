"""Balanced multimodal learning on multi-omics data.

Similarity network fusion, (revised) GCN encoders, cross-modal
self-distillation and macro-F1 driven multitask loss reweighting.
"""

__version__ = "0.1.0"
