"""
RazorLab - ratio-aware component editing for machine unlearning

A desk-scale two-tower contrastive model, synthetic identity data, the
saliency-guided editing pipeline, post-training quantization and the
five-metric evaluation suite.
"""

__version__ = '0.1.0'
