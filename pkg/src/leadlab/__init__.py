"""Layer-wise gated injection of visual-expert evidence into a small
multimodal report generator, plus a synthetic grounded-report benchmark
on which hallucination is exactly measurable.
"""

__version__ = "0.1.0"
