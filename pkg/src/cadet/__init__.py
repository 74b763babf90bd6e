"""Component-aware anomaly detection toolkit: procedural scenes, a small
text-conditioned diffusion model, component embedding learning, prompt-based
anomaly generation, attention-residual mask extraction, and a cross-scale
difference-aggregation detector.
"""

__version__ = "0.1.0"
