"""advspk: a desk-scale speaker-embedding attack and defense laboratory.

Everything is float64, seeded, and CPU-only: a synthetic speaker corpus,
a differentiable log-mel front-end plus miniature convolutional speaker
encoder, targeted PGD and Adam perturbation attacks, adversarial
fine-tuning, detector-gated diffusion purification, and a Table-style
evaluation harness.
"""

__version__ = "0.1.0"
