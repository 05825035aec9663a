"""Multi-level feature distillation: individual teachers, a fused joint
teacher trained on all datasets, and per-dataset students distilled at
multiple representation levels, plus baselines and a synthetic benchmark."""

__version__ = "0.1.0"
