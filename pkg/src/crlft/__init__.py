"""Desk-scale lab for class-conditioned reward-weighted fine-tuning.

The package covers the full pipeline: corpus handling (`corpus`),
bit-exact conversation templating (`templating`), policy backends with
exact gradients (`policy`, `autodiff`), the training objectives and
optimizer recipe (`trainer`), a closed-form tabular oracle (`oracle`),
analysis experiments (`evalharness`), and a CLI (`cli`).
"""

__version__ = "0.1.0"
