"""Dual attribute-aware ranking network for cross-domain image retrieval, at desk scale.

Modules: ``autodiff`` (reverse-mode engine), ``network`` (dual NIN sub-networks),
``losses``, ``trainer``, ``features`` (normalisation + PCA), ``retrieval``,
``evaluation``, ``synth`` (paired dataset generator), ``pipeline`` (ablation
harness) and ``cli``.
"""

__version__ = "0.1.0"
