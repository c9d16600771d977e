"""oodnoise: post-hoc OOD detection benchmarking under label noise.

A desk-scale toolkit implementing 20 post-hoc out-of-distribution scoring
methods, label-noise injection models, a decomposed AUROC evaluation
protocol and a reproducible experiment-matrix harness.
"""

__version__ = "0.1.0"
