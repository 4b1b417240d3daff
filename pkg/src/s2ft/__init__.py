"""Structured sparse fine-tuning engine with a deep-linear-network theory lab.

Modules: ``linalg`` (dense kernels), ``netspec`` (block definitions and
checkpoints), ``depgraph`` (coupled-structure discovery), ``select``
(budgets and selection strategies), ``permute`` (co-permutation),
``sparsetrain`` (partial back-propagation and baselines), ``adapter``
(extraction, fusion, switch, parallel serving), ``theory`` (closed-form
risks and bound suites) and ``harness`` (experiments and reports).
"""

__version__ = "0.1.0"
