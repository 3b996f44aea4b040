"""Desk-scale workbench for probing what low-rank adapters can and
cannot add to a small decoder-only transformer, on two synthetic hash
tasks: single-chain hop following and multi-chain shortest-terminal
selection. Includes an entropy-regularized adapter variant and
effective-rank analysis of trained adapter deltas.

Submodules are imported explicitly (lorabench.model, lorabench.trainer,
...); this package root stays import-light so the CLI can configure
threading before numpy loads.
"""

__version__ = "0.1.0"
