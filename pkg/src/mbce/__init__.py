"""Desk-scale toolkit for pilot-constrained MIMO channel estimation.

Synthesizes physically grounded multipath channels and RSS maps, produces
coarse least-squares estimates from few OFDM pilots, refines them with a
physics-regularized U-Net that fuses RSS context via cross-attention, and
benchmarks against a sparse-recovery baseline.
"""

__version__ = "0.1.0"
