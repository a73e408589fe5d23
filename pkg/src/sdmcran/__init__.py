"""Simulation, modelling and achievable-rate tools for SDM fiber links.

The package is organised bottom-up:

``core``        sampled fields, unitary spectra, seeded random streams
``fiber``       split-step propagation (weak and strong coupling)
``wdm``         WDM transmitter and receiver chain (LDC / DBP)
``kernels``     regular-perturbation coefficients and J-matrix statistics
``cran``        correlated rotation-and-additive-noise channel model
``estimation``  fitting model parameters from training data
``particle``    particle-filter entropies and achievable rates
``experiments`` configuration-driven pipeline and CLI
"""

__version__ = "0.1.0"
