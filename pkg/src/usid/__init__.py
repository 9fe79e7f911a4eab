"""Simulation and detection toolkit for coded ultrasound identification markers.

Modules
-------
codebook   PN code generation, correlation and codebook validation
clip       behavioral clip model (trigger, chip train, crystal response)
phantom    plane-wave channel-data synthesis and scene files
beamform   pulse-inversion combination and delay-and-sum
detector   correlation-based localization and identification
metrics    SNR, error statistics, detection rate and confusion counts
rfio       binary RF-frame and image containers
pipeline   experiment runner, reports and threshold sweeps
"""

__version__ = "0.1.0"
