"""halopatch: post-hoc rollout correction for a frozen 2-D flow forecaster.

A synthetic pseudo-spectral Navier-Stokes benchmark supplies ground truth and
a degraded surrogate forecaster; a trainable full-field corrector plus a
blockwise halo-read/center-write refiner clean its rollouts, with label-free
risk-scored top-k routing at deployment and an exact stage-wise audit.
"""

__version__ = "0.1.0"
