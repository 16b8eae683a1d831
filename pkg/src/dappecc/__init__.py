"""Placement and migration on a fat-tree edge-cloud continuum.

Library + simulator for the distributed asynchronous placement protocol
(DAPP-ECC) and its centralized benchmarks (F-Fit, BUPU, LP lower bound).
"""

__version__ = "0.1.0"
