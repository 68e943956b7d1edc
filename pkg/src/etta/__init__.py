"""Energy-guided test-time adaptation of BatchNorm parameters for 2D segmentation.

Submodules are imported lazily so that ``etta.cli`` can size the BLAS thread
pool before numpy loads.
"""

__version__ = "0.1.0"
