"""netforge: a workbench for designing, training, and monitoring
Caffe-style neural networks around a pluggable trainer backend."""

__version__ = "0.1.0"
