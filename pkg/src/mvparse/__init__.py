"""Multi-view weakly supervised multi-human parsing toolkit.

Submodules
----------
geometry    pinhole cameras, projection, depth fusion, visibility
synth       deterministic capsule-person multi-view scene generator
annotation  point labeling, seed extraction, promptable segmentation
losses      instance-guided and multi-view consistency losses + gradients
toyparser   minimal differentiable parser and the fine-tuning loop
metrics     overlap-stratified evaluation protocol
dataset     on-disk dataset layout (PNG + JSON)
cli         command-line entry points
"""

from ._kernels import BACKEND as kernel_backend

__all__ = ["kernel_backend"]
__version__ = "0.1.0"
