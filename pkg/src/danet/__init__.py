"""Small-object defect detection with deformable convolution, CBAM, FPN and focal loss.

Everything runs on numpy: a small autograd tensor, the detector layers,
a two-stage detector, COCO-style evaluation and a batch CLI.
"""

from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad"]
__version__ = "0.1.0"
