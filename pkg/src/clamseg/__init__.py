"""clamseg: weakly supervised lesion segmentation on synthetic phantoms.

A nested-skip encoder-decoder (two independently updated twin copies) is
trained contrastively on image pairs built from slice-level labels only; a
probabilistic hybrid loss scores agreement between predicted maps.  All
numerics run on a small numpy-backed autodiff core in this package.
"""

from .tensor import Tensor, backward

__all__ = ["Tensor", "backward"]
__version__ = "0.1.0"
