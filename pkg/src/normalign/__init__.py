"""Multi-modal norm-alignment domain adaptation toolkit.

A desk-scale training framework for unsupervised domain adaptation over
multi-modal clip features: relative norm alignment between modalities,
gradient-reversal adversarial alignment on a multi-scale temporal relation
module, domain attention, attentive entropy, and multi-stream consistency
losses, all driven by a small built-in reverse-mode autodiff engine.
"""

from .autodiff import Tensor, tensor
from .gradcheck import CheckReport, finite_diff_check

__version__ = "0.1.0"

__all__ = ["Tensor", "tensor", "CheckReport", "finite_diff_check", "__version__"]
