"""Query-propagation multiple-object tracking on synthetic video.

A detect-query/track-query tracker trained end to end over whole clips:
detect queries find newborn objects, track queries carry identities forward,
a per-frame lifecycle filter plus a temporal aggregation layer produce the
next frame's track queries, and one clip-level loss supervises everything.
Runs on a small tape-based numpy autodiff core.
"""

from querytrack.autodiff import Tape, Tensor, grad_check

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "grad_check", "__version__"]
