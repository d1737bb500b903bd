"""Desk-scale talking-head synthesis: a dual-branch fused NeRF renderer with
subpixel upsampling, and vector-quantized motion spaces driven by audio.

Built on a small reverse-mode autodiff core over numpy (``erlhead.tensor``).
"""

__version__ = "0.1.0"
