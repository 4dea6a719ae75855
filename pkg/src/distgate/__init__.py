"""Distance-gated multi-branch detection-by-segmentation for 3D volumes.

The toolkit covers the full desk-scale loop: synthetic phantom cases, exact
tumor distance transforms, binary/soft distance gating, a gated two-branch
segmentation loss with verified gradients, sliding-window inference with
gated fusion, and instance-level detection evaluation (mRecall / FROC).
"""

__version__ = "0.1.0"
