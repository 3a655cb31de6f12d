"""flowvid: video generation from a single semantic label map.

Two-stage pipeline: a pluggable label-to-image stage produces the starting
frame, then a conditional VAE predicts bidirectional optical flow and
occlusion masks, and frames are synthesized by differentiable warping plus a
refinement network. Includes a synthetic-scene generator with ground-truth
flow so the whole stack is quantitatively verifiable.
"""

__version__ = "0.1.0"
