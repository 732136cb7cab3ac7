"""Dynamic 3D reconstruction from a pre-scanned object and a monocular sequence.

Pipeline: a synthetic scene generator produces ground-truth pre-scan and
dynamic sequences; the canonical stage builds surface-aligned Gaussian pixel
grids from virtual views of the pre-scan; a convolutional motion prior maps
those grids plus a time encoding to per-pixel rigid deformations; training
optimizes photometric, tracking, depth, reprojection, isometry and rigidity
objectives through a differentiable splatting renderer.
"""

__version__ = "0.1.0"
