"""Point-cloud landmark detection with cascaded local-attention decoders.

Subpackages:
- tensorcore: float64 tensors, reverse-mode tape, Adam, checkpoints
- geometry:   normalization, farthest point sampling, KD-tree kNN, grouping
- cloudio:    PLY/XYZ parsing, landmark annotations, manifests, splits
- synth:      procedural humanoid clouds with analytic ground truth
- attention:  local vector attention decoder layer
- cascade:    encoder + stacked decoder/pooling stages + stage heads + loss
- refine:     per-landmark local crop-and-correct refinement
- traineval:  training loops, MPJPE evaluation, ablations, accounting
- cli:        command-line entry point
"""

import os as _os

# Two thread pools (OpenBLAS, OpenMP) share few cores here; spinning workers
# starve each other. Must be set before the libraries load, hence here.
_os.environ.setdefault("OMP_WAIT_POLICY", "PASSIVE")
_os.environ.setdefault("OPENBLAS_THREAD_TIMEOUT", "1")

__version__ = "0.1.0"
