"""avanet: rotation-invariant convolutional hazard-zone mapping for snow avalanches.

Terrain and snow rasters go in; per-point green/yellow/red vulnerability
probabilities come out. Sub-packages:

- `avanet.raster`: georeferenced grids, ASCII-grid I/O, sampling, rendering
- `avanet.viewport`: the rotated patch ring around a query point
- `avanet.neuralnet`: from-scratch tensors, gradients, layers, optimizers,
  and the assembled classifier
- `avanet.training`: balanced sampling, the optimization loop, evaluation
- `avanet.synth`: synthetic terrain/snow/hazard data with a rule-based oracle
- `avanet.cli`: the ``avanet`` command
"""

from . import neuralnet, raster, synth, training, viewport
from .raster import HazardClass, Raster, load_ascii_grid, write_ascii_grid
from .viewport import ViewportGeometry, ViewportStack, extract_viewports

__version__ = "0.1.0"

__all__ = [
    "HazardClass",
    "Raster",
    "ViewportGeometry",
    "ViewportStack",
    "extract_viewports",
    "load_ascii_grid",
    "neuralnet",
    "raster",
    "synth",
    "training",
    "viewport",
    "write_ascii_grid",
    "__version__",
]
