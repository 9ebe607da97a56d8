"""Residual diffusion restoration of low-dose PET sinograms, in numpy."""

from .diffusion import reconstruct
from .estimator import NetArch, net_forward, net_init
from .schedule import make_schedule, make_time_grid
from .tomo import ProjectionGeometry, fbp, forward_project, mlem, osem

__all__ = [
    "NetArch",
    "ProjectionGeometry",
    "fbp",
    "forward_project",
    "make_schedule",
    "make_time_grid",
    "mlem",
    "net_forward",
    "net_init",
    "osem",
    "reconstruct",
]
