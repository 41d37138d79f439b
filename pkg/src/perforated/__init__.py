"""Random perforated domains: sampling, cluster boxes, John paths and divergence solvers."""

__version__ = "0.1.0"

from .clusterer import ClusterParams, EpsilonTooLarge, build_cluster_boxes, verify_cluster_properties
from .geometry import Ball, Box, StarDomain
from .sampler import MarkDist, PerforatedDomain, ProcessParams, build_perforation, sample_marked_ppp
