"""Tactile graph workbench: synthetic marker frames, Voronoi-augmented graphs,
a numpy GCN pose regressor and a PI contour-following loop."""

from .graph import GraphKind, TactileGraph, build_graph, voronoi_features
from .nn import Dataset, GcnModel, TrainConfig, evaluate, init_model, predict, train
from .sensor_sim import ContactPose, DeformationParams, LayoutKind, MarkerFrame, build_layout, deform
from .servo import Contour, PiController, Termination, make_contour, run_servo, smoothness

__version__ = "0.1.0"
