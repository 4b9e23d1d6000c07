"""Particle-filter reconstruction of cardiac activation from body-surface potentials."""
from .filter import Ensemble, FilterConfig, FilterTrace, Particle, run_filter
from .forward import TransferOperator, build_dipole_layer
from .geodesic import GeodesicTable, build_table
from .maps import ActivationMap, activation_map, compare_maps, eas_pseudo_probability
from .mesh import TriMesh, icosphere, make_test_mesh, sphere_electrodes
from .synth import TruthSpec, add_noise, simulate_truth
from .template import FrontTemplate, v_template

__version__ = "0.1.0"

__all__ = [
    "ActivationMap", "Ensemble", "FilterConfig", "FilterTrace", "FrontTemplate",
    "GeodesicTable", "Particle", "TransferOperator", "TriMesh", "TruthSpec",
    "activation_map", "add_noise", "build_dipole_layer", "build_table", "compare_maps",
    "eas_pseudo_probability", "icosphere", "make_test_mesh", "run_filter",
    "simulate_truth", "sphere_electrodes", "v_template",
]
