"""Simulation of active acoustic sensing through grasped objects.

Modal analysis of a tetrahedral object mesh, contact-dependent modal damping,
synthesis of the signal a contact microphone picks up when a finger-mounted
actuator drives the object, spectral features and KNN evaluation.
"""
__version__ = "0.1.0"

from .contact import ContactDynamicsConfig, ContactEvent, contact_damping, excitation_impulses, total_modal_damping
from .fem import MATERIALS, MaterialParams, SystemMatrices, assemble, material, rayleigh_damping
from .mesh import TetMesh, generate_bar, generate_tube, load_mesh, nearest_vertex, save_mesh
from .modal import ModalModel, load_modal_model, modal_analysis, save_modal_model
from .signal import ExcitationSpec, FeatureVector, extract_features, generate_excitation, segment_windows
from .synth import Waveform, prepare_modes, read_wav, superimpose_leak, synthesize, write_wav

__all__ = [
    "ContactDynamicsConfig", "ContactEvent", "contact_damping", "excitation_impulses", "total_modal_damping",
    "MATERIALS", "MaterialParams", "SystemMatrices", "assemble", "material", "rayleigh_damping",
    "TetMesh", "generate_bar", "generate_tube", "load_mesh", "nearest_vertex", "save_mesh",
    "ModalModel", "load_modal_model", "modal_analysis", "save_modal_model",
    "ExcitationSpec", "FeatureVector", "extract_features", "generate_excitation", "segment_windows",
    "Waveform", "prepare_modes", "read_wav", "superimpose_leak", "synthesize", "write_wav",
]
