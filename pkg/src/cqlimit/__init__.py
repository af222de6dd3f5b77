"""Classical-quantum dynamics in the double-scaling limit of a coarse-grained quantum system."""
__version__ = "0.1.0"

from .generator import GeneratorData, assemble, cnm, d_matrices, h_eff, lindblad_ops, tradeoff_check
from .hamiltonian import CQHamiltonian, ModelParams, build_model
from .phase_space import OperatorField, PhaseGrid

__all__ = ["__version__", "GeneratorData", "assemble", "cnm", "d_matrices", "h_eff", "lindblad_ops",
           "tradeoff_check", "CQHamiltonian", "ModelParams", "build_model", "OperatorField", "PhaseGrid"]
