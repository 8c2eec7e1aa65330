"""Energy-constrained structured pruning of small convolutional networks."""
from .energy import (BilinearEnergyModel, ExternalCommandDevice, OracleError, SimulatedDevice,
                     fit_energy_model)
from .network import LayerSpec, Network, load_checkpoint, save_checkpoint
from .pipeline import PipelineConfig
from .solver import (EnergyConstrainedCompressor, InfeasibleBudgetError, IterationLimitError,
                     SolverConfig, compress, finetune)

__version__ = "0.1.0"

__all__ = [
    "BilinearEnergyModel",
    "EnergyConstrainedCompressor",
    "ExternalCommandDevice",
    "InfeasibleBudgetError",
    "IterationLimitError",
    "LayerSpec",
    "Network",
    "OracleError",
    "PipelineConfig",
    "SimulatedDevice",
    "SolverConfig",
    "compress",
    "finetune",
    "fit_energy_model",
    "load_checkpoint",
    "save_checkpoint",
]
