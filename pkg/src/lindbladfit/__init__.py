"""Learning Lindblad generators from projective measurement shots."""

from .evaluation import fidelity, infidelity_curve, landscape_scan, parameter_errors, relative_error
from .generators import ExperimentConfig, ModelSpec, TrueParams, apply_physical_generator, sample_true_params
from .measurement import ProtocolConfig, ShotDataset, generate_dataset, read_dataset, write_dataset
from .neural import MlpParams, combined_field
from .propagator import IntegratorConfig, Trajectory, evolve, evolve_with_gradient
from .training import GeneratorParams, TrainerConfig, TrainingRun, train

__version__ = "0.1.0"
