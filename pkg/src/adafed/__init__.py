"""Fair federated learning simulator built around the AdaFed aggregation rule."""

from .aggregation import (
    AggregationResult,
    AggregatorSpec,
    ClientUpdate,
    adafed_direction,
    aggregate,
    directional_derivatives,
    fedavg_direction,
    min_norm_in_hull,
    orthogonalize,
    solve_lambda,
    step_size_bound,
)
from .data import PartitionSpec, SyntheticTaskSpec, generate_synthetic, partition
from .federation import FederatedConfig, RoundRecord, ScheduleSpec, local_train, rho, run, run_experiment
from .metrics import FairnessReport, fairness_report
from .models import Dataset, ModelSpec, accuracy, gradient, init_params, loss, smoothness_bound

__version__ = "0.1.0"
