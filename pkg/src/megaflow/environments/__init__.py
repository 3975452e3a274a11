"""Environment service: pluggable compute backends plus their calibration models."""

from .base import (CENTRALIZED_PROFILE, DISTRIBUTED_PROFILE, FLEET_CAPS, ComputeBackend,
                   EnvHandle, EnvOpening, FleetCapExceeded, HandleClosed, InstanceNotRunning,
                   ProvisionFault, SimConfig, StepFault, Strategy, UtilizationSample,
                   contention_inflation, sample_execution_duration_min, startup_time_min,
                   utilization_trace)
from .sim import SimCloudBackend

__all__ = [
    "CENTRALIZED_PROFILE", "DISTRIBUTED_PROFILE", "FLEET_CAPS", "ComputeBackend",
    "EnvHandle", "EnvOpening", "FleetCapExceeded", "HandleClosed", "InstanceNotRunning",
    "ProvisionFault", "SimCloudBackend", "SimConfig", "StepFault", "Strategy",
    "UtilizationSample", "contention_inflation", "sample_execution_duration_min",
    "startup_time_min", "utilization_trace",
]
