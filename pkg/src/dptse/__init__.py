"""Differentially private traffic state estimation on a second-order (ARZ) network model."""
from .arz import ArzParams, NetworkTopology, OffRamp, OnRamp, linearize, step
from .estimators import EKF, EnKF, EstimatorConfig, MHE, UKF, make_estimator
from .privacy import PrivacySpec, kappa, privatize
from .qp import BoxQP, solve
from .scenario import ScenarioConfig, load_config
from .sensing import MeasurementBatch, SensorSchedule

__version__ = "0.1.0"
