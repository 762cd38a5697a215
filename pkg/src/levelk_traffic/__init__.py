"""Level-k highway traffic simulator for testing autonomous driving controllers."""

from .actions import Action
from .config import SimConfig
from .driver_policy import TabularPolicy
from .world import KinematicsConfig, RoadConfig, VehicleState, World

__all__ = ["Action", "KinematicsConfig", "RoadConfig", "SimConfig", "TabularPolicy",
           "VehicleState", "World"]
__version__ = "0.1.0"
