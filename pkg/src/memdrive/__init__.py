"""memdrive: a closed-loop highway driving agent that reasons over an
embedding-keyed memory of past experiences and repairs that memory through
post-episode reflection."""

__version__ = "0.1.0"

from .sim_core import (  # noqa: F401
    CollidedStateError,
    EnvConfig,
    MetaAction,
    ScenarioObservation,
    StepEvents,
    VehicleState,
    WorldState,
    build_world,
    detect_collision,
    idm_acceleration,
    mobil_should_change,
    observe,
    spawn_traffic,
    step_env,
)
