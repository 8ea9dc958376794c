"""Physics-informed and recurrent quadcopter world models, trained and
compared on a simulated chirp-excitation dataset."""

from .dynamics import integrate_rollout, rk4_step, state_derivative
from .types import Action, Episode, RigidBodyParams, SingularityError, State12, Tag, Wrench, wrap_angle

__all__ = [
    "Action",
    "Episode",
    "RigidBodyParams",
    "SingularityError",
    "State12",
    "Tag",
    "Wrench",
    "integrate_rollout",
    "rk4_step",
    "state_derivative",
    "wrap_angle",
]
