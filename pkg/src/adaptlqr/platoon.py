"""Two-vehicle platoon benchmark family.

Each vehicle has longitudinal dynamics with drag coefficient alpha, power
conversion coefficient beta, and mass m.  Working in deviation coordinates
(velocity errors and spacing error), the reduced model is

    z(k+1) = A z(k) + B u(k) + w(k),
    A = [[a11, 0, 0], [1, 1, -1], [0, 0, a22]],
    B = [[b11, 0], [0, 0], [0, b22]],

with a_ii = 1 - alpha_i/m_i * dt and b_ii = beta_i/m_i * dt.  Subsystem 1 is
the lead vehicle's velocity error; subsystem 2 stacks the spacing error and
the trail vehicle's velocity error.  Each subcontroller knows only its own
(a_ii, b_ii).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .plantspace import ZERO, Fixed, Free, InfoStructure, PlantFamily, PlantInstance

# a_ii in [0, 1], b_ii in [0.5, 1.5]
A_BOX = (0.0, 1.0)
B_BOX = (0.5, 1.5)

# reference instance used by the demo scenario (randomly selected once,
# kept fixed for reproducibility): (a11, b11, a22, b22)
DEFAULT_INSTANCE = (0.4360, 1.0497, 0.0259, 0.9353)


@dataclass(frozen=True)
class PlatoonParams:
    """Physical parameters of the two vehicles plus cost weights."""

    alpha: tuple[float, float] = (0.5640, 0.9741)
    beta: tuple[float, float] = (1.0497, 0.9353)
    mass: tuple[float, float] = (1.0, 1.0)
    delta_t: float = 1.0
    d_star: float = 10.0
    v_star: float = 20.0
    q_d: float = 1.0
    q_v: float = 1.0
    r_weight: float = 1.0

    def __post_init__(self):
        if any(m <= 0 for m in self.mass):
            raise ConfigError("vehicle masses must be positive")
        if self.delta_t <= 0:
            raise ConfigError("delta_t must be positive")
        if self.q_d < 0 or self.q_v < 0 or self.r_weight <= 0:
            raise ConfigError("cost weights must be q_d, q_v >= 0 and r > 0")

    def a_entries(self) -> tuple[float, float]:
        return tuple(
            1.0 - self.alpha[i] / self.mass[i] * self.delta_t for i in range(2)
        )

    def b_entries(self) -> tuple[float, float]:
        return tuple(self.beta[i] / self.mass[i] * self.delta_t for i in range(2))

    def nominal_control(self) -> tuple[float, float]:
        """Steady-state inputs holding each vehicle at the target velocity."""
        return tuple(self.alpha[i] * self.v_star / self.beta[i] for i in range(2))


def platoon_info() -> InfoStructure:
    # state blocks: (v1 error) | (spacing error, v2 error)
    return InfoStructure(
        state_dims=(1, 2),
        input_dims=(1, 1),
        plant_adj=np.array([[1, 0], [1, 1]]),
        design_adj=np.eye(2, dtype=int),
    )


def build_platoon(params: PlatoonParams = PlatoonParams()) -> PlantFamily:
    """The two-subsystem family with box-bounded local parameters.

    The box is fixed by the benchmark (a_ii in [0,1], b_ii in [0.5,1.5]);
    ``params`` sets the cost weights and the reference instance returned by
    :func:`params_instance`.
    """
    a_lo, a_hi = A_BOX
    b_lo, b_hi = B_BOX
    a_spec = (
        (Free(a_lo, a_hi), ZERO, ZERO),
        (Fixed(1.0), Fixed(1.0), Fixed(-1.0)),
        (ZERO, ZERO, Free(a_lo, a_hi)),
    )
    b_spec = (
        (Free(b_lo, b_hi), ZERO),
        (Fixed(0.0), Fixed(0.0)),
        (ZERO, Free(b_lo, b_hi)),
    )
    q = np.diag([params.q_v, params.q_d, params.q_v])
    r = np.diag([params.r_weight, params.r_weight])
    return PlantFamily(info=platoon_info(), a_spec=a_spec, b_spec=b_spec, q=q, r=r)


def platoon_instance(
    family: PlantFamily,
    a11: float,
    b11: float,
    a22: float,
    b22: float,
) -> PlantInstance:
    """Assemble a platoon plant at explicit local parameters.

    Free entries are ordered row-major over A then B, i.e.
    (a11, a22, b11, b22).
    """
    return family.make_plant(np.array([a11, a22, b11, b22]))


def default_instance(family: PlantFamily | None = None) -> PlantInstance:
    """The fixed reference instance used by the demo scenario."""
    if family is None:
        family = build_platoon()
    a11, b11, a22, b22 = DEFAULT_INSTANCE
    return platoon_instance(family, a11, b11, a22, b22)


def params_instance(params: PlatoonParams) -> PlantInstance:
    """Instance induced by physical parameters, validated against the box."""
    family = build_platoon(params)
    (a11, a22), (b11, b22) = params.a_entries(), params.b_entries()
    for name, val, (lo, hi) in (
        ("a11", a11, A_BOX), ("a22", a22, A_BOX),
        ("b11", b11, B_BOX), ("b22", b22, B_BOX),
    ):
        if not lo <= val <= hi:
            raise ConfigError(
                f"{name}={val:.4g} falls outside the family box [{lo}, {hi}]"
            )
    return platoon_instance(family, a11, b11, a22, b22)
