"""Optimal control of Bose-Einstein condensate transport on an atom chip."""

from .constants import GAUSS, NK, RB87, PhysicalConstants
from .dynamics import (CondensateState, GroundStateSpec, StateHistory, integrate_forward,
                       tf_ground_state)
from .metrics import TransportMetrics, simulate_with_hold, transport_metrics
from .oct import (CL_OCT_WEIGHTS, CONVERGENCE_WEIGHTS, QU_OCT_WEIGHTS, CostWeights,
                  OptimizationResult, optimize)
from .ramp import ControlRamp, TrapTrajectory, linear_ramp, ramp_to_trajectory, sta_ramp
from .trap import (ChipGeometry, TrapCharacterization, TrapMap, build_trap_map,
                   characterize_trap, load_tabulated_map)

__version__ = "0.1.0"
