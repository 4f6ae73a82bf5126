"""Rigid disk in a forced kinetic gas: forces, recollisions, convergence."""

__version__ = "0.1.0"

from .boundary import (BodyPath, BoundaryDensity, constant_path,
                       find_precollision, march_boundary_density,
                       recollision_force_RW)
from .characteristics import FlowError, flow, pullback_density_fNB
from .fields import (DecayBudget, InitialDensity, ExternalForce, ModelConfig,
                     ValidationError, make_density, make_force,
                     validate_config)
from .fixedpoint import (FixedPointDivergence, FixedPointResult,
                         VelocityEnvelope, envelope_check,
                         fixed_point_ode_residual, ode_decay_bound_check,
                         picard_step, solve_fixed_point)
from .forces import (F00, ForceBreakdown, H_difference, equilibrium_velocity,
                     F0)
from .kernels import (CollisionKernel, eval_kernel, flux_cdf_table,
                      make_kernel, momentum_flux_L, sample_outgoing_speed)
from .montecarlo import (McBodyState, McResult, ParticleEnsemble,
                         calibrate_coupling, init_ensemble, mc_step, run_mc)
