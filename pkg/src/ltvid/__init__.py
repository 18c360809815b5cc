"""System identification toolkit: LTV models, Kalman smoothing, LPV spectra and iLQR-based RL."""

from .errors import (DataError, DegenerateWeights, IllPosed, InfeasibleSegmentation,
                     InsufficientExcitation, LineSearchFailed, LtvidError, MaxIterations,
                     NonPDQuu, NotPositiveDefinite, NumericalError, PhaseUndefined,
                     RankDeficient, SingularCovariance, SingularInnovation,
                     SingularPredictedCov, SingularSum)
from .numeric import (LSSolution, LTIModel, Trajectory, fit_lti, kron_regressor,
                      matrices_to_params, params_to_matrices, solve_ls, solve_ridge)
from .prox import (ADMMOptions, ProxProblem, difference_operator, linearized_admm,
                   prox_group_l2, prox_l1, trend_filter)
from .estimation import (GaussianStateSequence, LinearGaussianModel, kalman_filter,
                         kf_predict, kf_update, particle_filter, prior_update, rts_smooth)
from .ltv import (LTVModel, ParameterEvolution, SegmentedModel, check_identifiability,
                  detect_knots, fit_l2, fit_segments_dp, fit_sparse, refine_two_step,
                  select_lambda_ml, sparse_lambda_max)
from .spectral import (BasisFunctionExpansion, ScheduledSignal, SpectralEstimate, amplitude,
                       build_regressor, complex_normal_params, confidence_bands, fit_spectrum,
                       phase, power_spectrum, sample_coefficients)
from .simulators import (PendulumParams, SimSpec, gen_drifting_ltv, gen_jump_linear,
                         gen_pendulum, pendulum_step, random_stable_linear)
from .trajopt import (ILQRSolution, QuadraticCost, TrajectoryDistribution, exploration_policy,
                      ilqr, kl_traj, lqr_backward, rl_loop)

__version__ = "0.1.0"
