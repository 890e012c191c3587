"""Drift-perturbed strong Feller semigroups, numerically.

Build the transition semigroup of ``dX = [AX + F(X)] dt + G dW`` for
bounded measurable F as the fixed point of a Volterra convolution over
the linear transition kernels, and cross-validate it against closed
forms, Monte Carlo simulation, controllability scaling laws, and the
spectral stochastic heat equation.
"""

__version__ = "0.1.0"

from .errors import (
    AliasRisk,
    BadBounds,
    DegenerateCovariance,
    ExcessLeak,
    FellerKitError,
    GridMismatch,
    NoContraction,
    NotControllable,
    NotConverged,
    NotInCameronMartin,
    NotPSD,
    NotStrongFeller,
    NotSymmetric,
    Overflow,
    QuadratureDiverged,
    Unstable,
    UnsupportedDim,
)
from .gaussian import (
    CameronMartin,
    Estimate,
    GaussianMeasure,
    Hermite,
    MonteCarlo,
    cm_norm,
    gauss_expect,
    gauss_sample,
    paley_wiener,
    psd_factor,
    pw_weight,
)
from .gridkern import (
    Grid,
    GridFunction,
    KernelOp,
    apply_kernel,
    build_grid,
    build_ou_kernel,
    compose,
    dirac_kernel,
    grid_function,
    kernel_to_csv,
    read_kernel_csv,
    tv_row_distance,
)
from .heat import (
    SpectralHeatModel,
    SpectralState,
    analyze,
    heat_drift_stability,
    heat_invariant,
    heat_sf_norm,
    heat_stationary,
    heat_step,
    hyp_check,
    synthesize,
)
from .mc import (
    MCConfig,
    MCEstimate,
    euler_step,
    invariant_estimate,
    mc_transition,
    mc_vs_semigroup,
    mixing_check,
)
from .oumodel import (
    GramianCurve,
    OUModel,
    flow,
    flow_integral,
    gramian,
    kalman_index,
    ou_expect,
    ou_gradient,
    sf_norm,
    sf_scaling_fit,
)
from .perturb import (
    DriftField,
    PerturbedSemigroup,
    VolterraFamily,
    bt_kernel,
    br_lambda,
    choose_t0,
    clipped_linear_drift,
    constant_drift,
    drift_stability,
    markov_defect,
    mollified_sign_drift,
    phi_bound,
    pt_apply,
    resolvent_check,
    sign_drift,
    solve_perturbed,
    zero_drift,
)
from .rng import substream
