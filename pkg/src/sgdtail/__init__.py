"""Tail-index theory and simulation for constant-stepsize SGD on linear regression."""

from .data_gen import GaussianStreamSpec, InputDistribution, Minibatch, gen_finite_dataset, gen_stream_batch, sample_sas
from .sgd_engine import (
    AllDivergedError,
    ChainState,
    RunConfig,
    SampleMatrix,
    ergodic_averages,
    moment_trajectory,
    run_chain,
    run_coupled_pair,
    sgd_step,
)
from .stable_estim import AlphaEstimate, EstimatorConfig, estimate_alpha, estimate_alpha_k1
from .tail_theory import (
    HEstimate,
    Regime,
    Status,
    TailIndexResult,
    TheoryQuery,
    classify_regime,
    critical_stepsize,
    estimate_h,
    estimate_h_hat,
    estimate_rho,
    h2_closed_form,
    solve_tail_index,
)
from .convergence import (
    BoundCurve,
    alpha_moment_diagnostic,
    gclt_scaling_check,
    moment_bound_curve,
    w2_contraction_rate,
)

__version__ = "0.1.0"
