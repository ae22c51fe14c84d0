"""Monte Carlo for stochastic functional delay equations with jumps.

Submodules are imported on first attribute access so that the command line
can set thread variables before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "TimeGrid": "levy", "LevyModel": "levy", "NoisePath": "levy", "sample_noise": "levy",
    "validate_levy_model": "levy", "compensated_integral_J": "levy", "refine_noise": "levy",
    "DelfourMitterPoint": "segment", "m2_norm_sq": "segment", "m2_inner": "segment", "segment_at": "segment",
    "Coefficients": "forward", "PathRecord": "forward", "simulate_path": "forward",
    "simulate_ensemble": "forward", "picard_solve": "forward", "check_initial_lipschitz": "forward",
    "semigroup_apply": "semigroup", "markov_property_test": "semigroup",
    "malliavin_forward": "malliavin", "chain_rule_check": "malliavin", "joint_qv_estimator": "malliavin",
    "jump_sum_qv": "malliavin", "directional_gradient_qv": "malliavin", "qv_study": "malliavin",
    "BsdeProblem": "bsde", "RegressionBasis": "bsde", "BsdeSolution": "bsde", "solve_backward": "bsde",
    "u_representation": "bsde", "u_jump_shift": "bsde", "mild_residual": "bsde", "u_lipschitz_fit": "bsde",
    "ControlProblem": "control", "hamiltonian": "control", "synthesize_feedback": "control",
    "evaluate_cost": "control", "verification_battery": "control", "solve_hjb": "control",
    "Functional": "catalog",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    mod = _EXPORTS.get(name)
    if mod is None:
        raise AttributeError(f"module 'sfdde' has no attribute {name!r}")
    return getattr(importlib.import_module(f".{mod}", __name__), name)
