"""Exception hierarchy.

Every error carries a module-qualified ``code`` so the CLI can report
failures uniformly.
"""


class SfddeError(Exception):
    code = "sfdde.error"


class MalformedModel(SfddeError, ValueError):
    code = "levy_driver.malformed_model"


class DeltaBoundViolated(SfddeError, ValueError):
    code = "levy_driver.delta_bound_violated"

    def __init__(self, message, atom=None):
        super().__init__(message)
        self.atom = atom


class OutOfRange(SfddeError, ValueError):
    code = "levy_driver.out_of_range"


class GridError(SfddeError, ValueError):
    code = "levy_driver.grid_error"


class GridMismatch(SfddeError, ValueError):
    code = "segment_space.grid_mismatch"


class OffGridTime(SfddeError, ValueError):
    code = "segment_space.off_grid_time"


class NumericalBlowup(SfddeError, ArithmeticError):
    code = "forward_sfdde.numerical_blowup"


class NoConvergence(SfddeError):
    code = "forward_sfdde.no_convergence"


class DegeneratePair(SfddeError, ValueError):
    code = "forward_sfdde.degenerate_pair"


class AllPathsDiverged(SfddeError, ArithmeticError):
    code = "semigroup_mc.all_paths_diverged"


class NotAnAtom(SfddeError, ValueError):
    code = "malliavin_qv.not_an_atom"


class WindowTooLong(SfddeError, ValueError):
    code = "malliavin_qv.window_too_long"


class SingularRegression(SfddeError, ArithmeticError):
    code = "bsde_solver.singular_regression"


class BasisTooRich(SfddeError, ValueError):
    code = "bsde_solver.basis_too_rich"


class BudgetTooSmall(SfddeError):
    code = "bsde_solver.budget_too_small"


class SigmaSingular(SfddeError, ArithmeticError):
    code = "hjb_control.sigma_singular"

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class InconclusiveBudget(SfddeError):
    code = "hjb_control.inconclusive_budget"


class ConfigInvalid(SfddeError, ValueError):
    code = "cli.config_invalid"

    def __init__(self, field, reason):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


class CatalogMiss(ConfigInvalid):
    code = "cli.catalog_miss"
