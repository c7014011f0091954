"""Minimal initial values of BSDEs whose terminal condition holds only in expectation.

The package solves ``Y0(m) = inf_alpha E^g[Phi(M_T^alpha)]`` over [0, 1]-valued
martingales started at ``m`` by policy search and by the terminal-profile
construction, computes the matching dual bound, and ships independent
reference solutions (closed forms and finite trees) to check both.
"""

__version__ = "0.1.0"

from .problem import (ClaimSpec, Driver, LossMap, MarketModel, ProblemSpec, StructuralError,  # noqa: E402
                      ValidationReport, Violation, validate_spec)
from .transforms import (ConjugateLoss, EnvelopeResult, biconjugate, convex_envelope,  # noqa: E402
                         envelope_loss, fenchel_driver, fenchel_loss)
from .simulate import (ControlPolicy, PathEnsemble, evolve_control, evolve_deflator,  # noqa: E402
                       generate_paths)
from .gexpect import (BasisConfig, BinomialLattice, BsdeSolution, g_expectation, gexp_linear,  # noqa: E402
                      gexp_lsmc, gexp_tree)
from .primal import (PolicyFamily, ValueCurve, check_dpp, continuity_modulus, delta_formula,  # noqa: E402
                     primal_value, profile_value, terminal_profile_policy, value_curve)
from .dual import DualResult, dual_functional, dual_value, foc_residuals  # noqa: E402
from .oracle import (TreeInstance, np_quantile_price, np_quantile_quadrature, stability_probe,  # noqa: E402
                     tree_primal_bruteforce, tree_primal_exact)
from .config import RunConfig, parse_config, serialize_config  # noqa: E402
