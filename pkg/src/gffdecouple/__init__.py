"""Gaussian free field on Z^d: Green function, capacities, maximal correlation,
conditional sampling, sprinkled decoupling checks and excursion-set percolation."""

__version__ = "0.1.0"

from .errors import CapacityError, ConfigurationError, DomainError, GFFError, NumericError
from .lattice import PointSet, auxiliary_sets, box, diam, dist, shell
from .green import GreenKernel, g_sup, green_at, green_cross, green_matrix
from .potential import capacity, harmonic_kernel, h_variance, simplex_energy_minimum
from .correlation import max_correlation, sandwich_check
from .sampler import (BoxSamplerConfig, conditional_model, sample_box, sample_conditional,
                      sample_exact)
from .decoupling import (choose_delta, g_delta_prob, parse_test_function, tail_bound_rhs,
                         verify_conditional, verify_unconditional)
from .percolation import (ExcursionConfig, crossing_probability, excursion_components,
                          fit_decay, hstar_scan, sprinkled_product_check, two_point_function,
                          ustarstar_constant)
