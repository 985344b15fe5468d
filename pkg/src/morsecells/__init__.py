"""Morse-cell decompositions of compact surfaces.

From a Morse function and a gradientlike field: critical points and Morse
charts, gradient-flow trajectories and invariant manifolds, the Morse-Smale
transversality check, Thom tubes over the stratification by stable
manifolds, the untico resolution tower with its quotient CW realization, and
mod-2 homology.
"""

from .config import Scenario, parse_scenario, parse_scenario_text
from .coords import build_special_change, verify_special_change
from .corners import CornerChart, check_strong_submersion, depth_of
from .critical import (CriticalPoint, MorseChart, attach_charts,
                       build_morse_chart, classify, find_critical_points)
from .expr import ScalarExpression
from .field import (Domain, GradientlikeField, ScalarField, box_domain,
                    check_gradientlike, make_gradientlike, sphere_domain,
                    torus_domain)
from .flow import (ManifoldSample, Trajectory, assign_limits,
                   check_morse_smale, integrate, level_trace,
                   sample_invariant_manifold, shoot_saddle_connections)
from .homology import (CWComplex, boundary_maps, count_connecting_orbits,
                       gf2_rank, homology_report)
from .pipeline import Pipeline
from .strata import (Stratum, build_strata, check_frontier_order,
                     prepare_frontier_samples)
from .thom import (build_thom_data, check_rho_flow_monotone,
                   check_thom_axioms, normalize_thom_data)
from .tower import (Realization, UnticoTower, build_tower,
                    check_delta_independence, check_flow_transversality,
                    load_tower, realize, save_tower, tower_from_dict,
                    tower_to_dict, validate_tower)
from .whitney import check_whitney, whitney_cusp_pair

__version__ = "0.1.0"
