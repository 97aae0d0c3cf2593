"""Congestion-aware routing and ride-pooling assignment for mobility-on-demand fleets.

Modules, bottom-up: ``network`` (graph, TNTP input, shortest paths),
``demand`` (requests and demand matrices), ``congestion`` (BPR and its
two-line relaxation), ``pooling`` (pair configurations and match
probability), ``assign_greedy`` and ``joint_qp`` (the two assignment
methods), ``tap`` (private equilibrium and the bi-level loop), ``metrics``
and ``cli`` (scenario runner).
"""

from .congestion import BprParams, PwlTravelTime, bpr_time, fit_network_pwl, fit_two_line
from .demand import Request, build_demand_matrix, split_by_penetration
from .joint_qp import FlowSolution, solve_joint, solve_routing
from .network import Network, incidence, load_tntp, shortest_paths, sioux_falls
from .pooling import ConfigCatalog, pool_probability, precompute_catalog
from .tap import bilevel_solve, solve_ue

__version__ = "0.1.0"
