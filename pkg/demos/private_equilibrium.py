"""Private user equilibrium on Sioux Falls with the three Frank-Wolfe variants."""

import time

from amod_flow.network import sioux_falls
from amod_flow.tap import beckmann, solve_ue, wardrop_check

net, reqs = sioux_falls()
for method in ("pfw", "cfw", "fw"):
    start = time.perf_counter()
    rep = solve_ue(net, reqs, gap_tol=1e-4, max_iter=500, method=method)
    ok, worst = wardrop_check(net, rep, reqs, rel_tol=1e-3)
    print(f"{method:4s} iterations={rep.iterations:4d} gap={rep.relative_gap:.2e} "
          f"potential={beckmann(net, rep.x_p):.2f} veh-h  worst path ratio={worst:.5f} "
          f"wardrop={'ok' if ok else 'violated'}  {time.perf_counter() - start:.1f}s")
