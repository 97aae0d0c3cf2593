"""Road graph, TNTP/JSON ingestion, incidence structure and shortest paths.

Vertices are 0-based integers internally. TNTP files number nodes from 1;
the parser shifts them down by one and the serializer shifts them back.
"""

from __future__ import annotations

import heapq
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp

if TYPE_CHECKING:
    from .demand import Request

DEFAULT_BPR_ALPHA = 0.15
DEFAULT_BPR_BETA = 4.0

# TNTP free-flow times are stored in minutes; internal times are hours.
MINUTES = 1.0 / 60.0


class NetworkError(ValueError):
    """Raised for malformed network data."""


@dataclass(frozen=True, eq=False)
class Network:
    """Directed road graph with per-arc free-flow time and capacity.

    ``t0`` is in hours and ``capacity`` in vehicles/hour. Arc order is fixed
    at construction and shared by every arc-indexed vector in the package.
    """

    n_nodes: int
    tail: np.ndarray
    head: np.ndarray
    t0: np.ndarray
    capacity: np.ndarray
    bpr_alpha: np.ndarray
    bpr_beta: np.ndarray
    _out: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n_arcs = len(self.tail)
        arrays = {
            "tail": np.asarray(self.tail, dtype=np.int64),
            "head": np.asarray(self.head, dtype=np.int64),
            "t0": np.asarray(self.t0, dtype=float),
            "capacity": np.asarray(self.capacity, dtype=float),
            "bpr_alpha": np.broadcast_to(np.asarray(self.bpr_alpha, dtype=float), (n_arcs,)).copy(),
            "bpr_beta": np.broadcast_to(np.asarray(self.bpr_beta, dtype=float), (n_arcs,)).copy(),
        }
        for name, arr in arrays.items():
            if arr.shape != (n_arcs,):
                raise NetworkError(f"{name} must have one entry per arc")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if n_arcs and (self.tail.min() < 0 or self.head.min() < 0
                       or max(self.tail.max(), self.head.max()) >= self.n_nodes):
            raise NetworkError("arc endpoint outside vertex range")
        loops = np.flatnonzero(self.tail == self.head)
        if loops.size:
            raise NetworkError(f"self-loop arc at index {loops[0]}")
        if np.any(self.t0 <= 0):
            raise NetworkError(f"nonpositive free-flow time on arc {np.flatnonzero(self.t0 <= 0)[0]}")
        if np.any(self.capacity <= 0):
            raise NetworkError(f"nonpositive capacity on arc {np.flatnonzero(self.capacity <= 0)[0]}")
        out: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for a, u in enumerate(self.tail.tolist()):
            out[u].append(a)
        object.__setattr__(self, "_out", out)

    @classmethod
    def from_arcs(cls, n_nodes, arcs, alpha=DEFAULT_BPR_ALPHA, beta=DEFAULT_BPR_BETA):
        """Build from ``(tail, head, t0, capacity)`` tuples (optionally with alpha, beta)."""
        rows = [tuple(a) for a in arcs]
        cols = list(zip(*rows)) if rows else [(), (), (), ()]
        al = [r[4] if len(r) > 4 else alpha for r in rows]
        be = [r[5] if len(r) > 5 else beta for r in rows]
        return cls(n_nodes, np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=np.int64),
                   np.array(cols[2], dtype=float), np.array(cols[3], dtype=float),
                   np.array(al, dtype=float), np.array(be, dtype=float))

    @property
    def n_arcs(self) -> int:
        return len(self.tail)

    def out_arcs(self, node: int) -> list[int]:
        return self._out[node]

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return self.n_nodes == other.n_nodes and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("tail", "head", "t0", "capacity", "bpr_alpha", "bpr_beta"))

    __hash__ = object.__hash__

    def fingerprint(self) -> str:
        """Stable content hash, used to key cache files."""
        import hashlib

        h = hashlib.sha256(str(self.n_nodes).encode())
        for k in ("tail", "head", "t0", "capacity", "bpr_alpha", "bpr_beta"):
            h.update(np.ascontiguousarray(getattr(self, k)).tobytes())
        return h.hexdigest()[:16]


def incidence(network: Network) -> sp.csr_matrix:
    """Node-arc incidence matrix: +1 where an arc leaves a vertex, -1 where it enters."""
    m = network.n_arcs
    rows = np.concatenate([network.tail, network.head])
    cols = np.concatenate([np.arange(m), np.arange(m)])
    vals = np.concatenate([np.ones(m), -np.ones(m)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(network.n_nodes, m))


def divergence(network: Network, flow) -> np.ndarray:
    """Outflow minus inflow at every vertex, computed from the arc lists."""
    flow = np.asarray(flow, dtype=float)
    m = network.n_arcs
    # accumulate per vertex in arc order
    idx = np.empty(2 * m, dtype=np.int64)
    val = np.empty(2 * m)
    idx[0::2], idx[1::2] = network.tail, network.head
    val[0::2], val[1::2] = flow, -flow
    out = np.zeros(network.n_nodes)
    np.add.at(out, idx, val)
    return out


def shortest_paths(network: Network, arc_costs, origin: int):
    """Label-setting shortest paths from ``origin``.

    Returns ``(dist, pred)`` where ``pred[v]`` is the arc entering ``v`` on the
    chosen path (-1 for the origin and unreachable vertices). Among equal-cost
    alternatives the lowest-index predecessor arc wins.
    """
    costs = np.asarray(arc_costs, dtype=float)
    if costs.shape != (network.n_arcs,):
        raise ValueError("arc_costs must have one entry per arc")
    if np.any(costs < 0):
        raise ValueError("negative arc cost")
    n = network.n_nodes
    dist = [np.inf] * n
    pred = [-1] * n
    done = [False] * n
    head = network.head.tolist()
    cl = costs.tolist()
    out = network._out
    dist[origin] = 0.0
    heap = [(0.0, origin)]
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for a in out[u]:
            v = head[a]
            if done[v]:
                continue
            nd = d + cl[a]
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = a
                heapq.heappush(heap, (nd, v))
            elif nd == dist[v] and a < pred[v]:
                pred[v] = a
    return np.array(dist), np.array(pred, dtype=np.int64)


def path_arcs(network: Network, pred, target: int) -> list[int]:
    """Arcs from the search origin to ``target`` in travel order."""
    arcs = []
    v = target
    while pred[v] >= 0:
        a = int(pred[v])
        arcs.append(a)
        v = int(network.tail[a])
    arcs.reverse()
    return arcs


def all_pairs_times(network: Network, arc_costs, sources=None) -> np.ndarray:
    """Shortest-path time matrix ``T[i, j]`` from each source ``i`` to every ``j``."""
    sources = range(network.n_nodes) if sources is None else sources
    T = np.full((network.n_nodes, network.n_nodes), np.inf)
    for s in sources:
        T[s] = shortest_paths(network, arc_costs, s)[0]
    return T


# ---------------------------------------------------------------------------
# TNTP format
# ---------------------------------------------------------------------------

_HEADER = re.compile(r"<([^>]+)>\s*(.*)")


def _metadata(lines):
    meta = {}
    body_start = None
    for i, line in enumerate(lines):
        s = line.strip()
        m = _HEADER.match(s)
        if m:
            key = m.group(1).strip().upper()
            if key == "END OF METADATA":
                body_start = i + 1
                break
            meta[key] = m.group(2).strip()
    if body_start is None:
        raise NetworkError("missing <END OF METADATA>")
    return meta, lines[body_start:]


def _strip_comment(line: str) -> str:
    return line.split("~", 1)[0].strip()


def parse_tntp_net(net_text: str, time_unit: float = MINUTES) -> Network:
    """Parse a TNTP net file; free-flow times are multiplied by ``time_unit``."""
    meta, body = _metadata(net_text.splitlines())
    try:
        n_nodes = int(meta["NUMBER OF NODES"])
        n_links = int(meta["NUMBER OF LINKS"])
    except (KeyError, ValueError) as exc:
        raise NetworkError(f"malformed header: {exc}") from None
    rows = []
    for line in body:
        s = _strip_comment(line)
        if not s:
            continue
        parts = s.rstrip(";").split()
        if len(parts) < 5:
            raise NetworkError(f"malformed link row: {line!r}")
        tail, head = int(parts[0]) - 1, int(parts[1]) - 1
        cap, fft = float(parts[2]), float(parts[4])
        alpha = float(parts[5]) if len(parts) > 5 else DEFAULT_BPR_ALPHA
        beta = float(parts[6]) if len(parts) > 6 else DEFAULT_BPR_BETA
        if cap <= 0:
            raise NetworkError(f"nonpositive capacity in row {line!r}")
        if fft <= 0:
            raise NetworkError(f"nonpositive free-flow time in row {line!r}")
        rows.append((tail, head, fft * time_unit, cap, alpha, beta))
    if len(rows) != n_links:
        raise NetworkError(f"header declares {n_links} links, found {len(rows)}")
    return Network.from_arcs(n_nodes, rows)


def parse_tntp_trips(trips_text: str, n_nodes: int):
    """Parse a TNTP trips file into a list of :class:`Request` (rates in veh/h)."""
    from .demand import Request

    _, body = _metadata(trips_text.splitlines())
    requests = []
    origin = None
    for line in body:
        s = _strip_comment(line)
        if not s:
            continue
        if s.lower().startswith("origin"):
            origin = int(s.split()[1]) - 1
            if not 0 <= origin < n_nodes:
                raise NetworkError(f"trips reference unknown node {origin + 1}")
            continue
        if origin is None:
            raise NetworkError("OD entry before any 'Origin' line")
        for entry in s.split(";"):
            entry = entry.strip()
            if not entry:
                continue
            dest_s, _, rate_s = entry.partition(":")
            dest, rate = int(dest_s) - 1, float(rate_s)
            if not 0 <= dest < n_nodes:
                raise NetworkError(f"trips reference unknown node {dest + 1}")
            if rate > 0 and dest != origin:
                requests.append(Request(origin, dest, rate))
    return requests


def parse_tntp(net_text: str, trips_text: str, time_unit: float = MINUTES):
    """Parse TNTP net and trips texts into ``(Network, list[Request])``."""
    net = parse_tntp_net(net_text, time_unit=time_unit)
    return net, parse_tntp_trips(trips_text, net.n_nodes)


def serialize_tntp_net(network: Network, time_unit: float = MINUTES) -> str:
    lines = [
        f"<NUMBER OF ZONES> {network.n_nodes}",
        f"<NUMBER OF NODES> {network.n_nodes}",
        "<FIRST THRU NODE> 1",
        f"<NUMBER OF LINKS> {network.n_arcs}",
        "<END OF METADATA>",
        "",
        "~\tinit_node\tterm_node\tcapacity\tlength\tfree_flow_time\tb\tpower\tspeed\ttoll\tlink_type\t;",
    ]
    for a in range(network.n_arcs):
        fft = network.t0[a] / time_unit
        lines.append(
            f"\t{network.tail[a] + 1}\t{network.head[a] + 1}\t{float(network.capacity[a])!r}\t{float(fft)!r}"
            f"\t{float(fft)!r}\t{float(network.bpr_alpha[a])!r}\t{float(network.bpr_beta[a])!r}\t0\t0\t1\t;")
    return "\n".join(lines) + "\n"


def load_tntp(net_path, trips_path=None, time_unit: float = MINUTES):
    net = parse_tntp_net(Path(net_path).read_text(), time_unit=time_unit)
    if trips_path is None:
        return net, []
    return net, parse_tntp_trips(Path(trips_path).read_text(), net.n_nodes)


# ---------------------------------------------------------------------------
# JSON format: {"nodes": N, "arcs": [{"tail", "head", "t0", "capacity", "alpha"?, "beta"?}]}
# t0 in hours, vertices 0-based.
# ---------------------------------------------------------------------------

def network_from_dict(data: dict) -> Network:
    try:
        rows = [(a["tail"], a["head"], a["t0"], a["capacity"],
                 a.get("alpha", DEFAULT_BPR_ALPHA), a.get("beta", DEFAULT_BPR_BETA))
                for a in data["arcs"]]
        return Network.from_arcs(int(data["nodes"]), rows)
    except KeyError as exc:
        raise NetworkError(f"missing field {exc}") from None


def network_to_dict(network: Network) -> dict:
    return {
        "nodes": network.n_nodes,
        "arcs": [
            {"tail": int(network.tail[a]), "head": int(network.head[a]), "t0": float(network.t0[a]),
             "capacity": float(network.capacity[a]), "alpha": float(network.bpr_alpha[a]),
             "beta": float(network.bpr_beta[a])}
            for a in range(network.n_arcs)
        ],
    }


def load_network(path) -> Network:
    """Load a ``.tntp`` net file or a ``.json`` network by extension."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        return network_from_dict(json.loads(path.read_text()))
    return parse_tntp_net(path.read_text())


def sioux_falls():
    """The bundled Sioux Falls network and its full OD table (360,600 veh/h)."""
    data = Path(__file__).parent / "data"
    return load_tntp(data / "SiouxFalls_net.tntp", data / "SiouxFalls_trips.tntp")
