"""SE(3) pose graph with Levenberg-Marquardt optimisation.

Edge residual: ``log(Z^-1 * X_from^-1 * X_to)``, updates ``X <- X * exp(dx)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial.transform import Rotation

from .geometry import RigidTransform, adjoint, se3_exp, se3_log, se3_right_jacobian_inv

log = logging.getLogger(__name__)

ODOMETRY = "odometry"
LOOP = "loop"


class GraphStructureError(KeyError):
    pass


class GaugeError(RuntimeError):
    pass


@dataclass
class GraphNode:
    id: int
    estimate: RigidTransform
    fixed: bool = False


@dataclass
class GraphEdge:
    from_id: int
    to_id: int
    measurement: RigidTransform
    information: np.ndarray = field(default_factory=lambda: np.eye(6))
    kind: str = ODOMETRY

    def __post_init__(self):
        if self.from_id == self.to_id:
            raise GraphStructureError("edge endpoints must differ")
        self.information = np.asarray(self.information, dtype=float).reshape(6, 6)
        if not np.allclose(self.information, self.information.T, atol=1e-9, rtol=0.0):
            raise ValueError("information matrix must be symmetric")


@dataclass
class OptimizationReport:
    initial_chi2: float
    final_chi2: float
    iterations: int
    converged: bool
    chi2_history: list[float] = field(default_factory=list)


def edge_residual(measurement: RigidTransform, x_from: RigidTransform, x_to: RigidTransform) -> np.ndarray:
    return se3_log(measurement.inverse() @ x_from.inverse() @ x_to)


def edge_jacobians(measurement, x_from, x_to):
    """Residual and its Jacobians with respect to right perturbations of both nodes."""
    e = edge_residual(measurement, x_from, x_to)
    jr_inv = se3_right_jacobian_inv(e)
    a = -jr_inv @ adjoint(x_to.inverse() @ x_from)
    return e, a, jr_inv


class PoseGraph:
    def __init__(self):
        self.nodes: dict[int, GraphNode] = {}
        self.edges: list[GraphEdge] = []

    def add_node(self, node_id: int, estimate: RigidTransform, fixed: bool = False) -> GraphNode:
        if node_id in self.nodes:
            raise GraphStructureError(f"node {node_id} already exists")
        node = GraphNode(node_id, estimate, fixed)
        self.nodes[node_id] = node
        return node

    def fix(self, node_id: int, fixed: bool = True) -> None:
        self._node(node_id).fixed = fixed

    def _node(self, node_id: int) -> GraphNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise GraphStructureError(f"node {node_id} does not exist") from None

    def add_edge(self, from_id: int, to_id: int, measurement: RigidTransform,
                 information: np.ndarray | None = None, kind: str = ODOMETRY) -> int:
        self._node(from_id)
        self._node(to_id)
        info = np.eye(6) if information is None else information
        self.edges.append(GraphEdge(from_id, to_id, measurement, info, kind))
        return len(self.edges) - 1

    def add_odometry_edge(self, from_id: int, to_id: int, measurement: RigidTransform) -> int:
        return self.add_edge(from_id, to_id, measurement, np.eye(6), ODOMETRY)

    def add_loop_edge(self, closure, weight: float = 1.0) -> int:
        """Add a validated closure; it maps source-map points into the target map frame."""
        return self.add_edge(closure.target_map_id, closure.source_map_id,
                             closure.refined_transform, weight * np.eye(6), LOOP)

    def residual(self, edge: GraphEdge) -> np.ndarray:
        return edge_residual(edge.measurement, self.nodes[edge.from_id].estimate,
                             self.nodes[edge.to_id].estimate)

    def chi2(self) -> float:
        total = 0.0
        for edge in self.edges:
            e = self.residual(edge)
            total += float(e @ edge.information @ e)
        return total

    def estimates(self) -> dict[int, RigidTransform]:
        return {i: n.estimate for i, n in self.nodes.items()}

    def optimize(self, max_iterations: int = 100, tol: float = 1e-10,
                 initial_damping: float = 1e-6) -> OptimizationReport:
        free = [i for i, n in self.nodes.items() if not n.fixed]
        if len(free) == len(self.nodes) and free:
            raise GaugeError("pose graph has no fixed node")
        chi2 = self.chi2()
        report = OptimizationReport(chi2, chi2, 0, True, [chi2])
        if not free or chi2 == 0.0:
            return report
        index = {node_id: k for k, node_id in enumerate(free)}
        damping = initial_damping
        report.converged = False
        for iteration in range(1, max_iterations + 1):
            report.iterations = iteration
            h, b = self._linear_system(index)
            n = h.shape[0]
            accepted = False
            while damping < 1e12:
                try:
                    step = -spla.spsolve((h + damping * sp.identity(n, format="csc")).tocsc(), b)
                except RuntimeError:
                    step = np.full(n, np.nan)
                if not np.all(np.isfinite(step)):
                    damping *= 10.0
                    continue
                saved = {i: self.nodes[i].estimate for i in free}
                for node_id, k in index.items():
                    node = self.nodes[node_id]
                    node.estimate = node.estimate @ se3_exp(step[6 * k: 6 * k + 6])
                new_chi2 = self.chi2()
                if new_chi2 <= chi2:
                    damping *= 0.1
                    accepted = True
                    break
                for i, est in saved.items():
                    self.nodes[i].estimate = est
                damping *= 10.0
            if not accepted:
                report.converged = True
                break
            rel = (chi2 - new_chi2) / chi2 if chi2 > 0 else 0.0
            chi2 = new_chi2
            report.chi2_history.append(chi2)
            if np.linalg.norm(step) < tol or rel < 1e-9 or chi2 == 0.0:
                report.converged = True
                break
        report.final_chi2 = chi2
        return report

    def _linear_system(self, index: dict[int, int]):
        n = 6 * len(index)
        rows, cols, vals = [], [], []
        b = np.zeros(n)

        def put(bi, bj, block):
            r, c = np.meshgrid(np.arange(6) + 6 * bi, np.arange(6) + 6 * bj, indexing="ij")
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(block.ravel())

        for edge in self.edges:
            xi = self.nodes[edge.from_id].estimate
            xj = self.nodes[edge.to_id].estimate
            e, a, bj_ = edge_jacobians(edge.measurement, xi, xj)
            om = edge.information
            ki, kj = index.get(edge.from_id), index.get(edge.to_id)
            if ki is not None:
                put(ki, ki, a.T @ om @ a)
                b[6 * ki: 6 * ki + 6] += a.T @ om @ e
            if kj is not None:
                put(kj, kj, bj_.T @ om @ bj_)
                b[6 * kj: 6 * kj + 6] += bj_.T @ om @ e
            if ki is not None and kj is not None:
                cross = a.T @ om @ bj_
                put(ki, kj, cross)
                put(kj, ki, cross.T)
        if rows:
            h = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(n, n)).tocsc()
        else:
            h = sp.csc_matrix((n, n))
        return h, b


def fine_grained_optimize(local_maps, max_iterations: int = 100, tol: float = 1e-10,
                          initial_damping: float = 1e-6, anchor_weight: float = 1e8):
    """Refine every scan pose with the keyposes held fixed.

    Scan nodes are chained by the local-trajectory increments; the first scan
    of each local map is tied to its keypose by a stiff identity edge.
    Returns ``(poses, graph, report)`` with one global pose per scan.
    """
    maps = sorted(local_maps, key=lambda m: m.id)
    if not maps:
        return [], PoseGraph(), None
    num_scans = max(m.end_scan_index for m in maps) + 1
    graph = PoseGraph()
    initial: dict[int, RigidTransform] = {}
    for m in maps:
        for offset, local in enumerate(m.local_trajectory):
            initial[m.start_scan_index + offset] = m.keypose @ local
    key_offset = num_scans
    for scan, pose in sorted(initial.items()):
        graph.add_node(scan, pose)
    for m in maps:
        graph.add_node(key_offset + m.id, m.keypose, fixed=True)
    anchor_info = anchor_weight * np.eye(6)
    for m in maps:
        graph.add_edge(key_offset + m.id, m.start_scan_index, m.local_trajectory[0], anchor_info)
        for offset in range(len(m.local_trajectory) - 1):
            a, b = m.local_trajectory[offset], m.local_trajectory[offset + 1]
            graph.add_odometry_edge(m.start_scan_index + offset, m.start_scan_index + offset + 1,
                                    a.inverse() @ b)
    report = graph.optimize(max_iterations, tol, initial_damping)
    poses = [graph.nodes[i].estimate for i in range(num_scans)]
    return poses, graph, report


def _info_to_g2o(info: np.ndarray) -> np.ndarray:
    # g2o orders (translation, rotation)
    perm = [3, 4, 5, 0, 1, 2]
    return info[np.ix_(perm, perm)]


def write_g2o(graph: PoseGraph, path: str | Path) -> None:
    lines = []
    for node in graph.nodes.values():
        t = node.estimate.translation
        q = Rotation.from_matrix(node.estimate.rotation).as_quat()
        lines.append("VERTEX_SE3:QUAT %d %s" % (node.id, " ".join(repr(float(v)) for v in (*t, *q))))
    for node in graph.nodes.values():
        if node.fixed:
            lines.append(f"FIX {node.id}")
    for edge in graph.edges:
        t = edge.measurement.translation
        q = Rotation.from_matrix(edge.measurement.rotation).as_quat()
        info = _info_to_g2o(edge.information)
        upper = info[np.triu_indices(6)]
        values = " ".join(repr(float(v)) for v in (*t, *q, *upper))
        lines.append(f"EDGE_SE3:QUAT {edge.from_id} {edge.to_id} {values}")
    Path(path).write_text("\n".join(lines) + "\n")


def _pose_from_values(values) -> RigidTransform:
    x, y, z, qx, qy, qz, qw = values
    return RigidTransform(Rotation.from_quat([qx, qy, qz, qw]).as_matrix(), [x, y, z])


def read_g2o(path: str | Path) -> PoseGraph:
    graph = PoseGraph()
    fixed = []
    pending = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        try:
            if tag == "VERTEX_SE3:QUAT":
                graph.add_node(int(parts[1]), _pose_from_values([float(v) for v in parts[2:9]]))
            elif tag == "EDGE_SE3:QUAT":
                i, j = int(parts[1]), int(parts[2])
                vals = [float(v) for v in parts[3:]]
                info = np.zeros((6, 6))
                info[np.triu_indices(6)] = vals[7:28]
                info = info + np.triu(info, 1).T
                pending.append((i, j, _pose_from_values(vals[:7]), _info_to_g2o(info)))
            elif tag == "FIX":
                fixed.extend(int(v) for v in parts[1:])
            else:
                log.warning("%s:%d: skipping unsupported record %s", path, lineno, tag)
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed {tag} record") from exc
    for i, j, z, info in pending:
        graph.add_edge(i, j, z, info, ODOMETRY if j == i + 1 else LOOP)
    for node_id in fixed:
        graph.fix(node_id)
    return graph
