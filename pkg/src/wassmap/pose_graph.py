"""Multi-session pose graph: odometry, loop, and prior factors over SE(3).

Residual convention for a binary edge (i, j) with measurement Z:

    r = log(Z^{-1} * (T_i^{-1} * T_j))

and for a prior on node i with absolute measurement Z:

    r = log(Z^{-1} * T_i)

with the tangent ordering (rotation, translation) of the geometry module.
Residuals are whitened by the upper-triangular factor W with W^T W = info
(so W = cholesky(info)^T), and a Huber kernel may reshape the whitened norm.
Loop edges default to Huber(1.0) because they are the outlier-prone kind;
odometry and priors default to no kernel.

Optimization is damped Gauss-Newton over the non-fixed nodes with right
perturbations T <- T * exp(dx). Robustness enters through IRLS scaling:
residual and Jacobian of each edge are multiplied by sqrt(w(s)) where
w = rho'(s)/s, which makes the normal equations the exact gradient and the
usual positive-definite Hessian approximation of the robust cost. A step is
accepted only if the true robust cost decreases, so the accepted-cost trace
is monotone by construction.

The merged two-session problem anchors session 1 (hard-fixed, matching an
argmin over session-2 poses alone) and initializes session 2 through T_init.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from wassmap.geometry import (
    Pose,
    adjoint,
    se3_exp,
    se3_left_jacobian_inv,
    se3_log,
    se3_right_jacobian_inv,
)

logger = logging.getLogger(__name__)

EDGE_KINDS = ("odometry", "loop", "prior")
KERNELS = ("none", "huber")


class GaugeUnderdeterminedError(RuntimeError):
    """The normal equations are singular: no anchor reaches every free node."""


@dataclass
class GraphNode:
    id: int
    pose: Pose
    session: int = 1
    fixed: bool = False


@dataclass
class GraphEdge:
    kind: str
    i: int
    j: int | None          # None for prior edges
    measurement: Pose
    information: np.ndarray
    kernel: str = "none"
    delta: float = 1.0

    def __post_init__(self):
        if self.kind not in EDGE_KINDS:
            raise ValueError(f"unknown edge kind {self.kind!r}")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.kernel == "huber" and self.delta <= 0.0:
            raise ValueError("huber delta must be positive")
        if (self.j is None) != (self.kind == "prior"):
            raise ValueError("prior edges take one endpoint, others take two")
        info = np.asarray(self.information, dtype=float)
        if info.shape != (6, 6):
            raise ValueError("information must be 6x6")
        if np.abs(info - info.T).max() > 1e-9:
            raise ValueError("information matrix not symmetric")
        try:
            np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            raise ValueError("information matrix not positive definite") from None
        self.information = info

    def whitener(self) -> np.ndarray:
        """Upper-triangular W with W^T W = information."""
        return np.linalg.cholesky(self.information).T


class PoseGraph:
    def __init__(self):
        self.nodes: dict[int, GraphNode] = {}
        self.edges: list[GraphEdge] = []

    def add_node(self, node_id: int, pose: Pose, session: int = 1, fixed: bool = False) -> GraphNode:
        if node_id in self.nodes:
            raise ValueError(f"duplicate node id {node_id}")
        node = GraphNode(int(node_id), pose, int(session), bool(fixed))
        self.nodes[node.id] = node
        return node

    def add_edge(
        self,
        kind: str,
        i: int,
        j: int | None,
        measurement: Pose,
        information,
        kernel: str | None = None,
        delta: float = 1.0,
    ) -> GraphEdge:
        if i not in self.nodes or (j is not None and j not in self.nodes):
            raise ValueError(f"edge ({i}, {j}) references a missing node")
        if kernel is None:
            kernel = "huber" if kind == "loop" else "none"
        edge = GraphEdge(kind, int(i), None if j is None else int(j), measurement,
                         information, kernel, float(delta))
        self.edges.append(edge)
        return edge

    def add_prior(self, i: int, measurement: Pose, information, kernel: str | None = None,
                  delta: float = 1.0) -> GraphEdge:
        return self.add_edge("prior", i, None, measurement, information, kernel, delta)

    def poses(self) -> dict[int, Pose]:
        return {node_id: node.pose for node_id, node in self.nodes.items()}

    def copy(self) -> "PoseGraph":
        other = PoseGraph()
        for node in self.nodes.values():
            other.add_node(node.id, node.pose, node.session, node.fixed)
        for e in self.edges:
            other.edges.append(GraphEdge(e.kind, e.i, e.j, e.measurement,
                                         e.information.copy(), e.kernel, e.delta))
        return other

    def session_ids(self, session: int) -> list[int]:
        return sorted(n.id for n in self.nodes.values() if n.session == session)

    def trajectory(self, session: int | None = None) -> list[Pose]:
        ids = sorted(self.nodes) if session is None else self.session_ids(session)
        return [self.nodes[i].pose for i in ids]


def _as_poses(nodes) -> dict[int, Pose]:
    if isinstance(nodes, PoseGraph):
        return nodes.poses()
    first = next(iter(nodes.values()), None)
    if isinstance(first, GraphNode):
        return {k: v.pose for k, v in nodes.items()}
    return nodes


def edge_residual(edge: GraphEdge, nodes) -> np.ndarray:
    """Unwhitened 6-vector residual (rotation part first)."""
    poses = _as_poses(nodes)
    if edge.j is None:
        err = edge.measurement.inverse() * poses[edge.i]
    else:
        err = edge.measurement.inverse() * (poses[edge.i].inverse() * poses[edge.j])
    return se3_log(err)


def whitened_residual_and_jacobians(edge: GraphEdge, nodes):
    """Whitened residual plus analytic Jacobians wrt each endpoint's tangent.

    Right perturbation convention: d/dxi of residual at T <- T exp(xi).
    Returns (W r, {node_id: W J}).
    """
    poses = _as_poses(nodes)
    w = edge.whitener()
    r = edge_residual(edge, nodes)
    if edge.j is None:
        return w @ r, {edge.i: w @ se3_right_jacobian_inv(r)}
    jac_j = se3_right_jacobian_inv(r)
    jac_i = -se3_left_jacobian_inv(r) @ adjoint(edge.measurement.inverse())
    return w @ r, {edge.i: w @ jac_i, edge.j: w @ jac_j}


def _rho(s: float, kernel: str, delta: float) -> float:
    if kernel == "huber" and s > delta:
        return delta * (s - 0.5 * delta)
    return 0.5 * s * s


def _irls_weight(s: float, kernel: str, delta: float) -> float:
    if kernel == "huber" and s > delta:
        return delta / s
    return 1.0


def _edge_cost(edge: GraphEdge, poses) -> float:
    s = float(np.linalg.norm(edge.whitener() @ edge_residual(edge, poses)))
    return _rho(s, edge.kernel, edge.delta)


def robust_cost(graph: PoseGraph, poses=None) -> float:
    """Sum of kernel-reshaped whitened residual norms over all edges."""
    poses = graph.poses() if poses is None else poses
    return sum(_edge_cost(edge, poses) for edge in graph.edges)


@dataclass
class LMParams:
    max_iterations: int = 100
    lambda0: float = 1e-4
    lambda_factor: float = 10.0
    cost_tolerance: float = 1e-6   # relative change of the robust cost
    gradient_tolerance: float = 1e-8
    lambda_max: float = 1e10


@dataclass
class OptimizationReport:
    iterations: int
    initial_cost: float
    final_cost: float
    cost_trace: list[float] = field(default_factory=list)  # accepted costs only
    reason: str = ""
    accepted_steps: int = 0
    rejected_steps: int = 0


def _build_normal_equations(graph, poses, slots):
    dim = 6 * len(slots)
    hess = np.zeros((dim, dim))
    grad = np.zeros(dim)
    for edge in graph.edges:
        wr, jacs = whitened_residual_and_jacobians(edge, poses)
        free_jacs = {nid: jac for nid, jac in jacs.items() if nid in slots}
        if not free_jacs:
            continue
        scale = math.sqrt(_irls_weight(float(np.linalg.norm(wr)), edge.kernel, edge.delta))
        wr = scale * wr
        free_jacs = {nid: scale * jac for nid, jac in free_jacs.items()}
        for nid_a, jac_a in free_jacs.items():
            a = 6 * slots[nid_a]
            grad[a:a + 6] += jac_a.T @ wr
            for nid_b, jac_b in free_jacs.items():
                b = 6 * slots[nid_b]
                hess[a:a + 6, b:b + 6] += jac_a.T @ jac_b
    return hess, grad


def optimize(graph: PoseGraph, fixed=None, params: LMParams | None = None) -> OptimizationReport:
    """Levenberg-Marquardt over the non-fixed nodes; updates poses in place."""
    params = params or LMParams()
    fixed_ids = {n.id for n in graph.nodes.values() if n.fixed}
    if fixed is not None:
        missing = set(fixed) - set(graph.nodes)
        if missing:
            raise ValueError(f"fixed ids not in graph: {sorted(missing)}")
        fixed_ids |= set(fixed)
    if not fixed_ids and not any(e.kind == "prior" for e in graph.edges):
        raise GaugeUnderdeterminedError("no fixed node and no prior edge")

    free_ids = sorted(set(graph.nodes) - fixed_ids)
    poses = graph.poses()
    cost = robust_cost(graph, poses)
    report = OptimizationReport(0, cost, cost, [cost], "max iterations")
    if not free_ids:
        report.reason = "nothing to optimize"
        return report
    slots = {nid: k for k, nid in enumerate(free_ids)}

    lam = params.lambda0
    for iteration in range(params.max_iterations):
        report.iterations = iteration + 1
        hess, grad = _build_normal_equations(graph, poses, slots)
        if iteration == 0:
            # with damping the solve below never fails, so probe the gauge
            # once, and do it before the gradient early-out: a graph that is
            # consistent but free to slide must still be reported
            eigs = np.linalg.eigvalsh(hess)
            if eigs[0] < 1e-12 * max(eigs[-1], 1.0):
                raise GaugeUnderdeterminedError(
                    "normal equations singular; fix a node or add a prior"
                )
        if float(np.linalg.norm(grad)) < params.gradient_tolerance:
            report.iterations = iteration
            report.reason = "gradient tolerance"
            break

        accepted = False
        while lam <= params.lambda_max:
            step = np.linalg.solve(hess + lam * np.eye(len(hess)), -grad)
            trial = dict(poses)
            for nid, k in slots.items():
                trial[nid] = poses[nid] * se3_exp(step[6 * k:6 * k + 6])
            trial_cost = robust_cost(graph, trial)
            if trial_cost < cost:
                accepted = True
                break
            lam *= params.lambda_factor
            report.rejected_steps += 1
        if not accepted:
            report.reason = "damping limit"
            break

        poses = trial
        report.accepted_steps += 1
        report.cost_trace.append(trial_cost)
        lam = max(lam / params.lambda_factor, 1e-15)
        relative_drop = (cost - trial_cost) / max(cost, 1e-30)
        cost = trial_cost
        if cost == 0.0 or relative_drop < params.cost_tolerance:
            report.reason = "cost tolerance"
            break

    for nid, pose in poses.items():
        graph.nodes[nid].pose = pose
    report.final_cost = cost
    return report


def evaluate_ate(estimate, ground_truth) -> float:
    """RMSE of translation errors between index-aligned trajectories."""
    if len(estimate) != len(ground_truth):
        raise ValueError("trajectories differ in length")
    if len(estimate) == 0:
        raise ValueError("empty trajectory")
    err = np.array(
        [est.translation - ref.translation for est, ref in zip(estimate, ground_truth)]
    )
    return float(np.sqrt((err ** 2).sum(axis=1).mean()))


def merge_sessions(
    graph1: PoseGraph,
    trajectory2,
    odometry2,
    loops12,
    t_init: Pose,
    session1_soft_prior: bool = False,
    soft_prior_information=None,
    t_init_prior: bool = False,
    t_init_prior_information=None,
) -> PoseGraph:
    """Combine an anchored session-1 graph with a new session's trajectory.

    ``trajectory2`` holds session-2 poses in the session-2 frame; they enter
    the merged graph as t_init * pose. ``odometry2`` entries are
    (i, j, measurement, information) with session-local indices; ``loops12``
    entries are (session1_node_id, session2_index, measurement, information)
    measuring T_1i^{-1} T_2j. Session-1 nodes are hard-fixed unless
    ``session1_soft_prior`` swaps the anchor for per-node prior edges. The
    initial guess can additionally be pinned with ``t_init_prior``, which adds
    a prior factor on the first session-2 node at its initialized pose.
    """
    merged = graph1.copy()
    if not merged.nodes:
        raise ValueError("session-1 graph has no nodes")
    for node in merged.nodes.values():
        if session1_soft_prior:
            info = soft_prior_information
            if info is None:
                info = np.eye(6) * 1e4
            merged.add_prior(node.id, node.pose, info)
        else:
            node.fixed = True

    offset = max(merged.nodes) + 1
    for idx, pose in enumerate(trajectory2):
        merged.add_node(offset + idx, t_init * pose, session=2)

    for i, j, measurement, information in odometry2:
        merged.add_edge("odometry", offset + i, offset + j, measurement, information)

    if not loops12:
        logger.warning("sessions connected only by T_init; no inter-session loop edges")
    for i1, j2, measurement, information in loops12:
        if i1 not in graph1.nodes:
            raise ValueError(f"loop references missing session-1 node {i1}")
        merged.add_edge("loop", i1, offset + j2, measurement, information)

    if t_init_prior:
        info = t_init_prior_information
        if info is None:
            info = np.eye(6) * 1e4
        first = offset
        merged.add_prior(first, merged.nodes[first].pose, info)
    return merged
