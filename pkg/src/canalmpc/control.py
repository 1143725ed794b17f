"""Per-coalition control: disturbance estimation, setpoints, and MPC.

Each coalition runs an offset-free regulation scheme.  A Kalman filter on
the augmented state [xi; w] treats the boundary coupling w (downstream
outflow of the most downstream member) as a constant integrating
disturbance, so steady-state level errors vanish even under model-plant
mismatch.  The filter measures the member level errors and the gate flows
(gates carry local flow controllers, hence flow meters); without the flow
measurements the pair (flows, w) would drift along an unobservable
direction.

The control action applied at time k is

    u = K zeta + u_s + v'(0)

where (xi_s, u_s) is the feasible setpoint, zeta = xi - xi_s, K the
coalition feedback gain, and v' the first move of the auxiliary MPC that
rectifies the feedback law against the hard input box and the soft flow
floor.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import numerics
from .canal import CoalitionModel
from .numerics import QpProblem, solve_linear, solve_qp


@dataclass
class ControllerConfig:
    """Controller parameters; defaults reproduce the case-study tuning."""

    prediction_horizon: int = 10     # N_p
    control_horizon: int = 3         # N_c
    level_weight: float = 250.0      # Q, on level errors only
    input_weight: float = 2800.0     # R, on flow increments
    slack_weight: float = 1.0e4      # S, on flow-floor violations
    setpoint_slack_weight: float = 1.0e3  # G, on the setpoint equality slack
    link_cost: float = 0.6           # c_l
    sample_time: float = 300.0       # seconds
    input_bound: float = 1.0         # |dq| <= bound, m^3/s
    flow_margin: float = 0.01        # q >= margin, m^3/s (QP-representable floor)
    # Kalman settings: the disturbance channel gets the largest drive so the
    # estimate adapts within tens of steps.
    kf_flow_process_noise: float = 1e-4
    kf_level_process_noise: float = 1e-6
    kf_omega_process_noise: float = 1e-2
    kf_measurement_noise: float = 1e-4
    kf_prior_flow: float = 1.0
    kf_prior_level: float = 1e-2
    kf_prior_omega: float = 10.0
    history_capacity: int = 20
    # Supervisory rollout length when scoring candidate topologies.  Long
    # enough to expose slow cross-coalition externalities (the slowest pool
    # settles in ~100 steps); the topology choice itself still applies for
    # t_lambda steps only.
    preview_horizon: int = 120

    def __post_init__(self):
        if self.control_horizon > self.prediction_horizon:
            raise ValueError("control horizon must not exceed prediction horizon")
        if self.control_horizon < 1:
            raise ValueError("control horizon must be at least 1")
        for name in ("input_weight", "slack_weight", "setpoint_slack_weight",
                     "sample_time", "input_bound"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.level_weight < 0.0 or self.link_cost < 0.0:
            raise ValueError("weights must be nonnegative")


def weight_matrices(coalition: CoalitionModel, cfg: ControllerConfig):
    """Per-coalition state and input weights (state weight on levels only)."""
    q = cfg.level_weight * (coalition.gamma.T @ coalition.gamma)
    r = cfg.input_weight * np.eye(coalition.m)
    return q, r


# ---------------------------------------------------------------------------
# Kalman filter with integrating boundary disturbance
# ---------------------------------------------------------------------------


@dataclass
class KalmanState:
    """Augmented estimate [xi_hat; omega_hat] and its covariance."""

    xhat: np.ndarray
    cov: np.ndarray

    def split(self, n):
        return self.xhat[:n], self.xhat[n:]


@dataclass
class Sample:
    """One global snapshot kept for filter warm-starts."""

    levels: np.ndarray
    flows: np.ndarray
    inputs: np.ndarray
    offtakes: np.ndarray


class HistoryBuffer:
    """Ring buffer of the last M global samples, iterated oldest first."""

    def __init__(self, capacity=20):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)

    def push(self, levels, flows, inputs, offtakes):
        self._items.append(
            Sample(
                np.array(levels, dtype=float),
                np.array(flows, dtype=float),
                np.array(inputs, dtype=float),
                np.array(offtakes, dtype=float),
            )
        )

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


def _augmented_matrices(coalition, cfg):
    n, r = coalition.n, coalition.n_channels
    f_mat = np.zeros((n + r, n + r))
    f_mat[:n, :n] = coalition.Xi
    f_mat[:n, n:] = coalition.Psi
    f_mat[n:, n:] = np.eye(r)
    # Measured: member level errors and gate flows.
    c_mat = np.zeros((2 * coalition.m, n + r))
    c_mat[: coalition.m, :n] = coalition.gamma
    c_mat[coalition.m:, :n] = coalition.gate_flow_selector()
    w_diag = np.empty(n + r)
    w_diag[:n] = cfg.kf_flow_process_noise
    w_diag[coalition.level_rows()] = cfg.kf_level_process_noise
    w_diag[n:] = cfg.kf_omega_process_noise
    v_mat = cfg.kf_measurement_noise * np.eye(2 * coalition.m)
    return f_mat, c_mat, np.diag(w_diag), v_mat


def _measurement(coalition, levels, flows):
    """Coalition measurement vector from global level/flow measurements."""
    idx = [s - 1 for s in coalition.members]
    return np.concatenate([np.asarray(levels)[idx], np.asarray(flows)[idx]])


def _kf_predict(coalition, kf, u, rho, cfg):
    f_mat, _, w_mat, _ = _augmented_matrices(coalition, cfg)
    n = coalition.n
    xhat = f_mat @ kf.xhat
    xhat[:n] += coalition.Up @ u + coalition.Phi @ rho
    cov = f_mat @ kf.cov @ f_mat.T + w_mat
    return KalmanState(xhat, 0.5 * (cov + cov.T))


def _kf_correct(coalition, kf, y, cfg):
    _, c_mat, _, v_mat = _augmented_matrices(coalition, cfg)
    s_mat = c_mat @ kf.cov @ c_mat.T + v_mat
    try:
        gain = solve_linear(s_mat, c_mat @ kf.cov).T
    except numerics.SingularMatrixError:
        raise ValueError(
            "singular innovation covariance: noise settings are mis-specified"
        ) from None
    xhat = kf.xhat + gain @ (y - c_mat @ kf.xhat)
    ikc = np.eye(kf.cov.shape[0]) - gain @ c_mat
    cov = ikc @ kf.cov @ ikc.T + gain @ v_mat @ gain.T
    return KalmanState(xhat, 0.5 * (cov + cov.T))


def kf_update(coalition, kf, u_applied, rho, y, cfg) -> KalmanState:
    """One predict/correct cycle: state advances under (u, rho), then y lands."""
    if y.shape[0] != 2 * coalition.m:
        raise ValueError("measurement dimension mismatch")
    return _kf_correct(coalition, _kf_predict(coalition, kf, u_applied, rho, cfg), y, cfg)


def kf_init(coalition, history: HistoryBuffer, cfg) -> KalmanState:
    """Warm-start a coalition filter by replaying the shared history buffer.

    The prior is a steady state consistent with the oldest sample: flow
    slots filled with the measured gate flow, levels as measured, and each
    disturbance channel set to the mass-balance residual q_s - p_s of the
    member s it attaches to (a zero prior would contradict the measured
    flows and, producing no innovation at steady state, never get
    corrected).  The remaining samples are then replayed through the
    filter.
    """
    if len(history) < 1:
        raise ValueError("history must hold at least one sample")
    samples = list(history)
    n, r = coalition.n, coalition.n_channels
    idx = [s - 1 for s in coalition.members]
    first = samples[0]

    xhat = np.zeros(n + r)
    for s in coalition.members:
        sl = coalition.member_slice(s)
        xhat[sl.start: sl.stop - 1] = first.flows[s - 1]
        xhat[sl.stop - 1] = first.levels[s - 1]
    for c, source in enumerate(coalition.coupling_sources):
        attached = source - 1
        xhat[n + c] = first.flows[attached - 1] - first.offtakes[attached - 1]
    prior = np.empty(n + r)
    prior[:n] = cfg.kf_prior_flow
    prior[coalition.level_rows()] = cfg.kf_prior_level
    prior[n:] = cfg.kf_prior_omega
    kf = KalmanState(xhat, np.diag(prior))

    kf = _kf_correct(coalition, kf, _measurement(coalition, first.levels, first.flows), cfg)
    for prev, cur in zip(samples, samples[1:]):
        kf = _kf_predict(coalition, kf, prev.inputs[idx], prev.offtakes[idx], cfg)
        kf = _kf_correct(coalition, kf, _measurement(coalition, cur.levels, cur.flows), cfg)
    return kf


# ---------------------------------------------------------------------------
# Setpoints
# ---------------------------------------------------------------------------


@dataclass
class Setpoint:
    """Feasible operating point: state xi_s, input u_s, equality slack sigma."""

    xi_s: np.ndarray
    u_s: np.ndarray
    sigma: np.ndarray
    feasible: bool


def compute_setpoint(coalition, rho, omega):
    """Steady state with zero level errors compensating offtakes and omega.

    Solves the square linear system stacking (I - Xi) xi - Up u = Phi rho +
    Psi omega with gamma xi = 0.
    """
    n, m = coalition.n, coalition.m
    rho = np.asarray(rho, dtype=float).reshape(m)
    omega = np.asarray(omega, dtype=float).reshape(coalition.n_channels)
    lhs = np.zeros((n + m, n + m))
    lhs[:n, :n] = np.eye(n) - coalition.Xi
    lhs[:n, n:] = -coalition.Up
    lhs[n:, :n] = coalition.gamma
    rhs = np.concatenate([coalition.Phi @ rho + coalition.Psi @ omega, np.zeros(m)])
    try:
        sol = solve_linear(lhs, rhs)
    except numerics.SingularMatrixError as exc:
        raise numerics.SingularMatrixError(
            f"setpoint system singular for coalition {coalition.members}"
        ) from exc
    return sol[:n], sol[n:]


def feasible_setpoint(coalition, xi_bar, u_bar, xi_k, gain, cfg) -> Setpoint:
    """Project the ideal setpoint onto the constraints (nearest feasible).

    Minimizes (u_s - u_bar)' R (u_s - u_bar) + xi_s' Q xi_s + sigma' G sigma
    subject to the slacked steady-state equality, the flow floor on every
    flow section, and the input box evaluated at the current state.
    """
    n, m = coalition.n, coalition.m
    q_mat, r_mat = weight_matrices(coalition, cfg)
    g_mat = cfg.setpoint_slack_weight * np.eye(n)
    nv = n + m + n  # xi_s, u_s, sigma

    h_mat = np.zeros((nv, nv))
    h_mat[:n, :n] = 2.0 * q_mat
    h_mat[n:n + m, n:n + m] = 2.0 * r_mat
    h_mat[n + m:, n + m:] = 2.0 * g_mat
    f_vec = np.zeros(nv)
    f_vec[n:n + m] = -2.0 * r_mat @ u_bar

    aeq = np.zeros((n, nv))
    aeq[:, :n] = np.eye(n) - coalition.Xi
    aeq[:, n:n + m] = -coalition.Up
    aeq[:, n + m:] = -np.eye(n)
    beq = (np.eye(n) - coalition.Xi) @ xi_bar - coalition.Up @ u_bar

    flow_sel = coalition.flow_selector()
    n_q = flow_sel.shape[0]
    bound = cfg.input_bound
    ain = np.zeros((n_q + 2 * m, nv))
    bin_ = np.zeros(n_q + 2 * m)
    ain[:n_q, :n] = -flow_sel
    bin_[:n_q] = -cfg.flow_margin
    # K (xi_k - xi_s) + u_s within the input box
    k_xi = gain @ xi_k
    ain[n_q:n_q + m, :n] = -gain
    ain[n_q:n_q + m, n:n + m] = np.eye(m)
    bin_[n_q:n_q + m] = bound - k_xi
    ain[n_q + m:, :n] = gain
    ain[n_q + m:, n:n + m] = -np.eye(m)
    bin_[n_q + m:] = bound + k_xi

    # Feasible start: clip the ideal flows to the floor, pick u_s that puts
    # the total input on the box, let sigma absorb the equality.
    xi0 = xi_bar.copy()
    flow_rows = coalition.flow_rows()
    xi0[flow_rows] = np.maximum(xi0[flow_rows], cfg.flow_margin)
    t_vec = gain @ (xi_k - xi0)
    u0 = np.clip(t_vec, -bound, bound) - t_vec
    sigma0 = (np.eye(n) - coalition.Xi) @ xi0 - coalition.Up @ u0 - beq
    start = np.concatenate([xi0, u0, sigma0])

    sol = solve_qp(QpProblem(h_mat, f_vec, aeq, beq, ain, bin_), start=start)
    if sol.status == numerics.INFEASIBLE:
        raise RuntimeError(
            f"setpoint projection infeasible for coalition {coalition.members}"
        )
    xi_s = sol.x[:n]
    u_s = sol.x[n:n + m]
    sigma = sol.x[n + m:]
    return Setpoint(xi_s, u_s, sigma, feasible=sol.optimal)


# ---------------------------------------------------------------------------
# Auxiliary MPC
# ---------------------------------------------------------------------------


@dataclass
class MpcProgram:
    """State-independent parts of the condensed MPC QP for one coalition.

    The soft flow floor is imposed for t in [1, N_c]: the steps the free
    moves can actually steer.  Penalizing predicted floor violations of the
    pure-feedback tail would let the slack cost coerce the applied input
    into raising flows whenever a level error cannot be drained (terminal
    reach with zero offtake), destabilizing the loop; the hard input box is
    kept over the whole horizon, which is what recursive feasibility of the
    applied law needs.
    """

    n_p: int
    n_c: int
    n_q: int
    m: int
    n_floor: int                # floor-constrained steps (= N_c)
    acl_powers: list            # Acl^t, t = 0..N_p
    t_maps: list                # zeta(t) = acl_powers[t] zeta0 + t_maps[t] @ u
    h_mat: np.ndarray           # full Hessian over (u, eps)
    f_map: np.ndarray           # f_u = f_map @ zeta0
    floor_lhs: np.ndarray
    box_lhs: np.ndarray
    gain: np.ndarray
    p_mat: np.ndarray


def prepare_mpc(coalition, gain, p_mat, cfg) -> MpcProgram:
    """Condense the coalition MPC into dense QP blocks (done once per gain set)."""
    n, m = coalition.n, coalition.m
    n_p, n_c = cfg.prediction_horizon, cfg.control_horizon
    q_mat, r_mat = weight_matrices(coalition, cfg)
    acl = coalition.Xi + coalition.Up @ gain

    powers = [np.eye(n)]
    for _ in range(n_p):
        powers.append(acl @ powers[-1])

    nu = m * n_c
    t_maps = [np.zeros((n, nu))]
    for t in range(1, n_p + 1):
        tm = acl @ t_maps[t - 1]
        if t - 1 < n_c:
            tm = tm.copy()
            tm[:, (t - 1) * m: t * m] += coalition.Up
        t_maps.append(tm)

    def u_select(t):
        e = np.zeros((m, nu))
        if t < n_c:
            e[:, t * m: (t + 1) * m] = np.eye(m)
        return e

    h_uu = np.zeros((nu, nu))
    f_map = np.zeros((nu, n))
    for t in range(1, n_p):
        h_uu += 2.0 * t_maps[t].T @ q_mat @ t_maps[t]
        f_map += 2.0 * t_maps[t].T @ q_mat @ powers[t]
    h_uu += 2.0 * t_maps[n_p].T @ p_mat @ t_maps[n_p]
    f_map += 2.0 * t_maps[n_p].T @ p_mat @ powers[n_p]
    for t in range(n_p):
        m_t = gain @ t_maps[t] + u_select(t)
        h_uu += 2.0 * m_t.T @ r_mat @ m_t
        f_map += 2.0 * m_t.T @ r_mat @ gain @ powers[t]

    flow_sel = coalition.flow_selector()
    n_q = flow_sel.shape[0]
    n_floor = n_c
    n_eps = n_q * n_floor
    nz = nu + n_eps
    h_mat = np.zeros((nz, nz))
    h_mat[:nu, :nu] = h_uu
    h_mat[nu:, nu:] = 2.0 * cfg.slack_weight * np.eye(n_eps)

    # Soft flow floor for t = 1..N_c plus eps >= 0.
    floor_lhs = np.zeros((2 * n_eps, nz))
    for t in range(1, n_floor + 1):
        r0 = (t - 1) * n_q
        floor_lhs[r0:r0 + n_q, :nu] = -flow_sel @ t_maps[t]
        floor_lhs[r0:r0 + n_q, nu + r0: nu + r0 + n_q] = -np.eye(n_q)
    floor_lhs[n_eps:, nu:] = -np.eye(n_eps)

    # Hard input box for t = 0..N_p.
    box_lhs = np.zeros((2 * m * (n_p + 1), nz))
    for t in range(n_p + 1):
        rows = slice(t * m, (t + 1) * m)
        expr = gain @ t_maps[t] + (u_select(t) if t <= n_p - 1 else np.zeros((m, nu)))
        box_lhs[rows, :nu] = expr
        box_lhs[m * (n_p + 1) + t * m: m * (n_p + 1) + (t + 1) * m, :nu] = -expr

    return MpcProgram(
        n_p=n_p, n_c=n_c, n_q=n_q, m=m, n_floor=n_floor,
        acl_powers=powers, t_maps=t_maps,
        h_mat=h_mat, f_map=f_map,
        floor_lhs=floor_lhs, box_lhs=box_lhs,
        gain=gain, p_mat=p_mat,
    )


@dataclass
class MpcStep:
    vprime: np.ndarray   # (N_c, m) free moves, zero afterwards
    eps: np.ndarray      # (N_p, n_q) flow-floor slacks for t = 1..N_p
    status: str
    objective: float


def mpc_step(coalition, zeta0, setpoint, gain, p_mat, cfg, prepared=None) -> MpcStep:
    """Solve the coalition MPC around the feedback law.

    Minimizes the shifted-state cost over v'(0..N_c-1) and nonnegative
    flow-floor slacks, subject to the closed-loop prediction, the soft flow
    floor, and the hard input box at every step of the horizon.
    """
    prog = prepared if prepared is not None else prepare_mpc(coalition, gain, p_mat, cfg)
    n_p, n_c, n_q, m = prog.n_p, prog.n_c, prog.n_q, prog.m
    nu = m * n_c
    n_eps = n_q * prog.n_floor
    flow_sel = coalition.flow_selector()
    bound = cfg.input_bound
    xi_s, u_s = setpoint.xi_s, setpoint.u_s

    states = [p @ zeta0 for p in prog.acl_powers]
    f_vec = np.zeros(nu + n_eps)
    f_vec[:nu] = prog.f_map @ zeta0

    floor_rhs = np.empty(2 * n_eps)
    for t in range(1, prog.n_floor + 1):
        floor_rhs[(t - 1) * n_q: t * n_q] = (
            flow_sel @ (states[t] + xi_s) - cfg.flow_margin
        )
    floor_rhs[n_eps:] = 0.0

    box_rhs = np.empty(2 * m * (n_p + 1))
    for t in range(n_p + 1):
        base = prog.gain @ states[t] + u_s
        box_rhs[t * m: (t + 1) * m] = bound - base
        box_rhs[m * (n_p + 1) + t * m: m * (n_p + 1) + (t + 1) * m] = bound + base

    ain = np.vstack([prog.floor_lhs, prog.box_lhs])
    bin_ = np.concatenate([floor_rhs, box_rhs])

    start = _feasible_mpc_start(coalition, prog, zeta0, setpoint, cfg)
    sol = solve_qp(QpProblem(prog.h_mat, f_vec, None, None, ain, bin_), start=start)
    if sol.status == numerics.INFEASIBLE:
        return MpcStep(
            np.zeros((n_c, m)), np.zeros((prog.n_floor, n_q)),
            numerics.INFEASIBLE, float("nan"),
        )
    vprime = sol.x[:nu].reshape(n_c, m)
    eps = sol.x[nu:].reshape(prog.n_floor, n_q)
    return MpcStep(vprime, eps, sol.status, sol.objective)


def _feasible_mpc_start(coalition, prog, zeta0, setpoint, cfg):
    """Clamp the pure feedback law into the box and absorb floors into slacks."""
    n_p, n_c, n_q, m = prog.n_p, prog.n_c, prog.n_q, prog.m
    bound = cfg.input_bound
    flow_sel = coalition.flow_selector()
    acl = coalition.Xi + coalition.Up @ prog.gain
    u = np.zeros((n_c, m))
    z = zeta0.copy()
    traj = [z]
    feasible = True
    for t in range(n_p):
        desired = prog.gain @ z + setpoint.u_s
        if t < n_c:
            total = np.clip(desired, -bound, bound)
            u[t] = total - desired
            z = acl @ z + coalition.Up @ u[t]
        else:
            if np.max(np.abs(desired)) > bound + 1e-12:
                feasible = False
            z = acl @ z
        traj.append(z)
    if np.max(np.abs(prog.gain @ traj[n_p] + setpoint.u_s)) > bound + 1e-12:
        feasible = False
    if not feasible:
        return None
    eps = np.zeros((prog.n_floor, n_q))
    for t in range(1, prog.n_floor + 1):
        flows = flow_sel @ (traj[t] + setpoint.xi_s)
        eps[t - 1] = np.maximum(0.0, cfg.flow_margin - flows)
    return np.concatenate([u.reshape(-1), eps.reshape(-1)])


def control_action(zeta, u_s, vprime, gain):
    """u = K zeta + u_s + v'(0); inside the box by the t = 0 MPC constraint."""
    return gain @ zeta + u_s + vprime[0]


# ---------------------------------------------------------------------------
# Per-coalition controller state machine
# ---------------------------------------------------------------------------


@dataclass
class StepLog:
    """Per-step controller record (feeds the trace and cost accounting)."""

    members: tuple
    xi_s: np.ndarray
    u_s: np.ndarray
    sigma_norm: float
    omega_hat: np.ndarray
    qp_status: str
    n_decision_inputs: int


class CoalitionController:
    """One coalition's filter, gains and condensed MPC, stepped by the simulator."""

    def __init__(self, coalition, gain, p_mat, cfg):
        self.model = coalition
        self.gain = gain
        self.p_mat = p_mat
        self.cfg = cfg
        self.program = prepare_mpc(coalition, gain, p_mat, cfg)
        self.kf: KalmanState | None = None

    def warm_start(self, history):
        self.kf = kf_init(self.model, history, self.cfg)

    def advance_filter(self, u_prev_global, rho_prev_global, levels, flows):
        idx = [s - 1 for s in self.model.members]
        y = _measurement(self.model, levels, flows)
        self.kf = kf_update(
            self.model,
            self.kf,
            np.asarray(u_prev_global)[idx],
            np.asarray(rho_prev_global)[idx],
            y,
            self.cfg,
        )

    def compute(self, rho_global):
        """Setpoint projection plus MPC; returns (u, setpoint, log)."""
        model = self.model
        idx = [s - 1 for s in model.members]
        rho = np.asarray(rho_global)[idx]
        xi_hat, omega_hat = self.kf.split(model.n)
        xi_bar, u_bar = compute_setpoint(model, rho, omega_hat)
        setpoint = feasible_setpoint(model, xi_bar, u_bar, xi_hat, self.gain, self.cfg)
        zeta = xi_hat - setpoint.xi_s
        step = mpc_step(model, zeta, setpoint, self.gain, self.p_mat, self.cfg,
                        prepared=self.program)
        if step.status == numerics.INFEASIBLE:
            raise RuntimeError(
                f"MPC infeasible for coalition {model.members}"
            )
        u = control_action(zeta, setpoint.u_s, step.vprime, self.gain)
        log = StepLog(
            members=model.members,
            xi_s=setpoint.xi_s,
            u_s=setpoint.u_s,
            sigma_norm=float(np.linalg.norm(setpoint.sigma, np.inf)),
            omega_hat=omega_hat.copy(),
            qp_status=step.status,
            n_decision_inputs=model.m * self.cfg.control_horizon,
        )
        return u, setpoint, log
