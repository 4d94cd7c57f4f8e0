"""12-state quadrotor with the minimum-effort landing cost.

State ``x = (p, v_b, eta, w_b)``: Earth-frame position, body-frame velocity,
roll/pitch/yaw angles and body angular rate. Control ``u = (s, tau_x, tau_y,
tau_z)``: total thrust and body torques. Everything broadcasts over leading
batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ControlProblem
from .errors import ParameterError, SingularityError

PITCH_GUARD = np.pi / 2 - 1e-6

P, V, ETA, W = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12)


@dataclass(frozen=True)
class QuadParams:
    m: float = 2.0
    J: tuple = (1.2416, 1.2416, 2.4832)
    g: float = 9.81
    arm: float = 0.2      # rotor mixing only
    c: float = 0.05       # rotor mixing only

    def __post_init__(self):
        if self.m <= 0 or self.g <= 0 or min(self.J) <= 0:
            raise ParameterError("mass, gravity and inertia must be positive")

    @property
    def Jv(self) -> np.ndarray:
        return np.asarray(self.J, dtype=float)

    @property
    def hover(self) -> np.ndarray:
        return np.array([self.m * self.g, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class LandingCost:
    Q_u: tuple = (1.0, 1.0, 1.0, 1.0)
    Q_pf: float = 5.0
    Q_vf: float = 10.0
    Q_etaf: float = 25.0
    Q_wf: float = 50.0

    @property
    def Qu(self) -> np.ndarray:
        return np.asarray(self.Q_u, dtype=float)

    @property
    def Qf(self) -> np.ndarray:
        return np.repeat([self.Q_pf, self.Q_vf, self.Q_etaf, self.Q_wf], 3).astype(float)


@dataclass(frozen=True)
class InitialBox:
    """Uniform box over (p, v, eta); the angular rate is fixed at zero."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.shape != (9,) or hi.shape != (9,) or np.any(lo > hi):
            raise ParameterError("box needs 9 ordered (lower, upper) pairs for p, v, eta")

    @classmethod
    def paper(cls) -> "InitialBox":
        q = np.pi / 4
        return cls((-40, -40, 20, -1, -1, -1, -q, -q, -np.pi),
                   (40, 40, 40, 1, 1, 1, q, q, np.pi))

    @classmethod
    def desk(cls, position_scale: float = 0.2, angle_scale: float = 0.5) -> "InitialBox":
        box = cls.paper()
        lo, hi = np.array(box.lower, float), np.array(box.upper, float)
        lo[:3] *= position_scale
        hi[:3] *= position_scale
        lo[6:] *= angle_scale
        hi[6:] *= angle_scale
        return cls(tuple(lo), tuple(hi))


def rotation_matrix(eta) -> np.ndarray:
    """Earth-to-body direction cosine matrix R(phi, theta, psi)."""
    eta = np.asarray(eta, dtype=float)
    sf, cf = np.sin(eta[..., 0]), np.cos(eta[..., 0])
    st, ct = np.sin(eta[..., 1]), np.cos(eta[..., 1])
    sp, cp = np.sin(eta[..., 2]), np.cos(eta[..., 2])
    R = np.empty(eta.shape[:-1] + (3, 3))
    R[..., 0, 0] = ct * cp
    R[..., 0, 1] = ct * sp
    R[..., 0, 2] = -st
    R[..., 1, 0] = st * cp * sf - sp * cf
    R[..., 1, 1] = st * sp * sf + cp * cf
    R[..., 1, 2] = ct * sf
    R[..., 2, 0] = st * cp * cf + sp * sf
    R[..., 2, 1] = st * sp * cf - cp * sf
    R[..., 2, 2] = ct * cf
    return R


def _check_pitch(eta):
    if np.any(np.abs(np.asarray(eta)[..., 1]) >= PITCH_GUARD):
        raise SingularityError("pitch within 1e-6 of +-pi/2; attitude kinematics singular")


def attitude_kinematics(eta, check: bool = True) -> np.ndarray:
    """Matrix K(eta) with eta' = K(eta) w_b."""
    eta = np.asarray(eta, dtype=float)
    if check:
        _check_pitch(eta)
    sf, cf = np.sin(eta[..., 0]), np.cos(eta[..., 0])
    tt, sec = np.tan(eta[..., 1]), 1.0 / np.cos(eta[..., 1])
    K = np.zeros(eta.shape[:-1] + (3, 3))
    K[..., 0, 0] = 1.0
    K[..., 0, 1] = sf * tt
    K[..., 0, 2] = cf * tt
    K[..., 1, 1] = cf
    K[..., 1, 2] = -sf
    K[..., 2, 1] = sf * sec
    K[..., 2, 2] = cf * sec
    return K


def _elementary(eta):
    """R = R1(phi) R2(theta) R3(psi) and the derivative of each factor."""
    sf, cf = np.sin(eta[..., 0]), np.cos(eta[..., 0])
    st, ct = np.sin(eta[..., 1]), np.cos(eta[..., 1])
    sp, cp = np.sin(eta[..., 2]), np.cos(eta[..., 2])
    z, o = np.zeros_like(sf), np.ones_like(sf)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    R1 = mat([[o, z, z], [z, cf, sf], [z, -sf, cf]])
    dR1 = mat([[z, z, z], [z, -sf, cf], [z, -cf, -sf]])
    R2 = mat([[ct, z, -st], [z, o, z], [st, z, ct]])
    dR2 = mat([[-st, z, -ct], [z, z, z], [ct, z, -st]])
    R3 = mat([[cp, sp, z], [-sp, cp, z], [z, z, o]])
    dR3 = mat([[-sp, cp, z], [-cp, -sp, z], [z, z, z]])
    return (R1, dR1), (R2, dR2), (R3, dR3)


def rotation_partials(eta):
    """dR/dphi, dR/dtheta, dR/dpsi stacked on a new axis -3.

    Closed form read off the entries of R; :func:`_elementary` gives the
    product-rule version used as a cross-check.
    """
    eta = np.asarray(eta, dtype=float)
    sf, cf = np.sin(eta[..., 0]), np.cos(eta[..., 0])
    st, ct = np.sin(eta[..., 1]), np.cos(eta[..., 1])
    sp, cp = np.sin(eta[..., 2]), np.cos(eta[..., 2])
    R = rotation_matrix(eta)
    D = np.zeros(eta.shape[:-1] + (3, 3, 3))
    D[..., 0, 1, :] = R[..., 2, :]
    D[..., 0, 2, :] = -R[..., 1, :]
    D[..., 1, 0, 0] = -st * cp
    D[..., 1, 0, 1] = -st * sp
    D[..., 1, 0, 2] = -ct
    D[..., 1, 1, 0] = ct * cp * sf
    D[..., 1, 1, 1] = ct * sp * sf
    D[..., 1, 1, 2] = -st * sf
    D[..., 1, 2, 0] = ct * cp * cf
    D[..., 1, 2, 1] = ct * sp * cf
    D[..., 1, 2, 2] = -st * cf
    D[..., 2, :, 0] = -R[..., :, 1]
    D[..., 2, :, 1] = R[..., :, 0]
    return D


def _kinematics_partials(eta):
    sf, cf = np.sin(eta[..., 0]), np.cos(eta[..., 0])
    tt, sec = np.tan(eta[..., 1]), 1.0 / np.cos(eta[..., 1])
    dphi = np.zeros(eta.shape[:-1] + (3, 3))
    dphi[..., 0, 1] = cf * tt
    dphi[..., 0, 2] = -sf * tt
    dphi[..., 1, 1] = -sf
    dphi[..., 1, 2] = -cf
    dphi[..., 2, 1] = cf * sec
    dphi[..., 2, 2] = -sf * sec
    dth = np.zeros_like(dphi)
    dth[..., 0, 1] = sf * sec ** 2
    dth[..., 0, 2] = cf * sec ** 2
    dth[..., 2, 1] = sf * sec * tt
    dth[..., 2, 2] = cf * sec * tt
    return dphi, dth


def _skew(a):
    z = np.zeros_like(a[..., 0])
    return np.stack([np.stack([z, -a[..., 2], a[..., 1]], -1),
                     np.stack([a[..., 2], z, -a[..., 0]], -1),
                     np.stack([-a[..., 1], a[..., 0], z], -1)], -2)


def _cross(a, b):
    """Cross product on the last axis (np.cross is slow for small batches)."""
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def _mv(M, v):
    return np.einsum("...ij,...j->...i", M, v)


def _dynamics(x, u, params: QuadParams):
    p_dot_R = rotation_matrix(x[..., ETA])
    v, eta, w = x[..., V], x[..., ETA], x[..., W]
    J = params.Jv
    out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (12,)))
    out[..., P] = np.einsum("...ji,...j->...i", p_dot_R, v)
    acc = -_cross(w, v) - params.g * p_dot_R[..., :, 2]
    acc[..., 2] += u[..., 0] / params.m
    out[..., V] = acc
    out[..., ETA] = _mv(attitude_kinematics(eta, check=False), w)
    out[..., W] = (-_cross(w, J * w) + u[..., 1:]) / J
    return out


def quad_dynamics(x, u, params: QuadParams = QuadParams()) -> np.ndarray:
    """State derivative of the quadrotor; raises near the pitch singularity."""
    x, u = np.asarray(x, dtype=float), np.asarray(u, dtype=float)
    _check_pitch(x[..., ETA])
    return _dynamics(x, u, params)


def safe_dynamics(x, u, params: QuadParams = QuadParams()) -> np.ndarray:
    """Like :func:`quad_dynamics` but returns NaN rows instead of raising."""
    x, u = np.asarray(x, dtype=float), np.asarray(u, dtype=float)
    out = _dynamics(x, u, params)
    bad = ~(np.abs(x[..., 7]) < PITCH_GUARD)
    if np.any(bad):
        out = np.where(bad[..., None], np.nan, out)
    return out


def dynamics_jacobians(x, u, params: QuadParams = QuadParams()):
    """Analytic ``(df/dx [...,12,12], df/du [...,12,4])``."""
    x, u = np.asarray(x, dtype=float), np.asarray(u, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    x = np.broadcast_to(x, shape + (12,))
    v, eta, w = x[..., V], x[..., ETA], x[..., W]
    J = params.Jv
    R = rotation_matrix(eta)
    dR = rotation_partials(eta)                       # (..., 3, 3, 3)
    K = attitude_kinematics(eta, check=False)
    dKphi, dKth = _kinematics_partials(eta)
    fx = np.zeros(shape + (12, 12))
    fx[..., P, V] = np.swapaxes(R, -1, -2)
    # d(R^T v)/d eta_k = dR_k^T v
    fx[..., P, ETA] = np.stack([np.einsum("...ji,...j->...i", dR[..., k, :, :], v)
                                for k in range(3)], axis=-1)
    fx[..., V, V] = -_skew(w)
    fx[..., V, W] = _skew(v)
    fx[..., V, ETA] = -params.g * np.swapaxes(dR[..., :, :, 2], -1, -2)
    fx[..., ETA, ETA] = np.stack([_mv(dKphi, w), _mv(dKth, w), np.zeros_like(w)], axis=-1)
    fx[..., ETA, W] = K
    Jw = J * w
    fx[..., W, W] = -(_skew(w) * J[None, :] - _skew(Jw)) / J[:, None]
    fu = np.zeros(shape + (12, 4))
    fu[..., 5, 0] = 1.0 / params.m
    fu[..., 9, 1] = 1.0 / J[0]
    fu[..., 10, 2] = 1.0 / J[1]
    fu[..., 11, 3] = 1.0 / J[2]
    return fx, fu


def landing_costs(x, u, params: QuadParams = QuadParams(), weights: LandingCost = LandingCost()):
    """Running cost ``(u-u_d)^T Q_u (u-u_d)`` and terminal cost ``x^T Q_f x``."""
    du = np.asarray(u, dtype=float) - params.hover
    L = np.sum(weights.Qu * du * du, axis=-1)
    x = np.asarray(x, dtype=float)
    M = np.sum(weights.Qf * x * x, axis=-1)
    return L, M


def mixing_matrix(params: QuadParams = QuadParams()) -> np.ndarray:
    l, c = params.arm, params.c
    return np.array([[1.0, 1.0, 1.0, 1.0],
                     [0.0, l, 0.0, -l],
                     [-l, 0.0, l, 0.0],
                     [c, -c, c, -c]])


def rotor_mixing(u, params: QuadParams = QuadParams()) -> np.ndarray:
    """Individual rotor thrusts F with u = E F."""
    if params.arm <= 0 or params.c == 0:
        raise ParameterError("rotor mixing needs arm > 0 and c != 0")
    E = mixing_matrix(params)
    return np.linalg.solve(E, np.asarray(u, dtype=float).T).T


def sample_initial(box: InitialBox, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Uniform draws from the box; returns (12,) or (n, 12) with w_b = 0."""
    lo, hi = np.asarray(box.lower, float), np.asarray(box.upper, float)
    size = (9,) if n is None else (n, 9)
    head = lo + (hi - lo) * rng.random(size)
    return np.concatenate([head, np.zeros(head.shape[:-1] + (3,))], axis=-1)


@dataclass(frozen=True)
class Quadrotor:
    """Landing problem bundle; picklable, so solves can cross process boundaries."""

    params: QuadParams = field(default_factory=QuadParams)
    weights: LandingCost = field(default_factory=LandingCost)
    horizon: float = 16.0

    def dynamics(self, t, x, u):
        return safe_dynamics(x, u, self.params)

    def running_cost(self, t, x, u):
        du = np.asarray(u, dtype=float) - self.params.hover
        return np.sum(self.weights.Qu * du * du, axis=-1)

    def terminal_cost(self, x):
        x = np.asarray(x, dtype=float)
        return np.sum(self.weights.Qf * x * x, axis=-1)

    def terminal_grad(self, x):
        return 2.0 * self.weights.Qf * np.asarray(x, dtype=float)

    def terminal_hessian(self, x):
        return np.diag(2.0 * self.weights.Qf)

    def f_x(self, t, x, u):
        return dynamics_jacobians(x, u, self.params)[0]

    def f_u(self, t, x, u):
        return dynamics_jacobians(x, u, self.params)[1]

    def L_x(self, t, x, u):
        return np.zeros(np.shape(x))

    def L_u(self, t, x, u):
        return 2.0 * self.weights.Qu * (np.asarray(u, dtype=float) - self.params.hover)

    def minimize_hamiltonian(self, t, x, lam):
        """Closed form ``u* = u_d - 0.5 Q_u^{-1} f_u^T lam``; f_u is state-free."""
        lam = np.asarray(lam, dtype=float)
        J = self.params.Jv
        fu_t_lam = np.concatenate([lam[..., 5:6] / self.params.m, lam[..., 9:12] / J], axis=-1)
        return self.params.hover - 0.5 * fu_t_lam / self.weights.Qu

    def costate_rhs(self, t, x, lam, u):
        """``-(L_x + f_x^T lam)`` as a vector-Jacobian product (no 12x12 build)."""
        x, lam = np.asarray(x, dtype=float), np.asarray(lam, dtype=float)
        v, eta, w = x[..., V], x[..., ETA], x[..., W]
        lp, lv, le, lw = lam[..., P], lam[..., V], lam[..., ETA], lam[..., W]
        J = self.params.Jv
        R = rotation_matrix(eta)
        dR = rotation_partials(eta)
        K = attitude_kinematics(eta, check=False)
        dKphi, dKth = _kinematics_partials(eta)
        g = np.zeros(np.broadcast_shapes(x.shape, lam.shape))
        # p does not enter f
        g[..., V] = _mv(R, lp) + _cross(w, lv)
        # eta: lp . dR_k^T v  -  g lv . dR_k[:, 2]  +  le . dK_k w
        g_eta = (np.einsum("...i,...kij,...j->...k", v, dR, lp)
                 - self.params.g * np.einsum("...i,...ki->...k", lv, dR[..., :, :, 2]))
        g_eta[..., 0] += np.einsum("...i,...ij,...j->...", le, dKphi, w)
        g_eta[..., 1] += np.einsum("...i,...ij,...j->...", le, dKth, w)
        g[..., ETA] = g_eta
        mu = lw / J
        g[..., W] = (_cross(lv, v) + np.einsum("...ji,...j->...i", K, le)
                     - _cross(J * w, mu) - J * _cross(mu, w))
        return -g

    def problem(self) -> ControlProblem:
        return ControlProblem(12, 4, self.horizon, self.dynamics, self.running_cost,
                              self.terminal_cost, name="quadrotor-landing")

    def tpbvp(self):
        from .pmp import TpbvpProblem
        return TpbvpProblem(
            base=self.problem(), f_x=self.f_x, f_u=self.f_u, L_x=self.L_x, L_u=self.L_u,
            grad_M=self.terminal_grad, hess_M=self.terminal_hessian,
            hamiltonian_minimizer=self.minimize_hamiltonian, costate=self.costate_rhs,
            target_state=np.zeros(12), reference_control=self.params.hover)
