"""Independent reference computations shared by unit and acceptance tests."""

import numpy as np

from ivp_sampling import lqr, nn
from ivp_sampling.core import integrate_ivp

ARCHITECTURES = [
    nn.MlpSpec(2, (), 1),
    nn.MlpSpec(4, (8,), 1, "tanh"),
    nn.MlpSpec(3, (16, 16), 2, "relu"),
    nn.MlpSpec(5, (10, 7, 6), 3, ("tanh", "relu", "tanh")),
    nn.MlpSpec(13, (128, 128), 4, "tanh"),
]


def gradient_check(spec, seed=0, n_coords=200, batch=32, h=1e-6):
    """Relative error of the backprop gradient against central differences."""
    rng = np.random.default_rng(seed)
    params = nn.init_params(spec, rng)
    theta = params.flat()
    # non-trivial biases so relu units are not all at the same kink
    Z = rng.normal(size=(batch, spec.input_dim))
    U = rng.normal(size=(batch, spec.output_dim))
    _, g = nn.loss_and_grad(params, (Z, U))
    idx = rng.choice(theta.size, size=min(n_coords, theta.size), replace=False)
    fd = np.empty(len(idx))
    for j, i in enumerate(idx):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        lp, _ = nn.loss_and_grad(nn.MlpParams.from_flat(spec, tp), (Z, U))
        lm, _ = nn.loss_and_grad(nn.MlpParams.from_flat(spec, tm), (Z, U))
        fd[j] = (lp - lm) / (2 * h)
    return float(np.linalg.norm(g[idx] - fd) / max(np.linalg.norm(fd), 1e-300))


def mmd_brute(X, Y):
    """Double-loop biased MMD with k(x, y) = exp(-|x - y|^2 / 2)."""
    def k(a, b):
        d = a - b
        return np.exp(-0.5 * float(d @ d))
    kxx = sum(k(a, b) for a in X for b in X) / len(X) ** 2
    kyy = sum(k(a, b) for a in Y for b in Y) / len(Y) ** 2
    kxy = sum(k(a, b) for a in X for b in Y) / (len(X) * len(Y))
    return np.sqrt(max(0.0, kxx + kyy - 2 * kxy))


def rk4_orders(steps=(0.4, 0.2, 0.1, 0.05), T=2.0):
    """Empirical RK4 orders on the scalar LQR dynamics x' = u.

    The optimal LQR closed loop has a trajectory linear in t, which RK4
    integrates exactly, so the order is measured under the feedback u = -x
    instead: x(t) = exp(-t).
    """
    prob = lqr.lqr_problem(T)
    exact = np.exp(-T)
    errs = np.array([abs(integrate_ivp(prob, lambda t, x: -x, np.array([1.0]), 0.0, T, dt)
                         .states[-1, 0] - exact) for dt in steps])
    return np.log2(errs[:-1] / errs[1:])


def costate_fd_error(quad, n_points=20, seed=0, h=1e-6):
    """Worst relative error of costate_rhs against -dH/dx by central differences."""
    from ivp_sampling.quadrotor import quad_dynamics
    rng = np.random.default_rng(seed)
    worst = 0.0
    E = np.eye(12)
    for _ in range(n_points):
        x = rng.uniform(-1, 1, size=12)
        lam = rng.normal(size=12)
        u = quad.params.hover + rng.normal(size=4)
        H = lambda xx: quad.running_cost(0.0, xx, u) + lam @ quad_dynamics(xx, u, quad.params)
        fd = -np.array([(H(x + h * E[i]) - H(x - h * E[i])) / (2 * h) for i in range(12)])
        an = quad.costate_rhs(0.0, x, lam, u)
        worst = max(worst, np.linalg.norm(an - fd) / max(1.0, np.linalg.norm(fd)))
    return worst
