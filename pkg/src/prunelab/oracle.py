"""Ground-truth machinery the estimators are verified against.

Three independent routes to the true loss change of a mask edit:

* retraining the surviving weights to convergence (`true_loss_change`),
* a gated least-squares testbed whose optimum and loss are available in
  closed form through the normal equations (`make_quadratic_testbed`),
* brute-force finite-difference second-derivative matrices on small
  models (`fd_mixed_matrix`, `fd_hessian`).

`bound_check` estimates the constants of the error bounds on a dense
grid over a declared compact region and verifies the measured
|estimate - truth| against both bounds.
"""

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from . import net
from .autograd import FdConfig, LeafId, directional_second_derivative
from .costmodel import ChannelId
from .influence import (ModelProblem, SolverChoice,
                        hessian_vector_product, prop1_from_problem)
from .net import GatedModel, TrainConfig
from .tensor import SeededRng

_PARAM_GUARD = 2000


@dataclass
class RetrainConfig:
    """Convergence policy for retraining oracles.

    Convex problems run full-batch gradient descent with step 1/Lipschitz
    until the gradient inf-norm drops below `grad_tol`. Neural models run
    momentum SGD budgeted by `train` (no tolerance check).
    """
    grad_tol: float = 1e-8
    max_epochs: int = 5000
    train: Optional[TrainConfig] = None


class QuadraticTestbed:
    """Gated least squares: loss(W, m) = ||X (m*W) - y||^2 / (2n).

    Exactly quadratic in W for any fixed mask, so second-order estimates
    are exact; the closed-form optimum per mask support comes from the
    normal equations on the active columns.
    """

    def __init__(self, x, y):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        n, d = self.x.shape
        self.gates = np.ones(d)
        self.gate_ids = [ChannelId(0, j) for j in range(d)]
        w_star, _ = self.closed_form(self.gates)
        self.weights = w_star

    # -- closed-form oracle (normal equations on active columns) --

    def closed_form(self, mask):
        mask = np.asarray(mask, dtype=np.float64)
        active = np.nonzero(mask > 0)[0]
        n = self.x.shape[0]
        w = np.zeros(self.x.shape[1])
        if active.size == 0:
            resid = self.y
        else:
            xa = self.x[:, active]
            gram = xa.T @ xa
            beta = np.linalg.solve(gram, xa.T @ self.y)
            w[active] = beta / mask[active]
            resid = xa @ beta - self.y
        loss = 0.5 * float(resid @ resid) / n
        return w, loss

    # -- differentiable-problem interface (same machinery as the nets) --

    def _graph(self, wvec, gvec):
        wv = ag.Var(wvec if wvec is not None else self.weights)
        gv = ag.Var(gvec if gvec is not None else self.gates)
        beta = ag.mul(wv, gv)
        pred = ag.matmul(ag.Var(self.x), ag.reshape(beta, (-1, 1)))
        resid = pred - ag.Var(self.y.reshape(-1, 1))
        loss = ag.mul_const(ag.vmean(ag.mul(resid, resid)), 0.5)
        leaves = {LeafId("w", "weight"): wv, LeafId("g", "mask"): gv}
        return loss, leaves

    def loss(self, wvec=None, gvec=None):
        loss, _ = self._graph(wvec, gvec)
        return float(loss.data)

    def grad_weights(self, wvec=None, gvec=None):
        loss, leaves = self._graph(wvec, gvec)
        return ag.backward(loss, leaves)[LeafId("w", "weight")]

    def grad_gates(self, wvec=None, gvec=None):
        loss, leaves = self._graph(wvec, gvec)
        return ag.backward(loss, leaves)[LeafId("g", "mask")]

    def with_gates(self, gvec):
        other = QuadraticTestbed.__new__(QuadraticTestbed)
        other.x, other.y = self.x, self.y
        other.gates = np.asarray(gvec, dtype=np.float64).copy()
        other.gate_ids = self.gate_ids
        other.weights = self.weights
        return other


def make_quadratic_testbed(seed, n=64, d=8, correlation=0.0):
    """Correlated-column least-squares instance, trained at the full mask.

    Columns are rescaled so the full-mask weight Hessian has unit spectral
    norm; every masked sub-Hessian then has eigenvalues in (0, 1].
    """
    if d > 64:
        raise ValueError("d must be <= 64")
    if not -1.0 < correlation < 1.0:
        raise ValueError("|correlation| must be < 1")
    rng = SeededRng(seed)
    shared = rng.stream("shared").normal((n, 1))
    indep = rng.stream("indep").normal((n, d))
    x = np.sqrt(correlation) * shared + np.sqrt(1.0 - correlation) * indep
    eigs = np.linalg.eigvalsh(x.T @ x / n)
    if eigs[0] <= 1e-10:
        raise ValueError("singular active Gram matrix")
    x = x / np.sqrt(eigs[-1])
    w_true = rng.stream("wtrue").normal((d,))
    noise = rng.stream("noise").normal((n,), 0.0, 0.3)
    y = x @ w_true + noise
    return QuadraticTestbed(x, y)


# ---- retraining oracle ----

def _estimate_lipschitz(problem, gvec, iters=15):
    rng = SeededRng(1234).stream("power")
    v = rng.normal((problem.weights.size,))
    v /= max(np.linalg.norm(v), 1e-300)
    at = problem.with_gates(gvec)
    lam = 1.0
    for _ in range(iters):
        hv = hessian_vector_product(at, v)
        lam = float(np.linalg.norm(hv))
        if lam < 1e-12:
            return 1.0
        v = hv / lam
    return lam


def _retrain_convex(problem, gvec, cfg):
    w = problem.weights.copy()
    lr = 1.0 / (1.05 * _estimate_lipschitz(problem, gvec))
    converged = False
    for _ in range(cfg.max_epochs):
        g = problem.grad_weights(wvec=w, gvec=gvec)
        if np.max(np.abs(g)) <= cfg.grad_tol:
            converged = True
            break
        w = w - lr * g
    return w, converged


def true_loss_change(target, mask_after, dataset=None, retrain_cfg=None):
    """Loss change after retraining the surviving weights to convergence.

    `target` is either a differentiable problem (quadratic testbed) or a
    GatedModel with `dataset`. Non-convergence within budget is reported
    as a warning, not an error.
    """
    cfg = retrain_cfg or RetrainConfig()
    after = np.asarray(mask_after, dtype=np.float64)
    if isinstance(target, GatedModel):
        tcfg = cfg.train or TrainConfig(epochs=200, batch_size=64, lr=0.05,
                                        momentum=0.9, weight_decay=0.0, seed=17)
        loss_before, _ = net.evaluate(target, dataset)
        retrained = target.clone()
        retrained.gates = net.unflatten_gates(retrained, after)
        net.train(retrained, dataset, tcfg)
        loss_after, _ = net.evaluate(retrained, dataset)
        return loss_after - loss_before
    loss_before = target.loss()
    w_hat, converged = _retrain_convex(target, after, cfg)
    if not converged:
        warnings.warn("retraining did not reach grad tolerance within budget")
    loss_after = target.loss(wvec=w_hat, gvec=after)
    return loss_after - loss_before


# ---- brute-force derivative matrices ----

def _as_problem(target, batches):
    if isinstance(target, GatedModel):
        return ModelProblem(target, batches)
    return target


def fd_mixed_matrix(target, batches=None, fd=None):
    """Brute-force mixed second derivatives, row j = d(grad_W L)/d(gate j)."""
    problem = _as_problem(target, batches)
    fd = fd or FdConfig()
    n_w = problem.weights.size
    n_m = problem.gates.size
    if n_w > _PARAM_GUARD:
        raise ValueError(f"{n_w} params exceeds brute-force guard {_PARAM_GUARD}")
    w0, g0 = problem.weights, problem.gates
    rows = np.empty((n_m, n_w))
    for j in range(n_m):
        e = np.zeros(n_m)
        e[j] = 1.0
        rows[j] = directional_second_derivative(
            lambda g: problem.grad_weights(wvec=w0, gvec=g), g0, e, fd)
    return rows


def fd_hessian(target, batches=None, fd=None):
    """Brute-force weight Hessian, symmetrized before return."""
    problem = _as_problem(target, batches)
    fd = fd or FdConfig()
    n_w = problem.weights.size
    if n_w > _PARAM_GUARD:
        raise ValueError(f"{n_w} params exceeds brute-force guard {_PARAM_GUARD}")
    w0, g0 = problem.weights, problem.gates
    h = np.empty((n_w, n_w))
    for j in range(n_w):
        e = np.zeros(n_w)
        e[j] = 1.0
        h[j] = directional_second_derivative(
            lambda w: problem.grad_weights(wvec=w, gvec=g0), w0, e, fd)
    return 0.5 * (h + h.T)


# ---- empirical bound checks on tiny strongly convex problems ----

class LogisticProblem:
    """1-D gated ridge-regularized logistic regression.

    loss(w, m) = mean log(1 + exp(-labels * (m w x))) + ridge/2 * w^2.
    Strongly convex in w with constant >= ridge; smooth with bounded
    third derivatives, so both error bounds are non-trivial.
    """

    def __init__(self, x, labels, ridge=0.1):
        self.x = np.asarray(x, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)  # +-1
        self.ridge = float(ridge)
        self.gates = np.ones(1)
        self.gate_ids = [ChannelId(0, 0)]
        self.weights = np.zeros(1)
        self.weights, _ = _retrain_convex(self, self.gates, RetrainConfig())

    def loss(self, wvec=None, gvec=None):
        w = (wvec if wvec is not None else self.weights)[0]
        m = (gvec if gvec is not None else self.gates)[0]
        z = self.labels * (m * w * self.x)
        # log(1 + exp(-z)) computed stably
        val = np.mean(np.logaddexp(0.0, -z)) + 0.5 * self.ridge * w * w
        return float(val)

    def grad_weights(self, wvec=None, gvec=None):
        w = (wvec if wvec is not None else self.weights)[0]
        m = (gvec if gvec is not None else self.gates)[0]
        z = self.labels * (m * w * self.x)
        sig = 1.0 / (1.0 + np.exp(z))
        g = np.mean(-self.labels * m * self.x * sig) + self.ridge * w
        return np.array([g])

    def grad_gates(self, wvec=None, gvec=None):
        w = (wvec if wvec is not None else self.weights)[0]
        m = (gvec if gvec is not None else self.gates)[0]
        z = self.labels * (m * w * self.x)
        sig = 1.0 / (1.0 + np.exp(z))
        return np.array([np.mean(-self.labels * w * self.x * sig)])

    def with_gates(self, gvec):
        other = LogisticProblem.__new__(LogisticProblem)
        other.x, other.labels, other.ridge = self.x, self.labels, self.ridge
        other.gates = np.asarray(gvec, dtype=np.float64).copy()
        other.gate_ids = self.gate_ids
        other.weights = self.weights
        return other


def make_logistic_instance(seed, n=80, ridge=0.1):
    rng = SeededRng(seed)
    x = rng.stream("x").normal((n,), 0.0, 1.0)
    w_true = 1.0 + rng.stream("w").uniform(0.0, 1.0)
    margin = w_true * x + rng.stream("noise").normal((n,), 0.0, 0.5)
    labels = np.where(margin >= 0, 1.0, -1.0)
    return LogisticProblem(x, labels, ridge)


@dataclass
class BoundConstants:
    lam: float          # strong convexity over the grid region
    c_h: float          # Hessian Lipschitz constant (max |third derivative|)
    c_l: float          # gradient norm at (W*, new mask)
    c_big_l: float      # mask-Lipschitz constant of the weight gradient
    c_a: float          # bound on the mixed second derivative
    sigma_min: float    # smallest Hessian eigenvalue at (W*, new mask)
    max_third: float    # max |d^3 L / dW^3| over the grid region
    grid_points: int = 0
    grid_halfwidth: float = 0.0


@dataclass
class BoundReport:
    delta_m_norm: float
    empirical_error: float
    bound_coarse: float
    bound_refined: float
    holds_coarse: bool
    holds_refined: bool
    constants: BoundConstants = field(repr=False, default=None)


_ZERO_BOUND_SLACK = 1e-8  # rounding allowance when the bound is exactly zero


def estimate_constants(problem, mask_after, grid_halfwidth=None, grid_points=161):
    """Grid-sample the bound constants for a 1-parameter problem.

    Strong convexity, third derivative, and the mixed-derivative bound
    are taken over the perturbation's own mask range (the assumptions are
    local around the pruning trajectory); the gradient-norm bound is the
    supremum over the whole declared mask region [0, 1], which is what
    makes it the coarser, perturbation-independent constant.
    """
    if problem.weights.size != 1:
        raise ValueError("grid estimation implemented for 1-parameter problems")
    w0 = problem.weights[0]
    m0, m1 = problem.gates[0], float(np.asarray(mask_after).reshape(-1)[0])
    if grid_halfwidth is None:
        grid_halfwidth = max(1.0, 4.0 * abs(w0))
    ws = np.linspace(w0 - grid_halfwidth, w0 + grid_halfwidth, grid_points)
    lo, hi = min(m0, m1), max(m0, m1)
    margin = 0.25 * (hi - lo) + 1e-3
    local_ms = np.linspace(max(0.0, lo - margin), hi + margin, 21)
    hw = ws[1] - ws[0]
    hm = local_ms[1] - local_ms[0]

    grads = np.array([[problem.grad_weights(np.array([w]), np.array([m]))[0]
                       for w in ws] for m in local_ms])
    hess = np.gradient(grads, hw, axis=1)
    third = np.gradient(hess, hw, axis=1)
    mixed = np.gradient(grads, hm, axis=0)

    lam = float(hess.min())
    if lam <= 0:
        raise ValueError("problem not strongly convex over the declared grid")

    global_ms = np.linspace(min(0.0, lo), max(1.0, hi), 41)
    g_at_wstar = np.array([problem.grad_weights(np.array([w0]), np.array([m]))[0]
                           for m in global_ms])
    after_vec = np.array([m1])
    # 1-D Hessian at (W*, new mask) via the same directional machinery
    sigma_min = float(hessian_vector_product(problem.with_gates(after_vec),
                                             np.ones(1))[0])
    return BoundConstants(
        lam=lam,
        c_h=float(np.abs(third).max()),
        c_l=float(np.abs(g_at_wstar).max()),
        c_big_l=float(np.abs(mixed).max()),
        c_a=float(np.abs(mixed).max()),
        sigma_min=abs(sigma_min),
        max_third=float(np.abs(third).max()),
        grid_points=grid_points,
        grid_halfwidth=float(grid_halfwidth),
    )


def bound_check(problem, mask_perturbations, constants=None, retrain_cfg=None):
    """Empirical error of the estimator vs the coarse and refined bounds.

    Each perturbation is a full mask vector to move to. Errors if a
    retrained optimum escapes the declared grid region.
    """
    reports = []
    for mask_after in mask_perturbations:
        after = np.asarray(mask_after, dtype=np.float64)
        consts = constants or estimate_constants(problem, after)
        est = prop1_from_problem(problem, problem.gates, after,
                                 SolverChoice.exact()).estimate
        cfg = retrain_cfg or RetrainConfig()
        w_hat, _ = _retrain_convex(problem, after, cfg)
        if problem.weights.size == 1 and consts.grid_halfwidth > 0:
            if abs(w_hat[0] - problem.weights[0]) > consts.grid_halfwidth:
                raise ValueError("retrained optimum left the declared grid region")
        truth = problem.loss(wvec=w_hat, gvec=after) - problem.loss()
        err = abs(est - truth)

        dw = consts.c_l / consts.lam + (
            consts.c_h * consts.c_l ** 2 / (2 * consts.sigma_min ** 2 * consts.lam))
        bound1 = dw ** 3 / 6.0 * consts.max_third
        dm = float(np.linalg.norm(after - problem.gates))
        k = (consts.c_big_l / consts.lam) * dm + (
            consts.c_h * consts.c_a ** 2 / (2 * consts.sigma_min ** 2 * consts.lam)) * dm ** 2
        bound2 = k ** 3 / 6.0 * consts.max_third
        reports.append(BoundReport(
            delta_m_norm=dm,
            empirical_error=err,
            bound_coarse=bound1,
            bound_refined=bound2,
            holds_coarse=err <= bound1 + _ZERO_BOUND_SLACK,
            holds_refined=err <= bound2 + _ZERO_BOUND_SLACK,
            constants=consts,
        ))
    return reports
