"""Retraining-free loss-change estimation and channel sensitivity scores.

The estimator for the post-retraining loss change of a mask edit is

    estimate = delta_l_ex - 1/2 * g^T H^{-1} g

with g the weight gradient at the new mask and H the weight Hessian
there; the correction term is the second-order value of the Newton step
the retraining would take. Channel scores come from the mask-sensitivity
of that same quantity, evaluated for all channels at once in two
directional-derivative sweeps:

    gbar = (d^2 L / dW dM) @ 1        (one sweep over the mask direction)
    v    = H^{-1} gbar                (inverse-Hessian solve, pluggable)
    S    = | (d^2 L / dM dW) @ v |    (one sweep over the weight direction)

Solvers: identity (drop H entirely), truncated Neumann expansion
(V0 = v, Vk = (I - gamma*H) V_{k-1}, sum of the first `terms`+1 terms,
optionally scaled by gamma to make it the convergent series), or an exact
dense solve for small models.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import costmodel, net
from .autograd import directional_second_derivative
from .tensor import SeededRng


@dataclass(frozen=True)
class SolverChoice:
    kind: str = "identity"  # identity | neumann | exact
    terms: int = 1
    gamma: float = 0.01
    gamma_scaled: bool = False

    def __post_init__(self):
        if self.kind not in ("identity", "neumann", "exact"):
            raise ValueError(f"unknown solver kind {self.kind!r}")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.terms < 1:
            raise ValueError("terms must be >= 1")

    @staticmethod
    def identity():
        return SolverChoice("identity")

    @staticmethod
    def neumann(terms=1, gamma=0.01, gamma_scaled=False):
        return SolverChoice("neumann", terms=terms, gamma=gamma,
                            gamma_scaled=gamma_scaled)

    @staticmethod
    def exact():
        return SolverChoice("exact")

    def label(self):
        if self.kind == "neumann":
            scaled = "-scaled" if self.gamma_scaled else ""
            return f"neumann{self.terms}{scaled}(gamma={self.gamma:g})"
        return self.kind


@dataclass
class ScoreVector:
    values: dict                   # ChannelId -> non-negative score
    eval_mask_snapshot: np.ndarray  # full gate vector at evaluation time
    eval_batches: int

    def ordered(self):
        return sorted(self.values.items())

    def as_array(self):
        return np.array([v for _, v in self.ordered()])


@dataclass
class AccumulatorState:
    running_sum: dict = field(default_factory=dict)
    count: int = 0
    k_target: int = 10

    def reset(self):
        self.running_sum = {}
        self.count = 0


@dataclass
class LossChangeReport:
    delta_l_ex: float
    correction: float
    estimate: float
    grad_norm_at_pruned_mask: float
    solver_used: str
    delta_l_gt_true: Optional[float] = None


class ModelProblem:
    """Differentiable view of a gated model over fixed proxy batches.

    Exposes loss and exact gradients as functions of the flat weight and
    gate vectors, which is the interface every second-order operator
    here works against (the quadratic testbeds provide the same one).
    """

    def __init__(self, model, batches):
        self.model = model
        self.batches = list(batches)
        if not self.batches:
            raise ValueError("need at least one batch")
        self.weights = net.weight_vector(model)
        self.gates = net.gate_full_vector(model)
        self.gate_ids = costmodel.gated_channels(model, active_only=False)

    def _values(self, wvec, gvec):
        w = net.unflatten_weights(self.model, wvec) if wvec is not None else None
        g = net.unflatten_gates(self.model, gvec) if gvec is not None else None
        return w, g

    def loss(self, wvec=None, gvec=None):
        w, g = self._values(wvec, gvec)
        total = 0.0
        for batch in self.batches:
            lv, _ = net.forward_loss(self.model, batch, w, g)
            total += float(lv.data)
        return total / len(self.batches)

    def grad_weights(self, wvec=None, gvec=None):
        w, g = self._values(wvec, gvec)
        _, grads = net.loss_and_grads(self.model, self.batches, w, g)
        return net.flatten_grads_weights(self.model, grads)

    def grad_gates(self, wvec=None, gvec=None):
        w, g = self._values(wvec, gvec)
        _, grads = net.loss_and_grads(self.model, self.batches, w, g)
        return net.flatten_grads_gates(self.model, grads)

    def with_gates(self, gvec):
        other = ModelProblem.__new__(ModelProblem)
        other.model = self.model
        other.batches = self.batches
        other.weights = self.weights
        other.gates = np.asarray(gvec, dtype=np.float64).copy()
        other.gate_ids = self.gate_ids
        return other


# ---- second-order building blocks (problem-level) ----

def hessian_vector_product(problem, v, fd=None):
    """H v over weights via central differences of the exact gradient."""
    g0 = problem.gates
    return directional_second_derivative(
        lambda w: problem.grad_weights(wvec=w, gvec=g0), problem.weights, v, fd)


def mixed_vector_product(problem, v, fd=None):
    """(d^2 L / dM dW) v: gate-gradient response to a weight-space direction."""
    g0 = problem.gates
    return directional_second_derivative(
        lambda w: problem.grad_gates(wvec=w, gvec=g0), problem.weights, v, fd)


def gbar_vec(problem, fd=None):
    """(d^2 L / dW dM) @ 1 over the active gates."""
    w0 = problem.weights
    direction = (problem.gates > 0).astype(np.float64)
    return directional_second_derivative(
        lambda g: problem.grad_weights(wvec=w0, gvec=g), problem.gates, direction, fd)


def dense_hessian(problem, fd=None, max_params=2000):
    n = problem.weights.size
    if n > max_params:
        raise ValueError(f"{n} weights exceeds dense-Hessian guard {max_params}")
    h = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        h[:, i] = hessian_vector_product(problem, e, fd)
    return 0.5 * (h + h.T)


def apply_inv_hessian(problem, v, solver, fd=None):
    """Approximate H^{-1} v at the problem's current (weights, gates)."""
    v = np.asarray(v, dtype=np.float64)
    if solver.kind == "identity":
        return v.copy()
    if solver.kind == "exact":
        h = dense_hessian(problem, fd)
        out, *_ = np.linalg.lstsq(h, v, rcond=None)
        return out
    # truncated Neumann expansion
    term = v.copy()
    acc = v.copy()
    for _ in range(solver.terms):
        term = term - solver.gamma * hessian_vector_product(problem, term, fd)
        acc += term
    if solver.gamma_scaled:
        acc = acc * solver.gamma
    if not np.all(np.isfinite(acc)):
        raise FloatingPointError("Neumann expansion diverged (gamma too large?)")
    return acc


# ---- operations on gated models ----

def grad_mask(model, batches):
    """Gate gradient of the mean loss, averaged across batches."""
    problem = ModelProblem(model, batches)
    g = problem.grad_gates()
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite mask gradient")
    return g


def gbar(model, batches, fd=None):
    return gbar_vec(ModelProblem(model, batches), fd)


def scores_from_problem(problem, solver, fd=None):
    active = problem.gates > 0
    gb = gbar_vec(problem, fd)
    v = apply_inv_hessian(problem, gb, solver, fd)
    s_full = mixed_vector_product(problem, v, fd)
    if not np.all(np.isfinite(s_full)):
        raise FloatingPointError("non-finite sensitivity scores")
    values = {}
    for slot, cid in enumerate(problem.gate_ids):
        if active[slot]:
            values[cid] = abs(float(s_full[slot]))
    n_batches = len(getattr(problem, "batches", ()))
    return ScoreVector(values, problem.gates.copy(), n_batches)


def sensitivity_scores(model, batches, solver=None, fd=None):
    """All-channel sensitivity scores at the current weights and gates."""
    solver = solver or SolverChoice.identity()
    return scores_from_problem(ModelProblem(model, batches), solver, fd)


def prop1_from_problem(problem, mask_before, mask_after, solver=None, fd=None):
    solver = solver or SolverChoice.identity()
    before = np.asarray(mask_before, dtype=np.float64)
    after = np.asarray(mask_after, dtype=np.float64)
    if np.any(after > before):
        raise ValueError("mask_after may only remove channels")
    loss_before = problem.loss(gvec=before)
    loss_after = problem.loss(gvec=after)
    delta_l_ex = loss_after - loss_before
    at_after = problem.with_gates(after)
    g = at_after.grad_weights(gvec=after)
    hinv_g = apply_inv_hessian(at_after, g, solver, fd)
    correction = 0.5 * float(g @ hinv_g)
    return LossChangeReport(
        delta_l_ex=delta_l_ex,
        correction=correction,
        estimate=delta_l_ex - correction,
        grad_norm_at_pruned_mask=float(np.linalg.norm(g)),
        solver_used=solver.label(),
    )


def prop1_loss_change(model, mask_before, mask_after, batches, solver=None, fd=None):
    """Estimated post-retraining loss change for a mask edit.

    `mask_before` / `mask_after` are full gate vectors; the edit may only
    remove channels. Gradient and Hessian are taken at the new mask.
    """
    return prop1_from_problem(ModelProblem(model, batches),
                              mask_before, mask_after, solver, fd)


def accumulate(state, scores, costs, normalization="sqrt_mem"):
    """Add one score sample into the accumulator, cost-normalized."""
    if state.count >= state.k_target:
        raise ValueError(f"accumulator already holds {state.count} of {state.k_target}")
    if normalization not in ("none", "mem", "sqrt_mem"):
        raise ValueError(f"unknown normalization {normalization!r}")
    for cid, s in sorted(scores.values.items()):
        if normalization == "none":
            f = 1.0
        else:
            dm = costs[cid].delta_mem
            if dm <= 0:
                raise ValueError(f"non-positive delta_mem for {cid}")
            f = dm if normalization == "mem" else np.sqrt(dm)
        state.running_sum[cid] = state.running_sum.get(cid, 0.0) + s / f
    state.count += 1
    return state


def baseline_scores(model, method, batches=None, seed=0):
    """Reference scorers: group_fisher | magnitude | magnitude_a | random."""
    cids = costmodel.gated_channels(model, active_only=True)
    snapshot = net.gate_full_vector(model)
    if method == "random":
        rng = SeededRng(seed).stream("random-scores")
        vals = rng.uniform(0.0, 1.0, size=len(cids))
        values = {cid: float(v) for cid, v in zip(cids, vals)}
        return ScoreVector(values, snapshot, 0)
    if method in ("magnitude", "magnitude_a"):
        values = {}
        for cid in cids:
            w = model.weights[f"w{cid.layer}"]
            if w.ndim == 4:
                s = float(np.abs(w[cid.channel]).sum())
            else:
                s = float(np.abs(w[:, cid.channel]).sum())
            if method == "magnitude_a":
                s /= model.layers[cid.layer].out_dim
            values[cid] = s
        return ScoreVector(values, snapshot, 0)
    if method == "group_fisher":
        sq = None
        n_batches = 0
        for x, y in batches:
            n_batches += 1
            for j in range(x.shape[0]):
                problem = ModelProblem(model, [(x[j:j + 1], y[j:j + 1])])
                g = problem.grad_gates()
                sq = g * g if sq is None else sq + g * g
        active = net.gate_full_vector(model) > 0
        all_ids = costmodel.gated_channels(model, active_only=False)
        values = {cid: float(sq[slot]) for slot, cid in enumerate(all_ids)
                  if active[slot]}
        return ScoreVector(values, snapshot, n_batches)
    raise ValueError(f"unknown baseline method {method!r}")
