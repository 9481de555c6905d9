"""Channel pruning loops: incremental, one-shot, and hybrid.

Each pruning action accumulates cost-normalized sensitivity scores k
times (with one SGD weight update after each accumulation), then masks
the lowest-scoring coupling group(s). Guards: the first weight layer is
never pruned, and no layer is ever emptied. After the FLOPs target is
met the surviving channels are physically compacted.
"""

from copy import copy
from dataclasses import dataclass, field

import numpy as np

from . import costmodel, datasets, influence, net
from .autograd import FdConfig
from .influence import AccumulatorState, SolverChoice
from .net import GatedModel, TrainConfig
from .tensor import SeededRng


@dataclass
class PruneConfig:
    target_flops_reduction: float
    k_accumulate: int = 10
    score_batches: int = 2
    batch_size: int = 32
    channels_per_action: int = 1
    mode: str = "incremental"  # incremental | oneshot | hybrid
    hybrid_t: float = 0.0      # FLOPs fraction pruned incrementally in hybrid mode
    solver: SolverChoice = field(default_factory=SolverChoice.identity)
    normalization: str = "sqrt_mem"
    method: str = "influence"  # or a baseline: group_fisher|magnitude|magnitude_a|random
    fd: FdConfig = field(default_factory=FdConfig)
    seed: int = 0
    step_lr: float = 0.02
    step_momentum: float = 0.9

    def __post_init__(self):
        p = self.target_flops_reduction
        if not 0.0 <= p < 1.0:
            raise ValueError("target_flops_reduction must be in [0, 1)")
        if self.mode == "hybrid" and not 0.0 <= self.hybrid_t <= p:
            raise ValueError("hybrid_t must be in [0, target_flops_reduction]")
        if self.channels_per_action < 1:
            raise ValueError("channels_per_action must be >= 1")


@dataclass
class PruneAction:
    step: int
    channel_ids: tuple
    score: float
    flops_frac: float
    params_frac: float
    proxy_loss: float


@dataclass
class PruneLog:
    actions: list = field(default_factory=list)
    wall_step_count: int = 0

    CSV_HEADER = "step,channel_ids,score,flops_frac,params_frac,proxy_loss"

    def to_csv(self):
        lines = [self.CSV_HEADER]
        for a in self.actions:
            ids = ";".join(f"{c.layer}:{c.channel}" for c in a.channel_ids)
            cols = [repr(float(v)) for v in
                    (a.score, a.flops_frac, a.params_frac, a.proxy_loss)]
            lines.append(f"{a.step},{ids}," + ",".join(cols))
        return "\n".join(lines) + "\n"


class TargetUnreachable(RuntimeError):
    pass


def _group_active(model, group):
    return all(model.gates[c.layer][c.channel] > 0 for c in group.members)


def select_groups(accum, groups, channels_per_action, model):
    """Lowest-score groups whose member count reaches the action budget.

    Groups are ranked by summed accumulated member scores ascending (ties
    by lowest (layer, channel)); a group is skipped when it touches the
    first weight layer or would empty any layer. Raises when nothing is
    selectable.
    """
    if accum.count != accum.k_target:
        raise ValueError(f"accumulator holds {accum.count} of {accum.k_target} samples")
    first = costmodel.first_weight_layer(model)
    remaining = {l: int((model.gates[l] > 0).sum()) for l in model.gated_layers()}
    ranked = []
    for g in groups:
        if not _group_active(model, g):
            continue
        score = sum(accum.running_sum[c] for c in g.members)
        ranked.append((score, g.members[0], g))
    ranked.sort(key=lambda t: (t[0], t[1]))
    selected, total = [], 0
    for score, _, g in ranked:
        if total >= channels_per_action:
            break
        if any(c.layer == first for c in g.members):
            continue
        removed = {}
        for c in g.members:
            removed[c.layer] = removed.get(c.layer, 0) + 1
        if any(remaining[l] - n < 1 for l, n in removed.items()):
            continue
        for l, n in removed.items():
            remaining[l] -= n
        selected.append(g)
        total += len(g.members)
    if not selected:
        raise TargetUnreachable("all layers at minimum width")
    return selected


def apply_prune(model, groups):
    """Set the member gates of each group to exactly zero."""
    for g in groups:
        for c in g.members:
            if model.gates[c.layer][c.channel] == 0:
                raise ValueError(f"channel {c} already pruned")
        for c in g.members:
            model.gates[c.layer][c.channel] = 0.0
    return model


def compact(model):
    """Physically remove zero-gated channels; the function is preserved.

    Drops producing filters and biases, slices consumer weights, and
    rebuilds the layer dims. Residual streams must have consistent gate
    state across their member layers.
    """
    spaces_in, spaces_out, _ = costmodel._trace_spaces(model)
    for i, spec in enumerate(model.layers):
        if spec.kind == "residual_add":
            a = spaces_in[i].active
            b = spaces_out[spec.source].active
            if not np.array_equal(a, b):
                raise ValueError(f"inconsistent residual gate state at layer {i}")
    layers, weights, gates = [], {}, {}
    for i, spec in enumerate(model.layers):
        new = copy(spec)
        if spec.kind in ("dense", "conv"):
            in_keep = spaces_in[i].active
            out_keep = (model.gates[i] > 0) if spec.gate else np.ones(spec.out_dim, bool)
            w = model.weights[f"w{i}"]
            if spec.kind == "dense":
                weights[f"w{i}"] = w[np.ix_(in_keep, out_keep)].copy()
            else:
                weights[f"w{i}"] = w[np.ix_(out_keep, in_keep)].copy()
            weights[f"b{i}"] = model.weights[f"b{i}"][out_keep].copy()
            new.in_dim = int(in_keep.sum())
            new.out_dim = int(out_keep.sum())
            if spec.gate:
                gates[i] = np.ones(new.out_dim)
        layers.append(new)
    return GatedModel(model.arch_name, layers, weights, gates, model.input_shape)


def _proxy_loss(model, batches):
    return float(np.mean([net.loss_value(model, b) for b in batches]))


def _score_once(model, batches, cfg):
    if cfg.method == "influence":
        return influence.sensitivity_scores(model, batches, cfg.solver, cfg.fd)
    return influence.baseline_scores(model, cfg.method, batches, seed=cfg.seed)


def _accumulate_scores(model, dataset, cfg, rng, phase, action_idx, velocity):
    """Algorithm inner loop: k scored accumulations, one SGD step each."""
    accum = AccumulatorState(k_target=cfg.k_accumulate)
    costs = costmodel.channel_costs(model)
    step_cfg = TrainConfig(epochs=1, batch_size=cfg.batch_size, lr=cfg.step_lr,
                           momentum=cfg.step_momentum, weight_decay=0.0,
                           seed=cfg.seed)
    batches = None
    sweeps = 0
    for a in range(cfg.k_accumulate):
        stream = rng.stream(f"{phase}-batches-{action_idx}-{a}")
        batches = datasets.draw_batches(dataset, cfg.score_batches,
                                        cfg.batch_size, stream)
        scores = _score_once(model, batches, cfg)
        influence.accumulate(accum, scores, costs, cfg.normalization)
        sweeps += 1
        xs = np.concatenate([b[0] for b in batches])
        ys = np.concatenate([b[1] for b in batches])
        velocity = net.sgd_step(model, (xs, ys), step_cfg, velocity)
    return accum, batches, sweeps, velocity


def _run_incremental(model, dataset, cfg, rng, log, groups, orig_flops,
                     orig_params, stop_frac, phase, velocity):
    frac = costmodel.model_flops(model, True) / orig_flops
    action_idx = len(log.actions)
    while frac > stop_frac + 1e-12:
        accum, batches, sweeps, velocity = _accumulate_scores(
            model, dataset, cfg, rng, phase, action_idx, velocity)
        log.wall_step_count += sweeps
        try:
            selected = select_groups(accum, groups, cfg.channels_per_action, model)
        except TargetUnreachable as e:
            raise TargetUnreachable(
                f"FLOPs target {stop_frac:.3f} unreachable: {e}") from e
        apply_prune(model, selected)
        new_frac = costmodel.model_flops(model, True) / orig_flops
        score = float(sum(accum.running_sum[c] for g in selected for c in g.members))
        log.actions.append(PruneAction(
            step=action_idx,
            channel_ids=tuple(c for g in selected for c in g.members),
            score=score,
            flops_frac=new_frac,
            params_frac=costmodel.model_params(model, True) / orig_params,
            proxy_loss=_proxy_loss(model, batches),
        ))
        frac = new_frac
        action_idx += 1
    return velocity


def _run_oneshot(model, dataset, cfg, rng, log, groups, orig_flops,
                 orig_params, stop_frac, phase, velocity):
    frac = costmodel.model_flops(model, True) / orig_flops
    if frac <= stop_frac + 1e-12:
        return velocity
    accum, batches, sweeps, velocity = _accumulate_scores(
        model, dataset, cfg, rng, phase, len(log.actions), velocity)
    log.wall_step_count += sweeps
    first = costmodel.first_weight_layer(model)
    remaining = {l: int((model.gates[l] > 0).sum()) for l in model.gated_layers()}
    ranked = []
    for g in groups:
        if not _group_active(model, g):
            continue
        ranked.append((sum(accum.running_sum[c] for c in g.members), g.members[0], g))
    ranked.sort(key=lambda t: (t[0], t[1]))
    probe = model.clone()
    selected, total_score = [], 0.0
    for score, _, g in ranked:
        if any(c.layer == first for c in g.members):
            continue
        removed = {}
        for c in g.members:
            removed[c.layer] = removed.get(c.layer, 0) + 1
        if any(remaining[l] - n < 1 for l, n in removed.items()):
            continue
        for l, n in removed.items():
            remaining[l] -= n
        apply_prune(probe, [g])
        selected.append(g)
        total_score += score
        if costmodel.model_flops(probe, True) / orig_flops <= stop_frac + 1e-12:
            break
    else:
        raise TargetUnreachable(f"FLOPs target {stop_frac:.3f} unreachable in one shot")
    apply_prune(model, selected)
    log.actions.append(PruneAction(
        step=len(log.actions),
        channel_ids=tuple(c for g in selected for c in g.members),
        score=float(total_score),
        flops_frac=costmodel.model_flops(model, True) / orig_flops,
        params_frac=costmodel.model_params(model, True) / orig_params,
        proxy_loss=_proxy_loss(model, batches),
    ))
    return velocity


def _prune(model, dataset, cfg, mode):
    work = model.clone()
    rng = SeededRng(cfg.seed)
    groups = costmodel.trace_couplings(work)
    orig_flops = costmodel.model_flops(work, True)
    orig_params = costmodel.model_params(work, True)
    log = PruneLog()
    p = cfg.target_flops_reduction
    velocity = None
    if mode == "incremental":
        _run_incremental(work, dataset, cfg, rng, log, groups, orig_flops,
                         orig_params, 1.0 - p, "inc", velocity)
    elif mode == "oneshot":
        _run_oneshot(work, dataset, cfg, rng, log, groups, orig_flops,
                     orig_params, 1.0 - p, "one", velocity)
    elif mode == "hybrid":
        velocity = _run_incremental(work, dataset, cfg, rng, log, groups,
                                    orig_flops, orig_params, 1.0 - cfg.hybrid_t,
                                    "inc", velocity)
        _run_oneshot(work, dataset, cfg, rng, log, groups, orig_flops,
                     orig_params, 1.0 - p, "one", velocity)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return compact(work), log, work


def prune_incremental(model, dataset, cfg):
    compacted, log, _ = _prune(model, dataset, cfg, "incremental")
    return compacted, log


def prune_oneshot(model, dataset, cfg):
    compacted, log, _ = _prune(model, dataset, cfg, "oneshot")
    return compacted, log


def prune_hybrid(model, dataset, cfg):
    compacted, log, _ = _prune(model, dataset, cfg, "hybrid")
    return compacted, log


def prune_masked(model, dataset, cfg, mode=None):
    """Like the prune_* entry points but also returns the masked model."""
    return _prune(model, dataset, cfg, mode or cfg.mode)


def finetune(model, dataset, cfg):
    """Post-compaction recovery training; cfg.epochs == 0 is a no-op."""
    if cfg.epochs == 0:
        return model
    model, _ = net.train(model, dataset, cfg)
    return model
