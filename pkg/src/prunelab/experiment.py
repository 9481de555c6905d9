"""Experiment orchestration: configs, the end-to-end pipeline, the
verification suites, sweeps, and CSV reporting.

Every run directory contains a canonical-JSON echo of its config; with
the config and seed fixed, every emitted byte is reproducible.
"""

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import costmodel, datasets, influence, net, oracle, pruner
from .autograd import FdConfig
from .checkpoint import save_checkpoint
from .datasets import DatasetSpec
from .influence import AccumulatorState, SolverChoice
from .net import TrainConfig
from .pruner import PruneConfig
from .tensor import SeededRng


@dataclass
class ExperimentConfig:
    seed: int = 0
    arch: str = "mlp-tiny"
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec("blobs"))
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    prune: PruneConfig = field(default_factory=lambda: PruneConfig(0.5))
    finetune: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=20, seed=3))
    loss_split: str = "train"
    out_dir: str = "out"
    # verify / sweep knobs
    suite: str = "prop1"
    sweep_kind: str = "percent"
    sweep_fractions: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
    sweep_methods: tuple = ("influence", "magnitude", "magnitude_a", "random")
    sweep_seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        if self.loss_split not in ("train", "holdout"):
            raise ValueError("loss_split must be train or holdout")


def config_to_dict(cfg):
    d = asdict(cfg)
    for k in ("sweep_fractions", "sweep_methods", "sweep_seeds"):
        d[k] = list(d[k])
    return d


def config_from_dict(d):
    d = dict(d)
    if "dataset" in d:
        d["dataset"] = DatasetSpec(**d["dataset"])
    for k in ("pretrain", "finetune"):
        if k in d:
            d[k] = TrainConfig(**d[k])
    if "prune" in d:
        p = dict(d["prune"])
        if "solver" in p:
            p["solver"] = SolverChoice(**p["solver"])
        if "fd" in p:
            p["fd"] = FdConfig(**p["fd"])
        d["prune"] = PruneConfig(**p)
    for k in ("sweep_fractions", "sweep_methods", "sweep_seeds"):
        if k in d:
            d[k] = tuple(d[k])
    return ExperimentConfig(**d)


def canonical_json(cfg):
    return json.dumps(config_to_dict(cfg), sort_keys=True, indent=2) + "\n"


def load_config(path):
    with open(path) as f:
        return config_from_dict(json.load(f))


def with_master_seed(cfg, seed):
    """Derive all stage seeds from one master seed."""
    return replace(
        cfg,
        seed=seed,
        dataset=replace(cfg.dataset, seed=seed),
        pretrain=replace(cfg.pretrain, seed=seed + 1),
        prune=replace(cfg.prune, seed=seed + 2),
        finetune=replace(cfg.finetune, seed=seed + 3),
    )


def write_csv(path, header, rows):
    """CSV with repr-formatted floats so reruns are byte-identical."""
    def fmt(v):
        if isinstance(v, float):
            return repr(float(v))
        return str(v)
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(fmt(v) for v in row) + "\n")
    return path


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as e:  # noqa: BLE001 - stage-tagged abort is the contract
        raise StageError(name, e) from e


def run_experiment(cfg):
    """Pipeline: pretrain, prune, fine-tune; emits CSVs and checkpoints."""
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as f:
        f.write(canonical_json(cfg))

    data = _stage("dataset", datasets.gen_dataset, cfg.dataset)

    model = _stage("build", net.build_model, cfg.arch, cfg.seed)
    model, history = _stage("pretrain", net.train, model, data.train, cfg.pretrain)
    write_csv(os.path.join(out, "pretrain_history.csv"), "epoch,loss,acc",
              [(e, l, a) for e, l, a in history])
    save_checkpoint(os.path.join(out, "pretrained.ckpt"), model)
    base_flops = costmodel.model_flops(model, True)

    compacted, log, _ = _stage("prune", pruner.prune_masked,
                               model, data.train, cfg.prune)
    with open(os.path.join(out, "prune_log.csv"), "w") as f:
        f.write(log.to_csv())

    tuned = _stage("finetune", pruner.finetune, compacted.clone(),
                   data.train, cfg.finetune)
    save_checkpoint(os.path.join(out, "pruned.ckpt"), tuned)

    rows = []
    for stage_name, m in (("pretrained", model), ("pruned", compacted),
                          ("finetuned", tuned)):
        tr_loss, tr_acc = net.evaluate(m, data.train)
        ho_loss, ho_acc = net.evaluate(m, data.holdout)
        rows.append((stage_name, tr_loss, tr_acc, ho_loss, ho_acc,
                     costmodel.model_flops(m, True) / base_flops,
                     costmodel.model_params(m, True) /
                     costmodel.model_params(model, True)))
    write_csv(os.path.join(out, "final_metrics.csv"),
              "stage,train_loss,train_acc,holdout_loss,holdout_acc,"
              "flops_frac,params_frac", rows)
    return out


# ---- score ranking without weight drift (estimator probes) ----

def accumulated_scores(model, dataset, cfg, rng_tag="fig1"):
    """k cost-normalized score draws on a frozen model, summed."""
    rng = SeededRng(cfg.seed)
    accum = AccumulatorState(k_target=cfg.k_accumulate)
    costs = costmodel.channel_costs(model)
    for a in range(cfg.k_accumulate):
        batches = datasets.draw_batches(
            dataset, cfg.score_batches, cfg.batch_size,
            rng.stream(f"{rng_tag}-{a}"))
        if cfg.method == "influence":
            s = influence.sensitivity_scores(model, batches, cfg.solver, cfg.fd)
        else:
            s = influence.baseline_scores(model, cfg.method, batches, seed=cfg.seed)
        influence.accumulate(accum, s, costs, cfg.normalization)
    return accum


def mask_to_fraction(model, accum, target_frac):
    """Gate vector that prunes ascending-score groups down to the target."""
    groups = costmodel.trace_couplings(model)
    first = costmodel.first_weight_layer(model)
    remaining = {l: int((model.gates[l] > 0).sum()) for l in model.gated_layers()}
    ranked = sorted(
        ((sum(accum.running_sum[c] for c in g.members), g.members[0], g)
         for g in groups if pruner._group_active(model, g)),
        key=lambda t: (t[0], t[1]))
    probe = model.clone()
    orig = costmodel.model_flops(model, True)
    for _, _, g in ranked:
        if costmodel.model_flops(probe, True) / orig <= target_frac + 1e-12:
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
        pruner.apply_prune(probe, [g])
    if costmodel.model_flops(probe, True) / orig > target_frac + 1e-12:
        raise pruner.TargetUnreachable(f"cannot reach fraction {target_frac}")
    return net.gate_full_vector(probe)


def fig1_sweep(cfg, fractions=(0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)):
    """Masked vs estimated vs retrained loss changes over a removal grid."""
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    data = datasets.gen_dataset(cfg.dataset)
    split = data.split(cfg.loss_split)
    other = data.split("holdout" if cfg.loss_split == "train" else "train")
    model = net.build_model(cfg.arch, cfg.seed)
    model, _ = net.train(model, data.train, cfg.pretrain)
    accum = accumulated_scores(model, data.train, cfg.prune)
    mask_before = net.gate_full_vector(model)
    batch = (split.x, split.y)
    other_batch = (other.x, other.y)
    retrain_cfg = oracle.RetrainConfig(train=replace(cfg.pretrain, epochs=60))
    rows = []
    for frac_removed in fractions:
        mask_after = (mask_to_fraction(model, accum, 1.0 - frac_removed)
                      if frac_removed > 0 else mask_before.copy())
        rep = influence.prop1_loss_change(
            model, mask_before, mask_after, [batch], cfg.prune.solver, cfg.prune.fd)
        masked = model.clone()
        masked.gates = net.unflatten_gates(masked, mask_after)
        _, acc_masked = net.evaluate(masked, split)
        retrained = masked.clone()
        net.train(retrained, data.train, retrain_cfg.train)
        loss_rt, acc_rt = net.evaluate(retrained, split)
        loss_before, _ = net.evaluate(model, split)
        delta_gt = loss_rt - loss_before
        ex_other = net.loss_value(masked, other_batch) - net.loss_value(model, other_batch)
        gt_other = net.loss_value(retrained, other_batch) - net.loss_value(model, other_batch)
        rows.append((frac_removed, rep.delta_l_ex, rep.correction, rep.estimate,
                     delta_gt, acc_masked, acc_rt, ex_other, gt_other))
    path = os.path.join(out, "fig1_sweep.csv")
    write_csv(path,
              "fraction_removed,delta_l_ex,correction,estimate,delta_l_gt,"
              "acc_masked,acc_retrained,delta_l_ex_other,delta_l_gt_other", rows)
    return path


# ---- verification suites (the CLI `verify` subcommand) ----

def verify_prop1(cfg):
    """Quadratic testbeds: estimator vs closed form vs retraining."""
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    rows = []
    trial = 0
    rng = SeededRng(cfg.seed)
    for rho in (0.0, 0.5, 0.9):
        for k in range(7):
            seed = int(rng.stream(f"tb-{rho}-{k}").integers(0, 2 ** 31))
            tb = oracle.make_quadratic_testbed(seed, n=48, d=6, correlation=rho)
            _, loss_full = tb.closed_form(tb.gates)
            for j in range(tb.gates.size):
                mask_after = tb.gates.copy()
                mask_after[j] = 0.0
                rep = influence.prop1_from_problem(
                    tb, tb.gates, mask_after, SolverChoice.exact())
                _, loss_pruned = tb.closed_form(mask_after)
                closed = loss_pruned - loss_full
                truth = oracle.true_loss_change(tb, mask_after)
                rows.append((trial, rep.delta_l_ex, rep.correction, rep.estimate,
                             truth, abs(rep.estimate - closed),
                             abs(rep.delta_l_ex - closed)))
                trial += 1
    return write_csv(
        os.path.join(out, "prop1_report.csv"),
        "trial,delta_l_ex,correction,estimate,delta_l_gt_true,"
        "abs_err_estimate,abs_err_naive", rows)


def verify_scores(cfg):
    """Two-pass scores vs the brute-force mixed-matrix construction."""
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    data = datasets.gen_dataset(cfg.dataset)
    model = net.build_model("mlp-micro", cfg.seed)
    model, _ = net.train(model, data.train,
                         replace(cfg.pretrain, epochs=min(cfg.pretrain.epochs, 20)))
    batches = datasets.draw_batches(data.train, 2, 32, SeededRng(cfg.seed).stream("v"))
    sv = influence.sensitivity_scores(model, batches, SolverChoice.identity())
    g = oracle.fd_mixed_matrix(model, batches)
    brute = np.abs(g @ (g.T @ np.ones(g.shape[0])))
    ids = costmodel.gated_channels(model, active_only=False)
    rows = []
    for slot, cid in enumerate(ids):
        two_pass = sv.values[cid]
        rel = abs(two_pass - brute[slot]) / max(abs(brute[slot]), 1e-300)
        rows.append((f"{cid.layer}:{cid.channel}", two_pass, float(brute[slot]), rel))
    two = np.array([sv.values[c] for c in ids])
    argsort_match = bool(np.array_equal(np.argsort(two, kind="stable"),
                                        np.argsort(brute, kind="stable")))
    path = write_csv(os.path.join(out, "scores_report.csv"),
                     "channel,two_pass,brute_force,rel_err", rows)
    with open(os.path.join(out, "scores_argsort.txt"), "w") as f:
        f.write(f"argsort_match={argsort_match}\n")
    return path


def verify_bounds(cfg, trials=50):
    """Error-bound checks on quadratic and logistic instances."""
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    rows = []
    rng = SeededRng(cfg.seed)
    trial = 0
    for kind in ("quadratic", "logistic"):
        for k in range(trials):
            seed = int(rng.stream(f"{kind}-{k}").integers(0, 2 ** 31))
            if kind == "quadratic":
                problem = oracle.make_quadratic_testbed(seed, n=40, d=1)
            else:
                problem = oracle.make_logistic_instance(seed)
            delta = [0.02, 0.05, 0.1][k % 3]
            reports = oracle.bound_check(problem, [np.array([1.0 - delta])])
            r = reports[0]
            rows.append((trial, kind, r.delta_m_norm, r.empirical_error,
                         r.bound_coarse, r.bound_refined,
                         int(r.holds_coarse), int(r.holds_refined)))
            trial += 1
    return write_csv(os.path.join(out, "bounds_report.csv"),
                     "trial,kind,delta_m_norm,empirical_error,bound1,bound2,"
                     "holds1,holds2", rows)


VERIFY_SUITES = {
    "prop1": verify_prop1,
    "scores": verify_scores,
    "bounds": verify_bounds,
    "fig1-sweep": fig1_sweep,
}


# ---- sweeps ----

def sweep(cfg):
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    rows = []
    if cfg.sweep_kind == "percent":
        for seed in cfg.sweep_seeds:
            scfg = with_master_seed(cfg, seed)
            data = datasets.gen_dataset(scfg.dataset)
            base = net.build_model(scfg.arch, scfg.seed)
            base, _ = net.train(base, data.train, scfg.pretrain)
            for method in cfg.sweep_methods:
                for frac in cfg.sweep_fractions:
                    pcfg = replace(scfg.prune, target_flops_reduction=frac,
                                   method=method)
                    compacted, log = pruner.prune_incremental(base, data.train, pcfg)
                    tuned = pruner.finetune(compacted, data.train, scfg.finetune)
                    loss, acc = net.evaluate(tuned, data.holdout)
                    rows.append((seed, method, frac, loss, acc,
                                 log.wall_step_count))
        return write_csv(os.path.join(out, "sweep_percent.csv"),
                         "seed,method,fraction,holdout_loss,holdout_acc,"
                         "score_sweeps", rows)
    if cfg.sweep_kind == "hybrid":
        p = cfg.prune.target_flops_reduction
        for seed in cfg.sweep_seeds:
            scfg = with_master_seed(cfg, seed)
            data = datasets.gen_dataset(scfg.dataset)
            base = net.build_model(scfg.arch, scfg.seed)
            base, _ = net.train(base, data.train, scfg.pretrain)
            for ratio in (0.0, 0.5, 1.0):
                pcfg = replace(scfg.prune, mode="hybrid", hybrid_t=ratio * p)
                compacted, log = pruner.prune_hybrid(base, data.train, pcfg)
                tuned = pruner.finetune(compacted, data.train, scfg.finetune)
                loss, acc = net.evaluate(tuned, data.holdout)
                rows.append((seed, ratio, loss, acc, log.wall_step_count))
        return write_csv(os.path.join(out, "sweep_hybrid.csv"),
                         "seed,t_over_p,holdout_loss,holdout_acc,score_sweeps",
                         rows)
    raise ValueError(f"unknown sweep kind {cfg.sweep_kind!r}")


def report(run_dirs, out_path):
    """Merge equally-named CSVs across run dirs, prefixing a seed column."""
    merged = {}
    for d in run_dirs:
        with open(os.path.join(d, "config.json")) as f:
            seed = json.load(f)["seed"]
        for name in sorted(os.listdir(d)):
            if not name.endswith(".csv"):
                continue
            with open(os.path.join(d, name)) as f:
                lines = f.read().splitlines()
            header, body = lines[0], lines[1:]
            entry = merged.setdefault(name, ("seed," + header, []))
            if entry[0] != "seed," + header:
                raise ValueError(f"{name}: header mismatch across run dirs")
            entry[1].extend(f"{seed},{line}" for line in body)
    os.makedirs(out_path, exist_ok=True)
    written = []
    for name, (header, body) in sorted(merged.items()):
        path = os.path.join(out_path, "merged_" + name)
        with open(path, "w") as f:
            f.write(header + "\n")
            f.write("\n".join(body) + ("\n" if body else ""))
        written.append(path)
    return written
