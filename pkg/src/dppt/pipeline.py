"""Stage orchestration: warm-start, layer freezing, DP pre-training, probe.

Every file a run writes is a pure function of its config, so two runs with
the same config are byte-identical. Wall-clock timings are only written when
``record_wallclock`` is set.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dppt import autodiff as ad
from dppt import accounting
from dppt.bestrq import (
    SSLExample, finetune_probe, init_encoder, make_batch, make_codebook,
    make_ssl_loss, prepare_ssl, stream,
)
from dppt.checkpoint import load_checkpoint, save_checkpoint
from dppt.config import RunConfig
from dppt.dp import DPAdam, privatize
from dppt.errors import ConfigError, NumericError
from dppt.freeze import (
    DIRECTION_LABELS, SWEEP_GRID, SqGradAccumulator, accumulate, apply_freeze,
    plan_freeze, write_freeze_report,
)
from dppt.params import flat_norm

log = logging.getLogger(__name__)

METRICS_HEADER = (
    "stage", "step", "loss", "clip_fraction", "grad_norm_mean",
    "noise_multiplier", "mode", "eval_metric",
)
WARMSTART_CKPT = "warmstart.dppt"
FROZEN_CKPT = "frozen.dppt"
FINAL_CKPT = "pretrain.dppt"
NOISE_GRID = (0.0, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2)

# stream tags
_TAG_PUBLIC, _TAG_DP_BATCH, _TAG_DP_MASK, _TAG_WS_BATCH, _TAG_WS_MASK, _TAG_EVAL_MASK = 10, 11, 12, 13, 14, 15


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


class MetricsLog:
    def __init__(self, record_wallclock=False):
        self.rows = []
        self.record_wallclock = record_wallclock
        self._t0 = time.perf_counter()

    def add(self, stage, step, loss, clip_fraction=None, grad_norm_mean=None,
            noise_multiplier=None, mode="", eval_metric=None):
        row = dict(stage=stage, step=step, loss=loss, clip_fraction=clip_fraction,
                   grad_norm_mean=grad_norm_mean, noise_multiplier=noise_multiplier,
                   mode=mode, eval_metric=eval_metric)
        if self.record_wallclock:
            row["wallclock"] = time.perf_counter() - self._t0
        self.rows.append(row)

    def write(self, path):
        header = list(METRICS_HEADER) + (["wallclock"] if self.record_wallclock else [])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in self.rows:
                w.writerow([_fmt(r[k]) for k in header])


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class PipelineResult:
    status: str
    out_dir: Path
    final_checkpoint: Path | None
    eval_loss: float | None
    probe_accuracy: float | None
    probe_loss: float | None
    frozen_layers: list = field(default_factory=list)
    trainable_params: int = 0
    summary: dict = field(default_factory=dict)

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"


def public_ids(cfg: RunConfig) -> np.ndarray:
    n = cfg.data.n_examples
    k = max(1, int(round(cfg.public_fraction * n)))
    return np.sort(stream(cfg.seed, _TAG_PUBLIC).choice(n, size=k, replace=False))


class Task:
    """Everything derived from the config that all stages share."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        m = cfg.model
        self.codebook = make_codebook(m.d_feat, m.code_dim, m.codebook_size, cfg.seed)
        self.loss_fn = make_ssl_loss(m)
        batch = make_batch(cfg.data, range(cfg.schedule.eval_examples), split="eval")
        self.eval_example = prepare_ssl(batch, self.codebook, cfg.mask, stream(cfg.seed, _TAG_EVAL_MASK))

    def eval_loss(self, tree) -> float:
        return ad.loss_value(self.loss_fn, tree, self.eval_example)

    def ssl_batch(self, ids, mask_key) -> SSLExample:
        """Batch whose masks are drawn per example, keyed by (mask_key, id)."""
        batch = make_batch(self.cfg.data, ids)
        parts = []
        for i, x in zip(batch.ids, batch.features):
            one = dataclasses.replace(batch, features=x[None], ids=(i,), labels=batch.labels[:1])
            parts.append(prepare_ssl(one, self.codebook, self.cfg.mask, stream(self.cfg.seed, *mask_key, i)))
        return SSLExample(
            np.concatenate([p.inputs for p in parts]),
            np.concatenate([p.codes for p in parts]),
            np.concatenate([p.mask for p in parts]),
        )


def _should_eval(cfg, step, last):
    every = cfg.schedule.eval_every
    return step == last or (every > 0 and step % every == 0)


def warmstart(task: Task, tree, metrics: MetricsLog):
    """Non-private training on the public slice, accumulating squared grads."""
    cfg = task.cfg
    sched = cfg.schedule
    pub = public_ids(cfg)
    opt = DPAdam(tree, cfg.optim.warmstart_lr, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
    acc = SqGradAccumulator.zeros_like(tree)
    bsz = min(sched.warmstart_batch, len(pub))
    for step in range(1, sched.warmstart_steps + 1):
        ids = stream(cfg.seed, _TAG_WS_BATCH, step).choice(pub, size=bsz, replace=False)
        ex = task.ssl_batch(ids, (_TAG_WS_MASK, step))
        loss, g = ad.value_and_grad(task.loss_fn, tree, ex)
        accumulate(acc, g)
        opt.step(tree, g)
        ev = task.eval_loss(tree) if _should_eval(cfg, step, sched.warmstart_steps) else None
        metrics.add("warmstart", step, loss, None, flat_norm(g), 0.0, "none", ev)
    return tree, acc, opt


def dp_pretrain(task: Task, tree, opt: DPAdam, metrics: MetricsLog):
    """DP-Adam on the full dataset. Returns ``(tree, status)``."""
    cfg = task.cfg
    sched, div = cfg.schedule, cfg.divergence
    n = cfg.data.n_examples
    initial, over = None, 0
    for step in range(1, sched.dp_steps + 1):
        ids = stream(cfg.seed, _TAG_DP_BATCH, step).choice(n, size=min(sched.batch_size, n), replace=False)
        ex = task.ssl_batch(ids, (_TAG_DP_MASK, step))
        try:
            per_example = [ad.value_and_grad(task.loss_fn, tree, e) for e in ex.split()]
            losses = [l for l, _ in per_example]
            noisy, stats = privatize([g for _, g in per_example], tree, cfg.clip, cfg.noise, step)
            opt.step(tree, noisy)
        except NumericError as exc:
            log.warning("dp step %d: %s", step, exc)
            metrics.add("dp", step, math.nan, None, None, cfg.noise.multiplier, cfg.clip.mode, None)
            return tree, "diverged"
        loss = float(np.mean(losses))
        initial = loss if initial is None else initial
        over = over + 1 if loss > div.factor * initial else 0
        diverged = over >= div.patience
        ev = task.eval_loss(tree) if (diverged or _should_eval(cfg, step, sched.dp_steps)) else None
        metrics.add("dp", step, loss, stats["clip_fraction"], stats["grad_norm_mean"],
                    cfg.noise.multiplier, cfg.clip.mode, ev)
        if diverged:
            return tree, "diverged"
    return tree, "ok"


def probe_stage(checkpoint_path, cfg: RunConfig):
    """Public fine-tune probe. Sees the released checkpoint and nothing else."""
    tree, _ = load_checkpoint(checkpoint_path)
    return finetune_probe(tree, cfg.data, cfg.model, cfg.probe)


def privacy_summary(cfg: RunConfig) -> dict:
    z = cfg.noise.multiplier
    n, B, T = cfg.data.n_examples, cfg.schedule.batch_size, cfg.schedule.dp_steps
    out = {"q": B / n, "noise_multiplier": z, "dp_steps": T, "delta": accounting.delta_rule(n)}
    if z > 0:
        out["epsilon"] = accounting.account(B / n, z, T, out["delta"]).epsilon
        base = cfg.accounting
        try:
            out["equal_scale_factor"] = accounting.plan_scale(
                z, base.target_eps, "equal", base.n0, base.b0, base.steps)
        except Exception as exc:  # planner limits are reported, not fatal
            out["equal_scale_factor"] = f"unavailable ({exc})"
    else:
        out["epsilon"] = math.inf
    return out


def run_pipeline(cfg: RunConfig, out_dir=None, warmstart_checkpoint=None) -> PipelineResult:
    """Run all stages and persist their outputs under ``out_dir``.

    With ``warmstart_checkpoint`` the warm-start stage is skipped and the
    given tree and accumulator are used instead (optimizer moments start
    from zero in that case).
    """
    out = Path(out_dir) if out_dir is not None else cfg.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    task = Task(cfg)
    metrics = MetricsLog(cfg.record_wallclock)
    random_init = init_encoder(cfg.model, cfg.seed)
    baseline = finetune_probe(random_init, cfg.data, cfg.model, cfg.probe)
    summary = {
        "random_init_eval_loss": task.eval_loss(random_init),
        "probe_random": baseline.accuracy,
        "probe_random_loss": baseline.loss,
        "warmstart_eval_loss": None,
        "probe_warmstart": None,
        "probe_warmstart_loss": None,
    }

    ws_opt = acc = ws_path = None
    tree = random_init.copy()
    if warmstart_checkpoint is not None:
        tree, acc = load_checkpoint(warmstart_checkpoint)
        ws_path = Path(warmstart_checkpoint)
    elif cfg.schedule.warmstart_steps > 0:
        tree, acc, ws_opt = warmstart(task, tree, metrics)
        ws_path = out / WARMSTART_CKPT
        save_checkpoint(ws_path, tree, acc)
    if ws_path is not None:
        summary["warmstart_eval_loss"] = task.eval_loss(tree)
        ws_probe = probe_stage(ws_path, cfg)
        summary["probe_warmstart"] = ws_probe.accuracy
        summary["probe_warmstart_loss"] = ws_probe.loss

    if cfg.freeze.enabled:
        if acc is None:
            raise ConfigError("layer freezing needs a warm-start accumulator")
        plan = plan_freeze(acc, tree, cfg.freeze.p, cfg.freeze.freeze_top)
        tree = apply_freeze(tree, plan)
        write_freeze_report(out / "freeze_report.csv", plan)
        save_checkpoint(out / FROZEN_CKPT, tree)

    o = cfg.optim
    if ws_opt is not None and not cfg.freeze.reset_moments:
        opt = ws_opt
        opt.lr = o.lr
        opt.sync(tree, reset=False)
    else:
        opt = DPAdam(tree, o.lr, o.beta1, o.beta2, o.eps)

    tree, status = dp_pretrain(task, tree, opt, metrics)
    final = out / FINAL_CKPT
    save_checkpoint(final, tree)
    eval_loss = task.eval_loss(tree) if status == "ok" else None
    metrics.write(out / "metrics.csv")

    probe = probe_stage(final, cfg) if status == "ok" else None
    summary.update({
        "status": status,
        "eval_loss": eval_loss,
        "probe_accuracy": probe.accuracy if probe else None,
        "probe_loss": probe.loss if probe else None,
        "frozen_layers": tree.frozen_names,
        "trainable_params": tree.num_trainable,
        "total_params": tree.num_params,
        "clip_mode": cfg.clip.mode,
        "clip_bound": cfg.clip.bound,
        "privacy": privacy_summary(cfg),
    })
    write_summary(out, summary)
    return PipelineResult(status, out, final, eval_loss,
                          probe.accuracy if probe else None, probe.loss if probe else None,
                          tree.frozen_names, tree.num_trainable, summary)


def write_summary(out, summary):
    out = Path(out)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")
    lines = []
    for key in sorted(summary):
        val = summary[key]
        if isinstance(val, dict):
            lines += [f"{key}.{k} = {_fmt(v)}" for k, v in sorted(val.items())]
        elif isinstance(val, list):
            lines.append(f"{key} = {','.join(val) if val else '-'}")
        else:
            lines.append(f"{key} = {_fmt(val)}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")


def _ensure_warmstart(cfg, out):
    path = Path(out) / WARMSTART_CKPT
    if not path.exists():
        task = Task(cfg)
        tree = init_encoder(cfg.model, cfg.seed)
        tree, acc, _ = warmstart(task, tree, MetricsLog())
        save_checkpoint(path, tree, acc)
    return path


def count_inversions(values, increasing=True):
    """Adjacent pairs that break the expected monotone direction."""
    pairs = zip(values, values[1:])
    return sum(1 for a, b in pairs if (b < a if increasing else b > a))


def noise_tolerance_sweep(cfg: RunConfig, noise_list=NOISE_GRID, out_dir=None):
    """One pipeline per noise multiplier from a shared warm-start."""
    out = Path(out_dir) if out_dir is not None else cfg.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    ws = _ensure_warmstart(cfg, out) if cfg.schedule.warmstart_steps > 0 else None
    rows = []
    for z in noise_list:
        sub = cfg.replace(noise=dataclasses.replace(cfg.noise, multiplier=float(z)))
        res = run_pipeline(sub, out / f"noise_{z:g}", warmstart_checkpoint=ws)
        rows.append({
            "noise_multiplier": float(z), "status": res.status, "eval_loss": res.eval_loss,
            "probe_accuracy": res.probe_accuracy, "probe_loss": res.probe_loss,
        })
    ok = [r for r in rows if r["status"] == "ok"]
    table = {
        "rows": rows,
        "eval_loss_inversions": count_inversions([r["eval_loss"] for r in ok], increasing=True),
        "probe_loss_inversions": count_inversions([r["probe_loss"] for r in ok], increasing=True),
        "probe_accuracy_inversions": count_inversions([r["probe_accuracy"] for r in ok], increasing=False),
    }
    write_table(out / "noise_sweep.csv", rows)
    return table


def freeze_sweep(cfg: RunConfig, p_values=SWEEP_GRID, directions=(True, False), out_dir=None):
    """No-freeze baseline plus one run per (p, direction), sharing a warm-start."""
    out = Path(out_dir) if out_dir is not None else cfg.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    ws = _ensure_warmstart(cfg, out)
    rows = []
    base = run_pipeline(cfg.replace(freeze=dataclasses.replace(cfg.freeze, enabled=False)),
                        out / "no_freeze", warmstart_checkpoint=ws)
    rows.append({"p": None, "direction": "No Freezing", "status": base.status,
                 "frozen_layers": 0, "trainable_params": base.trainable_params,
                 "eval_loss": base.eval_loss, "probe_accuracy": base.probe_accuracy,
                 "probe_loss": base.probe_loss})
    for p in p_values:
        for top in directions:
            sub = cfg.replace(freeze=dataclasses.replace(cfg.freeze, enabled=True, p=p, freeze_top=top))
            tag = "top" if top else "rest"
            res = run_pipeline(sub, out / f"freeze_{tag}_{p:g}", warmstart_checkpoint=ws)
            rows.append({"p": p, "direction": DIRECTION_LABELS[top], "status": res.status,
                         "frozen_layers": len(res.frozen_layers), "trainable_params": res.trainable_params,
                         "eval_loss": res.eval_loss, "probe_accuracy": res.probe_accuracy,
                         "probe_loss": res.probe_loss})
    write_table(out / "freeze_sweep.csv", rows)
    return rows


def write_table(path, rows):
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in keys])
