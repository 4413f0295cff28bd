"""Training loop, evaluation and the component-ablation grid."""
from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import diffcore as dc
from . import metrics as M
from .config import RunConfig
from .errors import ContractError, NumericAbort
from .model import compute_loss, forward_pass, init_params, make_batch, trainable
from .synthscene import Sample, SceneConfig, generate_dataset, generate_scene, make_codebooks

log = logging.getLogger(__name__)

# seed-sequence tags keep the random streams of a run independent
_TRAIN_DATA, _TRAIN_NOISE, _EVAL_DATA, _EVAL_NOISE, _BASELINE = 0x7D, 0x70, 0xE7, 0xE0, 0xBA


def scene_config(config: RunConfig):
    return SceneConfig(
        grid=config.grid, min_objects=config.min_objects, max_objects=config.max_objects,
        shape_family=config.shape_family, noise=config.noise, n_categories=config.n_categories,
        d_appearance=config.d_appearance, d_emb=config.d_emb, max_queries=config.queries_per_scene,
        min_sep=config.codebook_min_sep, min_size=config.min_size, max_size=config.max_size or None,
    )


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


class BatchStream:
    """Training batches keyed by (seed, step) so any worker count gives the same data."""

    def __init__(self, config, codebooks, dataset=None):
        self.config = config
        self.codebooks = codebooks
        self.scene_cfg = scene_config(config)
        self.dataset = dataset
        self.targets = codebooks.target.codes if config.target_codebook == "distinct" else None

    def samples(self, step):
        cfg = self.config
        rng = _rng(cfg.seed, _TRAIN_DATA, step)
        if self.dataset is not None:
            idx = rng.integers(0, len(self.dataset), size=cfg.batch_size)
            return [self.dataset[i] for i in idx]
        return [Sample(*generate_scene(self.scene_cfg, self.codebooks, rng)) for _ in range(cfg.batch_size)]

    def batch(self, step):
        return make_batch(self.samples(step), self.config.n_slots, self.targets, self.config.use_queries)

    def iterate(self, start, stop):
        workers = self.config.workers
        if workers <= 1:
            for step in range(start, stop):
                yield self.batch(step)
            return
        with ThreadPoolExecutor(workers) as pool:
            pending = {}
            nxt = start
            for step in range(start, stop):
                while nxt < stop and nxt < step + 2 * workers:
                    pending[nxt] = pool.submit(self.batch, nxt)
                    nxt += 1
                yield pending.pop(step).result()


@dataclass
class TrainLog:
    config: dict
    steps: list = field(default_factory=list)  # {"step", "recon", "contrastive", "total"}
    evals: list = field(default_factory=list)  # {"step", **MetricsReport}
    wall_clock: float = 0.0

    def append(self, step, parts):
        if self.steps and step <= self.steps[-1]["step"]:
            raise ContractError("train log steps must increase")
        self.steps.append({"step": int(step), **parts})

    def to_dict(self):
        return {"config": self.config, "steps": self.steps, "evals": self.evals, "wall_clock": self.wall_clock}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


def clip_grads(grads, max_norm):
    if max_norm <= 0:
        return grads
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads


class _Rotation:
    def __init__(self, out_dir, keep):
        self.out_dir, self.keep, self.saved = out_dir, keep, []
        self.best = -np.inf

    def save(self, params, config, step, extra=None):
        path = os.path.join(self.out_dir, f"ckpt_{step:07d}.ckpt")
        checkpoint.save(path, params, config, step, extra)
        self.saved.append(path)
        while len(self.saved) > self.keep:
            old = self.saved.pop(0)
            if os.path.exists(old):
                os.remove(old)
        return path

    def offer_best(self, params, config, step, score, extra=None):
        if np.isfinite(score) and score > self.best:
            self.best = score
            checkpoint.save(os.path.join(self.out_dir, "best.ckpt"), params, config, step,
                            {**(extra or {}), "binding_hits": score})


def lr_at(config, step):
    """Learning rate for optimizer step ``step`` (0-based)."""
    if config.lr_schedule == "cosine" and config.steps > 1:
        # half cosine from lr down to lr/10 over the run
        frac = step / (config.steps - 1)
        return config.lr * (0.1 + 0.45 * (1.0 + np.cos(np.pi * frac)))
    return config.lr


def train(config: RunConfig, out_dir=None, dataset=None, eval_set=None, contrastive_input="features",
          progress=None):
    """Optimize the full objective with Adam; returns (params, TrainLog).

    With ``out_dir`` writes rotating checkpoints, ``best.ckpt`` (by binding
    hits on the periodic eval), ``final.ckpt`` and ``trainlog.json``.
    ``contrastive_input`` is a test-only switch for the leakage wiring.
    """
    t0 = time.perf_counter()
    head_input = "slots" if contrastive_input == "slots" else "features"
    params = init_params(config, head_input=head_input)
    flat = trainable(params)
    codebooks = make_codebooks(scene_config(config), config.seed)
    stream = BatchStream(config, codebooks, dataset)
    opt = dc.AdamState(lr=config.lr)
    tlog = TrainLog(config.to_dict())
    extra = {"head_input": head_input}
    rot = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        rot = _Rotation(out_dir, config.keep_checkpoints)
    if eval_set is None and out_dir is not None and config.steps > 0:
        eval_set = make_eval_set(config, codebooks)

    for step, batch in enumerate(stream.iterate(0, config.steps)):
        noise_rng = _rng(config.seed, _TRAIN_NOISE, step)
        dc.zero_grads(flat)
        loss, parts, _ = compute_loss(batch, params, config, rng=noise_rng, contrastive_input=contrastive_input)
        if not np.isfinite(parts["total"]):
            path = None
            if out_dir is not None:
                path = checkpoint.save(os.path.join(out_dir, "last_good.ckpt"), params, config, step, extra)
            raise NumericAbort(f"non-finite loss at step {step}", step, path)
        grads = clip_grads(dc.backward(loss, flat), config.grad_clip)
        opt.lr = lr_at(config, step)
        dc.adam_step(flat, grads, opt)
        tlog.append(step, parts)
        if progress is not None:
            progress(step, parts)
        done = step + 1
        if rot is not None and done % config.eval_every == 0 and eval_set:
            rep = evaluate(params, config, eval_set)
            tlog.evals.append({"step": done, **rep.to_dict()})
            log.info("eval at step %d: fg_ari %.4f mbo %.4f binding_hits %.4f", done, rep.fg_ari, rep.mbo,
                     rep.binding_hits)
            rot.offer_best(params, config, done, rep.binding_hits, extra)
        if rot is not None and done % config.ckpt_every == 0:
            rot.save(params, config, done, extra)

    tlog.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        checkpoint.save(os.path.join(out_dir, "final.ckpt"), params, config, config.steps, extra)
        tlog.save(os.path.join(out_dir, "trainlog.json"))
    return params, tlog


def make_eval_set(config, codebooks=None, n=None):
    codebooks = codebooks or make_codebooks(scene_config(config), config.seed)
    n = config.eval_samples if n is None else n
    return generate_dataset(scene_config(config), codebooks, n, seed=(config.seed << 8) ^ _EVAL_DATA)


def predict_masks(params, config, samples, chunk=32, rng=None):
    """Soft decoder masks (n, N, K) and last-iteration attention for ``samples``."""
    rng = rng or _rng(config.seed, _EVAL_NOISE)
    targets = None
    soft, attn = [], []
    with dc.no_grad():
        for i in range(0, len(samples), chunk):
            batch = make_batch(samples[i:i + chunk], config.n_slots, targets, config.use_queries)
            out = forward_pass(batch, params, config, rng=rng)
            soft.append(out.masks.data)
            attn.append(out.slots.attn.data)
    return np.concatenate(soft), np.concatenate(attn)


def evaluate(params, config, dataset, baseline_trials=20, binding_mode="unique_argmax"):
    """FG-ARI, mBO, Binding Hits and mIoU over ``dataset`` from hard decoder masks.

    ``binding_baseline`` is the Monte-Carlo binding-hits rate when each
    sample's slot indices are shuffled (random binding).
    """
    if not dataset:
        raise ContractError("cannot evaluate on an empty dataset")
    soft, _ = predict_masks(params, config, dataset)
    base_rng = _rng(config.seed, _BASELINE)
    aris, mbos, ious = [], [], []
    hits = n_bind = 0
    base_hits = 0
    degenerate = 0
    n_slots = config.n_slots
    for s, sm in zip(dataset, soft):
        pred = M.hard_masks(sm)
        gt = s.scene.object_masks
        val, flag = M.fg_ari(pred, gt, return_flag=True)
        aris.append(val)
        degenerate += flag
        mbos.append(M.mbo(pred, gt))
        if not config.use_queries:
            continue
        ids = s.queries.gt_object_ids
        bindings = [(j, int(o)) for j, o in enumerate(ids)]
        h, n = M.binding_hit_count(pred, gt, bindings, binding_mode)
        hits += h
        n_bind += n
        ious.extend(M.iou(pred[j], gt[o]) for j, o in bindings)
        for _ in range(baseline_trials):
            perm = base_rng.permutation(n_slots)
            base_hits += M.binding_hit_count(pred, gt, [(int(perm[j]), o) for j, o in bindings], binding_mode)[0]
    bh = hits / n_bind if n_bind else float("nan")
    base = base_hits / (n_bind * baseline_trials) if n_bind else float("nan")
    return M.MetricsReport(
        fg_ari=float(np.mean(aris)), mbo=float(np.mean(mbos)), binding_hits=bh,
        miou=float(np.mean(ious)) if ious else float("nan"), n_samples=len(dataset),
        n_bindings=n_bind, binding_baseline=base, fg_ari_degenerate=int(degenerate),
    )


def write_report(report: M.MetricsReport, config, out_dir, name="report"):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{name}.txt"), "w") as fh:
        fh.write(report.to_text())
        fh.write("\n# config\n" + config.to_text())
    with open(os.path.join(out_dir, f"{name}.json"), "w") as fh:
        json.dump({"metrics": report.to_dict(), "config": config.to_dict()}, fh, indent=2)


# --- ablation ------------------------------------------------------------

ABLATION_ROWS = [
    ("slot-init", {"contrastive_loss": False, "decoder_conditioning": False}),
    ("slot-init+DC", {"contrastive_loss": False, "decoder_conditioning": True}),
    ("slot-init+CL", {"contrastive_loss": True, "decoder_conditioning": False}),
    ("slot-init+CL+DC", {"contrastive_loss": True, "decoder_conditioning": True}),
]
NO_INIT_ROW = ("no-init+CL+DC (extra)", {"contrastive_loss": True, "decoder_conditioning": True,
                                             "slot_init": "none"})


@dataclass
class AblationTable:
    rows: list  # {"name", "switches", "binding_hits", "fg_ari", "mbo", "baseline", "per_seed"}
    seeds: list
    base_config: dict
    complete: bool = True

    def row(self, name):
        return next(r for r in self.rows if r["name"] == name)

    def to_text(self):
        lines = [f"{'row':<28}{'BindingHits':>12}{'FG-ARI':>9}{'mBO':>9}{'random':>9}"]
        for r in self.rows:
            lines.append(f"{r['name']:<28}{r['binding_hits']:>12.4f}{r['fg_ari']:>9.4f}{r['mbo']:>9.4f}"
                         f"{r['baseline']:>9.4f}")
        lines.append(f"seeds: {self.seeds}" + ("" if self.complete else "   (INCOMPLETE)"))
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {"rows": self.rows, "seeds": self.seeds, "base_config": self.base_config,
                "complete": self.complete}


def ablation_configs(base: RunConfig, seeds, include_no_init=False):
    rows = ABLATION_ROWS + ([NO_INIT_ROW] if include_no_init else [])
    return [(name, sw, [base.replace(seed=s, **sw) for s in seeds]) for name, sw in rows]


def ablate(base: RunConfig, seeds=None, include_no_init=False, out_dir=None, progress=None):
    """Train and evaluate every ablation row on shared seeds."""
    seeds = list(seeds) if seeds is not None else [base.seed, base.seed + 1, base.seed + 2]
    table = AblationTable([], seeds, base.to_dict())
    for name, switches, cfgs in ablation_configs(base, seeds, include_no_init):
        per_seed = []
        for cfg in cfgs:
            try:
                params, tlog = train(cfg)
                rep = evaluate(params, cfg, make_eval_set(cfg))
            except Exception as e:  # noqa: BLE001 - cell failures mark the table incomplete
                log.error("ablation cell %s seed %d failed: %s", name, cfg.seed, e)
                table.complete = False
                continue
            per_seed.append({"seed": cfg.seed, "final_loss": tlog.steps[-1]["total"] if tlog.steps else None,
                             "wall_clock": tlog.wall_clock, **rep.to_dict()})
            if progress is not None:
                progress(name, cfg.seed, rep)
        agg = lambda k: float(np.mean([p[k] for p in per_seed])) if per_seed else float("nan")
        table.rows.append({"name": name, "switches": switches, "binding_hits": agg("binding_hits"),
                           "fg_ari": agg("fg_ari"), "mbo": agg("mbo"), "baseline": agg("binding_baseline"),
                           "per_seed": per_seed})
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.txt"), "w") as fh:
            fh.write(table.to_text() + "\n# base config\n" + base.to_text())
        with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
            json.dump(table.to_dict(), fh, indent=2)
    return table
