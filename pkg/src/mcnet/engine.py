"""Base training, incremental fine-tuning, evaluation and the session protocol."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import (CLASSIFIERS, REGULARIZERS, TRIPLET_VARIANTS, AblationConfig, ConfigError,
                     NumericError, RunConfig)
from .data import (SessionData, SessionStream, augment_batch, build_session_stream, iterate_batches,
                   load_image_dataset, make_synthetic_dataset)
from .losses import base_loss, kd_loss, novel_loss, psht_loss, random_triplet_loss, safe_norm
from .nets import Ensemble
from .proto import PrototypeStore, classify, compute_prototypes, sample_smoothed, update_store_after_session

log = logging.getLogger(__name__)

StepLogger = Callable[[dict], None]


def _noop(_: dict) -> None:
    pass


# -- construction -----------------------------------------------------------

def build_stream(cfg: RunConfig, seed: int) -> SessionStream:
    d = cfg.data
    if d.source == "synthetic":
        dataset, semantic = make_synthetic_dataset(d, seed)
        augment = False
    else:
        dataset, semantic = load_image_dataset(d.root, d.manifest, d.image_size, d.channels,
                                               d.semantic_file or None, d.strict_semantic,
                                               d.semantic_dim, seed)
        augment = d.augment
    stream = build_session_stream(dataset, semantic, cfg.protocol, seed, augment_base=augment)
    if d.normalize:
        base = stream.sessions[0].data.images
        mean = base.mean(axis=(0, 2, 3), keepdims=True)
        std = base.std(axis=(0, 2, 3), keepdims=True) + 1e-6
        for s in stream.sessions:
            s.data.images = (s.data.images - mean) / std
        for v in stream.test_pool.values():
            v.images = (v.images - mean) / std
    return stream


def build_ensemble(cfg: RunConfig, stream: SessionStream, seed: int) -> Ensemble:
    model_cfg = dataclasses.replace(cfg.model, init_seed=cfg.model.init_seed + 7919 * seed)
    return Ensemble(model_cfg, cfg.data.channels, cfg.data.image_size,
                    len(stream.sessions[0].class_set), stream.semantic.dim, cfg.ablation)


def effective_regularizer(ab: AblationConfig) -> str:
    if not ab.use_AR or not ab.use_model2:
        return "none"
    return ab.regularizer


@torch.no_grad()
def encode(ensemble: Ensemble, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Composed features in evaluation mode (float64 numpy)."""
    ensemble.eval()
    out = [ensemble.embed(torch.from_numpy(images[i:i + batch_size])).double().numpy()
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


# -- base session --------------------------------------------------------------

def train_base(stream: SessionStream, cfg: RunConfig, seed: int, ensemble: Ensemble | None = None,
               log_step: StepLogger = _noop) -> tuple[Ensemble, PrototypeStore, dict]:
    """Optimize every parameter on session 0, then build base-class prototypes."""
    if not stream.sessions:
        raise ConfigError("stream has no base session")
    s0 = stream.sessions[0]
    ensemble = ensemble or build_ensemble(cfg, stream, seed)
    classes = s0.classes
    row = {c: i for i, c in enumerate(classes)}
    images = s0.data.images
    targets = torch.tensor([row[int(c)] for c in s0.data.labels])
    semantic = torch.from_numpy(stream.semantic.matrix(classes))
    reg = effective_regularizer(cfg.ablation)
    t = cfg.train

    opt = torch.optim.SGD(ensemble.parameters(), lr=t.base_lr, momentum=t.momentum,
                          weight_decay=t.weight_decay)
    total_steps = max(1, t.base_epochs * math.ceil(len(images) / t.batch_size))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)
    aug_rng = np.random.default_rng([seed, 0, 17])
    step, losses = 0, []
    ensemble.train()
    for epoch in range(t.base_epochs):
        for idx in iterate_batches(len(images), t.batch_size, [seed, 0, epoch]):
            if len(idx) < 2:  # batch norm needs two samples
                continue
            x = images[idx]
            if stream.augment_base:
                x = augment_batch(x, aug_rng)
            bundle = ensemble.features(torch.from_numpy(np.ascontiguousarray(x)))
            loss, breakdown = base_loss(bundle, targets[idx], ensemble.phi, ensemble.semantic(semantic),
                                        cfg.loss, reg, cfg.ablation.model1_classifier,
                                        ensemble.discriminator)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite base loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            record = {"session": 0, "epoch": epoch, "step": step, **breakdown}
            log_step(record)
            losses.append(breakdown["total"])
            step += 1
    store = PrototypeStore()
    store = update_store_after_session(store, encode(ensemble, images), s0.data.labels, 0,
                                       shrink_variance=False)
    return ensemble, store, {"steps": step, "final_loss": losses[-1] if losses else None}


# -- incremental sessions ---------------------------------------------------------

def _old_pool(store: PrototypeStore, variant: str, n_per_class: int, seed) -> tuple[torch.Tensor, torch.Tensor] | tuple[None, None]:
    if variant in ("TL", "HTL") or not len(store):
        return None, None
    feats, labels = [], []
    for c in store.classes:
        e = store.entries[c]
        if variant == "PHT":
            feats.append(e.mean[None, :])
            labels.append(c)
        else:
            feats.append(sample_smoothed(e.mean, e.var, n_per_class, [*seed, c]))
            labels += [c] * n_per_class
    return torch.from_numpy(np.concatenate(feats)).float(), torch.tensor(labels)


def _single_shot_positives(z: torch.Tensor, y: torch.Tensor, store: PrototypeStore, seed) -> tuple[torch.Tensor, torch.Tensor] | tuple[None, None]:
    counts = {int(c): int((y == c).sum()) for c in torch.unique(y)}
    lonely = [c for c, n in counts.items() if n == 1]
    if not lonely:
        return None, None
    log.warning("classes %s have one sample; using smoothed prototype draws as positives", lonely)
    var = store.mean_variance(0) if len(store) else np.zeros(z.shape[1])
    feats = [sample_smoothed(z[y == c][0].detach().double().numpy(), var, 1, [*seed, c]) for c in lonely]
    return torch.from_numpy(np.concatenate(feats)).to(z.dtype), torch.tensor(lonely)


def descent_gradient(g_other: torch.Tensor, g_kd: torch.Tensor, z: torch.Tensor, z_prev: torch.Tensor,
                     lam: float) -> torch.Tensor:
    """Feature-space gradient of ``other + lam * kd`` using the minimum-norm subgradient at the kink.

    Where a row's feature equals its snapshot feature the distance term is
    not differentiable; its subdifferential there is a ball of radius
    lam / batch.  The steepest-descent choice soft-thresholds the other
    terms' gradient by that radius, so the row stays put while their pull
    is weaker than the distillation weight.
    """
    g = g_other + lam * g_kd
    if lam <= 0:
        return g
    d = safe_norm(z.detach() - z_prev)
    kink = d <= 1e-6 * torch.clamp(z_prev.norm(dim=1), min=1.0)
    if not bool(kink.any()):
        return g
    radius = lam / len(z)
    gk = g_other[kink]
    gn = gk.norm(dim=1, keepdim=True)
    g[kink] = gk * torch.clamp(1 - radius / torch.clamp(gn, min=1e-30), min=0)
    return g


def param_drift(before: Mapping[str, torch.Tensor], module: torch.nn.Module) -> float:
    total = 0.0
    for name, p in module.named_parameters():
        total += float(((p.detach().double() - before[name].double()) ** 2).sum())
    return math.sqrt(total)


def finetune_incremental(ensemble: Ensemble, store: PrototypeStore, session: SessionData, cfg: RunConfig,
                         seed: int, log_step: StepLogger = _noop) -> tuple[Ensemble, PrototypeStore, dict]:
    """Fine-tune the deep blocks on one few-shot session, then add its prototypes.

    The loss is the triplet variant selected by ``cfg.ablation.triplet_variant``
    plus ``lam`` times feature distillation against a frozen copy of the
    incoming model.  Batch-norm statistics stay frozen.
    """
    t = session.index
    if t < 1:
        raise ConfigError("finetune_incremental needs an incremental session (t >= 1)")
    tc, ab, lc = cfg.train, cfg.ablation, cfg.loss
    tuned = []
    if ab.use_finetune:
        if not tc.trainable_blocks:
            raise ConfigError("trainable_blocks is empty: nothing to optimize")
        tuned = ensemble.trainable_parameters(tc.trainable_blocks)
        if not tuned:
            raise ConfigError("trainable_blocks selects no parameters: nothing to optimize")

    snapshot = copy.deepcopy(ensemble).eval()
    for p in snapshot.parameters():
        p.requires_grad_(False)
    before = {n: p.detach().clone() for n, p in ensemble.named_parameters()}
    x_all = torch.from_numpy(session.data.images)
    y_all = torch.from_numpy(session.data.labels)
    n_pseudo = tc.pseudo_per_class or session.k_shot
    records = []

    if tuned and tc.incr_epochs > 0:
        ensemble.eval()
        flags = {n: p.requires_grad for n, p in ensemble.named_parameters()}
        tuned_names = {n for n, _ in tuned}
        for n, p in ensemble.named_parameters():
            p.requires_grad_(n in tuned_names)
        opt = torch.optim.SGD([p for _, p in tuned], lr=tc.incr_lr, momentum=tc.momentum,
                              weight_decay=tc.incr_weight_decay)
        step = 0
        try:
            for epoch in range(tc.incr_epochs):
                extra, extra_y = _old_pool(store, ab.triplet_variant, n_pseudo, [seed, t, epoch])
                gen = torch.Generator().manual_seed(int(np.random.default_rng([seed, t, epoch, 5]).integers(2**31)))
                for idx in iterate_batches(len(y_all), tc.batch_size, [seed, t, epoch]):
                    idx = torch.from_numpy(idx)
                    xb, yb = x_all[idx], y_all[idx]
                    with torch.no_grad():
                        z_prev = snapshot.embed(xb)
                    z = ensemble.embed(xb)
                    zl = z.detach().requires_grad_(True)
                    pos_x, pos_y = _single_shot_positives(zl, yb, store, [seed, t, epoch, 9])
                    ex, ey = extra, extra_y
                    if pos_x is not None:
                        ex = pos_x if ex is None else torch.cat([ex, pos_x])
                        ey = pos_y if ey is None else torch.cat([ey, pos_y])
                    if ab.triplet_variant == "TL":
                        trip = random_triplet_loss(zl, yb, gen, ex, ey, lc.margin)
                    else:
                        trip = psht_loss(zl, yb, ex, ey, lc.margin)
                    kd = kd_loss(zl, z_prev)
                    loss = novel_loss(trip, kd, lc.lam)
                    if not torch.isfinite(loss):
                        raise NumericError(f"non-finite incremental loss at session {t} step {step}")
                    g_trip = torch.autograd.grad(trip, zl, retain_graph=True)[0]
                    g_kd = torch.autograd.grad(kd, zl)[0]
                    g = descent_gradient(g_trip, g_kd, zl, z_prev, lc.lam)
                    opt.zero_grad()
                    z.backward(g)
                    opt.step()
                    rec = {"session": t, "epoch": epoch, "step": step, "triplet": float(trip.detach()),
                           "kd": float(kd.detach()), "total": float(loss.detach())}
                    log_step(rec)
                    records.append(rec)
                    step += 1
        finally:
            for n, p in ensemble.named_parameters():
                p.requires_grad_(flags[n])

    drift = param_drift(before, ensemble)
    feats = encode(ensemble, session.data.images)
    store = update_store_after_session(store, feats, session.data.labels, t,
                                       shrink_variance=tc.variance_shrinkage)
    return ensemble, store, {"drift": drift, "steps": len(records),
                             "final_loss": records[-1]["total"] if records else None,
                             "snapshot": snapshot}


# -- evaluation -----------------------------------------------------------------

def evaluate_detail(ensemble: Ensemble, store: PrototypeStore, stream: SessionStream, t: int) -> dict:
    seen = stream.seen_classes(t)
    missing = [c for c in seen if c not in store]
    if missing:
        raise ConfigError(f"missing prototype for class {missing[0]}")
    test = stream.test_set(t)
    pred = classify(encode(ensemble, test.images), store, seen)
    correct = pred == test.labels
    base = np.isin(test.labels, list(stream.sessions[0].class_set))
    return {
        "session": t,
        "accuracy": float(correct.mean()),
        "base_accuracy": float(correct[base].mean()),
        "novel_accuracy": float(correct[~base].mean()) if (~base).any() else None,
        "n_classes": len(seen),
        "n_test": int(len(test)),
    }


def evaluate_session(ensemble: Ensemble, store: PrototypeStore, stream: SessionStream, t: int) -> float:
    """Top-1 accuracy over the test samples of every class seen up to session ``t``."""
    return evaluate_detail(ensemble, store, stream, t)["accuracy"]


# -- protocol ------------------------------------------------------------------------

BASE_KEYS = {
    "train": ("base_lr", "momentum", "weight_decay", "batch_size", "base_epochs"),
    "loss": ("alpha", "tau", "ar_on_heads"),
    "ablation": ("use_model2", "use_attention_head", "use_AR", "regularizer", "model1_classifier"),
}


def base_key(cfg: RunConfig, seed: int) -> str:
    d = cfg.to_dict()
    parts = {"seed": seed, "data": d["data"], "model": d["model"], "protocol": d["protocol"]}
    for section, keys in BASE_KEYS.items():
        parts[section] = {k: d[section][k] for k in keys}
    return hashlib.sha1(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:16]


class BaseCache:
    """Shares trained base sessions between runs that differ only after session 0."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else None
        self.memory: dict[str, dict] = {}
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)

    def get(self, key: str):
        if key in self.memory:
            return self.memory[key]
        if self.directory and (self.directory / f"base_{key}.npz").is_file():
            entry = ckpt.load_checkpoint(self.directory / f"base_{key}.npz")
            entry = {"state_dict": entry["state_dict"], "store": entry["store"], "meta": entry["meta"]}
            self.memory[key] = entry
            return entry
        return None

    def put(self, key: str, ensemble: Ensemble, store: PrototypeStore, meta: dict) -> None:
        self.memory[key] = {"state_dict": copy.deepcopy(ensemble.state_dict()), "store": store.copy(),
                            "meta": meta}
        if self.directory:
            ckpt.save_checkpoint(self.directory / f"base_{key}.npz", ensemble, store, meta)


def _ckpt_meta(cfg: RunConfig, stream: SessionStream, seed: int, session: int) -> dict:
    return {"config": cfg.to_dict(), "session": session, "seed": seed,
            "n_base_classes": len(stream.sessions[0].class_set), "semantic_dim": stream.semantic.dim,
            "channels": cfg.data.channels, "image_size": cfg.data.image_size}


def run_protocol(cfg: RunConfig, out_dir: str | Path | None = None, seed: int | None = None,
                 resume: bool = False, force: bool = False, cache: BaseCache | None = None,
                 keep_states: bool = False) -> dict:
    """Base training then, per incremental session, fine-tune, update prototypes, evaluate.

    Returns the metrics report; with ``out_dir`` also writes ``summary.json``,
    ``steps.jsonl``, ``timing.json``, ``config.ini`` and one checkpoint per session.
    """
    cfg.validate()
    seed = cfg.protocol.seed if seed is None else seed
    started = time.perf_counter()
    out = Path(out_dir) if out_dir else None
    stream = build_stream(cfg, seed)
    report = {"seed": seed, "config_hash": cfg.config_hash(), "config": cfg.to_dict(),
              "n_sessions": len(stream.sessions), "sessions": [], "accuracies": [], "status": "running"}
    steps_fh = None
    start_t = 0
    ensemble = store = None

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        existing = sorted(out.glob("ckpt_session_*.npz"), key=lambda p: int(p.stem.rsplit("_", 1)[1]))
        if resume and existing:
            loaded = ckpt.load_checkpoint(existing[-1])
            same = json.dumps(loaded["meta"]["config"], sort_keys=True) == json.dumps(cfg.to_dict(), sort_keys=True)
            if not same or loaded["meta"]["seed"] != seed:
                raise ConfigError(f"cannot resume: {existing[-1]} was written with a different config/seed")
            ensemble = build_ensemble(cfg, stream, seed)
            ensemble.load_state_dict(loaded["state_dict"])
            store = loaded["store"]
            report = loaded["report"]
            start_t = loaded["meta"]["session"] + 1
            kept = []
            if (out / "steps.jsonl").is_file():
                kept = [ln for ln in (out / "steps.jsonl").read_text().splitlines()
                        if json.loads(ln)["session"] < start_t]
            (out / "steps.jsonl").write_text("".join(ln + "\n" for ln in kept))
        elif (existing or (out / "summary.json").exists()) and not force:
            raise ConfigError(f"{out} already holds a run; use --force to overwrite or --resume")
        else:
            for p in existing:
                p.unlink()
            (out / "steps.jsonl").write_text("")
        (out / "config.ini").write_text(cfg.to_ini())
        steps_fh = open(out / "steps.jsonl", "a")

    def log_step(rec: dict) -> None:
        if steps_fh is not None:
            steps_fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def flush(status: str) -> None:
        report["status"] = status
        if out is not None:
            (out / "summary.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
            (out / "timing.json").write_text(json.dumps(
                {"wall_time_s": time.perf_counter() - started}, indent=2) + "\n")

    states: list = []  # kept out of the report so it stays serializable

    def record(t: int, extra: dict) -> None:
        snapshot = extra.pop("_snapshot", None)
        entry = evaluate_detail(ensemble, store, stream, t)
        entry.update(extra)
        report["sessions"].append(entry)
        report["accuracies"].append(entry["accuracy"])
        if out is not None:
            ckpt.save_checkpoint(ckpt.checkpoint_path(out, t), ensemble, store,
                                 _ckpt_meta(cfg, stream, seed, t), report)
        if keep_states:
            states.append((copy.deepcopy(ensemble.state_dict()), store.copy(), snapshot))

    try:
        if start_t == 0:
            key = base_key(cfg, seed)
            hit = cache.get(key) if cache is not None else None
            if hit is not None:
                ensemble = build_ensemble(cfg, stream, seed)
                ensemble.load_state_dict(hit["state_dict"])
                store = hit["store"].copy()
                base_info = hit["meta"].get("base_info", {})
            else:
                ensemble, store, base_info = train_base(stream, cfg, seed, log_step=log_step)
                if cache is not None:
                    cache.put(key, ensemble, store, {"base_info": base_info})
            record(0, {"drift": 0.0, "train_steps": base_info.get("steps"),
                       "final_loss": base_info.get("final_loss")})
            start_t = 1
        for t in range(start_t, len(stream.sessions)):
            session = stream.sessions[t]
            ensemble, store, info = finetune_incremental(ensemble, store, session, cfg, seed, log_step)
            extra = {"drift": info["drift"], "train_steps": info["steps"], "final_loss": info["final_loss"]}
            if keep_states:
                extra["_snapshot"] = copy.deepcopy(info["snapshot"].state_dict())
            record(t, extra)
    except Exception as exc:
        report["error"] = f"{type(exc).__name__}: {exc}"
        flush("aborted")
        raise
    finally:
        if steps_fh is not None:
            steps_fh.close()
    flush("completed")
    return {**report, "_states": states} if keep_states else report


# -- ablations ------------------------------------------------------------------------

SWEEP_PRESETS: dict[str, list] = {
    "loss.alpha": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
    "loss.lam": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
    "train.trainable_blocks": [("all",), ("layer:3", "layer:4", "layer:5"), ("layer:4", "layer:5"),
                               ("last",), ("layer:4",), ("layer:3",)],
}


def ablation_values(axis: str) -> list:
    name = axis.split(".", 1)[1] if axis.startswith("ablation.") else axis
    if name in ("use_model2", "use_attention_head", "use_AR", "use_finetune"):
        return [True, False]
    if name == "triplet_variant":
        return list(TRIPLET_VARIANTS)
    if name == "regularizer":
        return list(REGULARIZERS)
    if name == "model1_classifier":
        return list(CLASSIFIERS)
    if axis in SWEEP_PRESETS:
        return list(SWEEP_PRESETS[axis])
    raise ConfigError(f"unknown ablation axis {axis!r}")


def _axis_key(axis: str) -> str:
    if "." in axis:
        return axis
    if axis not in AblationConfig.__dataclass_fields__:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    return f"ablation.{axis}"


def cell_name(overrides: Mapping) -> str:
    if not overrides:
        return "default"
    parts = []
    for k, v in overrides.items():
        v = "+".join(v) if isinstance(v, tuple) else v
        parts.append(f"{k.split('.')[-1]}={v}".replace(":", "").replace("/", "_"))
    return "__".join(parts)


def _run_cell(args):
    cfg_dict, overrides, out_dir, cache_dir, force = args
    cfg = RunConfig.from_dict(cfg_dict).replace(**overrides)
    return run_protocol(cfg, out_dir, force=force, cache=BaseCache(cache_dir))


def run_ablation(cfg: RunConfig, axes: Mapping[str, Iterable] | Iterable[str] = (),
                 out_dir: str | Path | None = None, cache: BaseCache | None = None,
                 workers: int = 1, force: bool = False) -> list[dict]:
    """Cartesian sweep over ablation axes with a shared seed; one report per cell."""
    if not isinstance(axes, Mapping):
        axes = {a: ablation_values(a) for a in axes}
    keys = [_axis_key(a) for a in axes]
    for k in keys:
        if k.split(".")[0] not in ("ablation", "loss", "train", "model"):
            raise ConfigError(f"unknown ablation axis {k!r}")
    grids = [list(v) for v in axes.values()]
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*grids)]
    out = Path(out_dir) if out_dir else None
    cache = cache or BaseCache(out / "_base_cache" if out else None)
    results = []
    if workers > 1 and out is not None:
        jobs = [(cfg.to_dict(), cell, out / cell_name(cell), cache.directory, force) for cell in cells]
        with ProcessPoolExecutor(workers) as pool:
            reports = list(pool.map(_run_cell, jobs))
        results = [{"overrides": cell, "name": cell_name(cell), "report": r} for cell, r in zip(cells, reports)]
    else:
        for cell in cells:
            cell_cfg = cfg.replace(**cell)
            report = run_protocol(cell_cfg, out / cell_name(cell) if out else None, force=force, cache=cache)
            results.append({"overrides": cell, "name": cell_name(cell), "report": report})
    if out is not None:
        table = [{"name": r["name"], "overrides": {k: list(v) if isinstance(v, tuple) else v
                                                    for k, v in r["overrides"].items()},
                  "accuracies": r["report"]["accuracies"]} for r in results]
        (out / "ablation.json").write_text(json.dumps(table, indent=2) + "\n")
    return results
