"""Command-line entry points: ``mcnet {prepare,run,ablate,eval,plot}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import PRESETS, ConfigError, NumericError, ProtocolError, RunConfig, preset
from .engine import (BaseCache, ablation_values, build_ensemble, build_stream, evaluate_detail, run_ablation,
                     run_protocol)

log = logging.getLogger("mcnet")


def load_config(args) -> RunConfig:
    cfg = preset(args.preset)
    if args.config:
        cfg = RunConfig.load(args.config, base=cfg)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        cfg.set(key.strip(), value)
    if args.seed is not None:
        cfg.protocol.seed = args.seed
    return cfg.validate()


def _write_once(path: Path, text: str, force: bool) -> None:
    """Write ``text``; an existing file with different content needs ``force``."""
    if path.exists() and path.read_text() != text and not force:
        raise ConfigError(f"{path} exists with different content; use --force to overwrite")
    path.write_text(text)


def cmd_prepare(args) -> int:
    cfg = load_config(args)
    stream = build_stream(cfg, cfg.protocol.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    desc = stream.descriptor()
    desc["seed"] = cfg.protocol.seed
    _write_once(out / "stream.json", json.dumps(desc, indent=2, sort_keys=True) + "\n", args.force)
    if cfg.data.source == "synthetic":
        all_sets = [s.data for s in stream.sessions] + list(stream.test_pool.values())
        images = np.concatenate([s.images for s in all_sets])
        labels = np.concatenate([s.labels for s in all_sets])
        uids = np.concatenate([s.uids for s in all_sets])
        order = np.argsort(uids, kind="stable")
        np.savez_compressed(out / "synthetic.npz", images=images[order], labels=labels[order], uids=uids[order])
    print(f"{desc['n_sessions']} sessions, split {desc['split_hash'][:12]} -> {out / 'stream.json'}")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args)
    cache = BaseCache(args.cache) if args.cache else None
    report = run_protocol(cfg, args.out, seed=cfg.protocol.seed, resume=args.resume, force=args.force,
                          cache=cache)
    print(" ".join(f"{a:.4f}" for a in report["accuracies"]))
    return 0 if report["status"] == "completed" else 1


def _parse_axis(spec: str) -> tuple[str, list]:
    name, sep, values = spec.partition("=")
    if not sep:
        return name, ablation_values(name)
    probe = RunConfig()
    key = name if "." in name else f"ablation.{name}"
    parsed = []
    for raw in values.split(","):
        probe.set(key, raw.replace("+", ","))
        section, field = key.split(".")
        parsed.append(getattr(getattr(probe, section), field))
    return name, parsed


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    axes = dict(_parse_axis(a) for a in args.axis or [])
    results = run_ablation(cfg, axes, args.out, workers=args.workers, force=args.force)
    for r in results:
        print(f"{r['name']}: final {r['report']['accuracies'][-1]:.4f}")
    return 0 if all(r["report"]["status"] == "completed" for r in results) else 1


def _last_checkpoint(path: Path) -> Path:
    if path.is_file():
        return path
    found = sorted(path.glob("ckpt_session_*.npz"), key=lambda p: int(p.stem.rsplit("_", 1)[1]))
    if not found:
        raise ConfigError(f"no checkpoint found in {path}")
    return found[-1]


def cmd_eval(args) -> int:
    loaded = ckpt.load_checkpoint(_last_checkpoint(Path(args.checkpoint)))
    meta = loaded["meta"]
    cfg = RunConfig.from_dict(meta["config"]).validate()
    stream = build_stream(cfg, meta["seed"])
    ensemble = build_ensemble(cfg, stream, meta["seed"])
    ensemble.load_state_dict(loaded["state_dict"])
    t = meta["session"] if args.session is None else args.session
    if not 0 <= t <= meta["session"]:
        raise ConfigError(f"checkpoint covers sessions 0..{meta['session']}, got {t}")
    result = evaluate_detail(ensemble, loaded["store"], stream, t)
    result["session"] = t
    print(json.dumps(result, sort_keys=True))
    return 0


# -- plots ----------------------------------------------------------------------------

def _summaries(paths) -> tuple[list[tuple[str, dict]], list[tuple[str, list]]]:
    runs, tables = [], []
    for p in map(Path, paths):
        if (p / "ablation.json").is_file():
            tables.append((p.name, json.loads((p / "ablation.json").read_text())))
        elif (p / "summary.json").is_file():
            runs.append((p.name, json.loads((p / "summary.json").read_text())))
        elif p.is_file() and p.suffix == ".json":
            runs.append((p.stem, json.loads(p.read_text())))
        else:
            raise ConfigError(f"{p} has no summary.json or ablation.json")
    return runs, tables


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs, tables = _summaries(args.runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if runs:
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, rep in runs:
            acc = rep["accuracies"]
            ax.plot(range(len(acc)), acc, marker="o", label=name)
        ax.set_xlabel("session")
        ax.set_ylabel("top-1 accuracy")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / "curves.png")
        plt.close(fig)
        written.append(out / "curves.png")
    for name, table in tables:
        axes = sorted({k for cell in table for k in cell["overrides"]})
        finals = [cell["accuracies"][-1] for cell in table]
        if len(axes) == 1 and all(isinstance(c["overrides"][axes[0]], (int, float))
                                  and not isinstance(c["overrides"][axes[0]], bool) for c in table):
            xs = [c["overrides"][axes[0]] for c in table]
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.plot(xs, finals, marker="o")
            ax.set_xlabel(axes[0].split(".")[-1])
            ax.set_ylabel("final-session accuracy")
            path = out / f"{name}_sweep.png"
        else:
            labels = ["/".join(str(c["overrides"][k]) if not isinstance(c["overrides"][k], list)
                               else "+".join(c["overrides"][k]) for k in axes) or c["name"] for c in table]
            fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(table) + 2), 3.5))
            ax.bar(range(len(table)), finals, tick_label=labels)
            ax.set_ylabel("final-session accuracy")
            ax.tick_params(axis="x", labelsize=8)
            path = out / f"{name}_bars.png"
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    for p in written:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--preset", choices=PRESETS, default="toy")
        p.add_argument("--config", help="INI file applied on top of the preset")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required)
        p.add_argument("--force", action="store_true", help="overwrite an existing output directory")

    p = sub.add_parser("prepare", help="materialize data and write the session descriptor")
    common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("run", help="train base, fine-tune every session, evaluate")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from the last session checkpoint")
    p.add_argument("--cache", help="directory for shared base-session checkpoints")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="Cartesian sweep over ablation axes")
    common(p)
    p.add_argument("--axis", action="append",
                   help="axis name, optionally with values: triplet_variant or loss.lam=0,0.5,16")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="re-evaluate a checkpoint")
    p.add_argument("checkpoint", help="checkpoint file or run directory")
    p.add_argument("--session", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="accuracy curves, ablation bars and sweep lines")
    p.add_argument("runs", nargs="+", help="run or ablation directories")
    p.add_argument("--out", default="plots")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ProtocolError, NumericError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
