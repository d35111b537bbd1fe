"""Command-line driver: pretrain, finetune, eval, inspect-checkpoint."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis as an
from . import experiment as ex
from .checkpoint import CheckpointError, describe, load_checkpoint, save_checkpoint
from .config import ConfigKeyError, ExperimentConfig, apply_override, load_config
from .data import DataError, LengthError
from .model import ConfigError
from .tensor import ContractError, ShapeError

log = logging.getLogger("abftlab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONTRACT = 0, 2, 3, 4
ANALYSES = ("acc", "heads", "profile", "grid", "consistency", "unseen", "shift")


class UsageError(Exception):
    pass


# --- manifest --------------------------------------------------------------------


class Manifest:
    """``manifest.json`` in the output directory: one entry per emitted file."""

    def __init__(self, out: Path, config_hash: str, command: str):
        self.out = out
        self.path = out / "manifest.json"
        self.config_hash = config_hash
        self.command = command
        self.entries = {}
        if self.path.exists():
            for e in json.loads(self.path.read_text())["files"]:
                self.entries[e["path"]] = e

    def add(self, path: Path) -> Path:
        rel = str(Path(path).relative_to(self.out))
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        self.entries[rel] = {"path": rel, "sha256": digest, "config_hash": self.config_hash, "command": self.command}
        return path

    def write(self) -> None:
        files = [self.entries[k] for k in sorted(self.entries)]
        self.path.write_text(json.dumps({"files": files}, indent=2) + "\n")


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if dataclasses.is_dataclass(x):
        return dataclasses.asdict(x)
    raise TypeError(f"not serializable: {type(x)}")


# --- argument handling -----------------------------------------------------------


def _leaf_fields(cls, prefix=""):
    for f in dataclasses.fields(cls):
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            yield from _leaf_fields(type(default), prefix + f.name + ".")
        elif prefix:
            yield prefix + f.name


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; unknown keys are rejected")
    p.add_argument("--seed", type=int, help="master seed (split into init/data/shuffle subseeds)")
    p.add_argument("--out", help="output directory (created when missing)")
    p.add_argument("-v", "--verbose", action="store_true")
    grp = p.add_argument_group("config fields", "override any config field, e.g. --trainer.lr 1e-3")
    for name in _leaf_fields(ExperimentConfig):
        grp.add_argument(f"--{name}", dest=f"cfg:{name}", metavar="V", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abftlab", description="Attention-behavior fine-tuning laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the base language model on the synthetic corpus")
    _add_common(p)

    p = sub.add_parser("finetune", help="fine-tune a base checkpoint with ABFT or end-to-end cross-entropy")
    _add_common(p)
    p.add_argument("--method", choices=("abft", "e2e"), required=True)
    p.add_argument("--base", required=True, help="base checkpoint")
    p.add_argument("--no-gate", action="store_true", help="skip the induction-signature gate (smoke runs only)")

    p = sub.add_parser("eval", help="run analyses on one or more checkpoints")
    _add_common(p)
    p.add_argument("--analysis", action="append", required=True,
                   help=f"comma-separated subset of {','.join(ANALYSES)}; repeatable")
    p.add_argument("--checkpoint", action="append", required=True, dest="checkpoints",
                   help="checkpoint path; repeatable. grid takes base, E2E, ABFT in that order; "
                        "shift compares the first against each of the others")

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint header and tensor listing")
    p.add_argument("path")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for key, value in sorted(vars(args).items()):
        if key.startswith("cfg:") and value is not None:
            cfg = apply_override(cfg, f"{key[4:]}={value}")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "method", None):
        cfg.trainer.method = args.method
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    if not out.exists():
        out.mkdir(parents=True)
        log.info("created output directory %s", out)
    return out


def _label(path: str) -> str:
    p = Path(path)
    return p.parent.name if p.stem == "model" and p.parent.name else p.stem


# --- commands --------------------------------------------------------------------


def cmd_pretrain(cfg: ExperimentConfig) -> int:
    from .plotting import plot_pretrain

    out = _out_dir(cfg)
    man = Manifest(out, cfg.hash(), "pretrain")

    def progress(step, steps, loss, held):
        log.info("step %d/%d train %.4f held-out %.4f", step, steps, loss, held)

    model, report, gate, stats = ex.run_pretrain(cfg, progress)
    man.add(_write_json(out / "config.json", cfg.to_dict()))
    save_checkpoint(out / "model.ckpt", model, {"config_hash": cfg.hash(), "stage": "pretrain"})
    man.add(out / "model.ckpt")
    an.write_csv(out / "pretrain_loss.csv", ("step", "train_loss"), enumerate(report.train_loss, start=1))
    man.add(out / "pretrain_loss.csv")
    an.write_csv(out / "heldout_loss.csv", ("step", "heldout_loss"), report.heldout_loss)
    man.add(out / "heldout_loss.csv")
    summary = {"steps": report.steps, "stopped_early": report.stopped_early, "corpus": stats,
               "gate": ex.gate_dict(gate), "gate_diagnostic": gate.diagnostic(), "usable": gate.passed}
    man.add(_write_json(out / "pretrain_report.json", summary))
    plot_pretrain(report, out / "pretrain_loss.png")
    man.add(out / "pretrain_loss.png")
    man.write()
    print(json.dumps(summary["gate"], indent=2))
    if not gate.passed:
        log.warning("pretrained model is flagged unusable: %s", gate.diagnostic())
    return EXIT_OK


def cmd_finetune(cfg: ExperimentConfig, base_path: str, no_gate: bool = False) -> int:
    from .plotting import plot_runlogs

    base, _ = load_checkpoint(base_path)
    if no_gate:
        log.warning("gate skipped for %s", base_path)
        gate_info = None
    else:
        gate = ex.gate(base, cfg)
        if not gate.passed:
            raise ex.GateError(f"base checkpoint {base_path} failed the gate: {gate.diagnostic()}")
        gate_info = ex.gate_dict(gate)
    out = _out_dir(cfg)
    man = Manifest(out, cfg.hash(), f"finetune --method {cfg.trainer.method}")
    res = ex.run_finetune(cfg, base)
    man.add(_write_json(out / "config.json", cfg.to_dict()))
    save_checkpoint(out / "model.ckpt", res.model, {"config_hash": cfg.hash(), "stage": cfg.trainer.method})
    man.add(out / "model.ckpt")
    res.log.write_csv(out / "runlog.csv")
    man.add(out / "runlog.csv")
    summary = res.summary() | {"gate": gate_info}
    man.add(_write_json(out / "finetune_report.json", summary))
    wall = res.log.column("wall_ms")
    man.add(_write_json(out / "timing.json", {"wall_ms": wall.tolist(), "mean_wall_ms": float(wall.mean())}))
    plot_runlogs({cfg.trainer.method: res.log}, out / "runlog.png")
    man.add(out / "runlog.png")
    man.write()
    print(json.dumps(summary, indent=2, default=_jsonable))
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, analyses: list[str], paths: list[str]) -> int:
    from . import plotting

    unknown = [a for a in analyses if a not in ANALYSES]
    if unknown:
        raise UsageError(f"unknown analysis {unknown[0]!r}; choose from {', '.join(ANALYSES)}")
    models = [(_label(p), load_checkpoint(p)[0]) for p in paths]
    arch = [{k: v for k, v in m.config.to_dict().items() if k != "seed"} for _, m in models]
    if any(a != arch[0] for a in arch) and ({"grid", "shift"} & set(analyses)):
        raise ContractError("grid and shift need checkpoints with one architecture")

    out = _out_dir(cfg)
    man = Manifest(out, cfg.hash(), "eval " + ",".join(analyses))
    task = ex.make_task(cfg)
    plan = ex.make_plan(cfg, task)
    test = ex.make_test_set(cfg, task, plan)
    labels = task.label_tokens
    tcfg = cfg.trainer.abft_config()

    def emit(path, header, rows):
        an.write_csv(out / path, header, rows)
        man.add(out / path)

    if "acc" in analyses:
        rows = []
        other = {}
        for v in cfg.task.ood_variants:
            t = ex.make_task(cfg, v)
            p = ex.make_plan(cfg, t)
            other[t.task_id] = (ex.make_test_set(cfg, t, p), t.label_tokens)
        for name, m in models:
            rows.append((name, task.task_id, "in", an.eval_accuracy(m, test, labels)))
            for tid, (samples, lt) in other.items():
                rows.append((name, tid, "ood", an.eval_accuracy(m, samples, lt)))
        emit("accuracy.csv", ("checkpoint", "task", "domain", "accuracy"), rows)
        plotting.plot_accuracy([(r[0], r[1], r[3]) for r in rows], out / "accuracy.png")
        man.add(out / "accuracy.png")

    if "heads" in analyses:
        rows = []
        for name, m in models:
            counts = an.induction_counts(m, test, tcfg.log_base)
            rows.append((name, float(counts.mean()), float(counts.std()), int(counts.max())))
        emit("heads.csv", ("checkpoint", "mean_count", "std_count", "max_count"), rows)

    if "profile" in analyses:
        profiles = {name: an.layer_profile(m, test) for name, m in models}
        emit("profile.csv", ("checkpoint", "layer", "S", "S_plus", "ratio"),
             [(name, layer, s, sp, r) for name, prof in profiles.items()
              for (layer, s, sp), r in zip(prof.rows(), prof.ratio)])
        plotting.plot_profiles(profiles, out / "profile.png")
        man.add(out / "profile.png")
        for name, m in models:
            path = out / f"attention_{name}.pgm"
            an.write_pgm(path, an.attention_heatmap(m, test[0]))
            man.add(path)

    if "grid" in analyses:
        if len(models) != 3:
            raise ContractError(f"grid needs exactly three checkpoints (base, E2E, ABFT), got {len(models)}")
        (_, m0), (_, mE), (_, mA) = models
        sub = ex.make_test_set(cfg, task, plan, n_queries=cfg.analysis.grid_queries)
        grid = an.connectivity_grid(m0, mE, mA, sub, labels, cfg.analysis.grid_values())
        grid.write_csv(out / "grid.csv")
        man.add(out / "grid.csv")
        floor = min(grid.at(1, 0), grid.at(0, 1)) - 0.05
        emit("grid_segment.csv", ("alpha_E", "alpha_A", "accuracy", "floor", "within_basin"),
             [(aE, aA, acc, floor, int(acc >= floor)) for aE, aA, acc in grid.segment()])
        plotting.plot_grid(grid, out / "grid.png")
        man.add(out / "grid.png")

    if "consistency" in analyses:
        rows = []
        layout = ex.layout_for(cfg)
        for name, m in models:
            rng = np.random.default_rng([cfg.seed, 31337])
            preds = an.consistency_predictions(m, task, plan, rng, cfg.trainer.k, cfg.analysis.consistency_queries,
                                               layout.markers, cfg.analysis.consistency_resamples)
            rows.append((name, an.consistency_metric(preds), preds.shape[1], 1.0 / task.n_classes))
        emit("consistency.csv", ("checkpoint", "consistency", "m", "chance_floor"), rows)

    if "unseen" in analyses:
        rows = []
        for name, m in models:
            rng = np.random.default_rng([cfg.seed, 4711])
            rep = an.unseen_label_eval(m, task, plan, rng, cfg.trainer.k, cfg.analysis.unseen_queries)
            rows.append((name, rep.unseen_accuracy, rep.random_accuracy, rep.zero_shot_accuracy,
                         rep.n_queries, int(rep.all_I_plus_empty)))
        emit("unseen.csv", ("checkpoint", "unseen_label_acc", "random_demo_acc", "zero_shot_acc",
                            "n_queries", "all_I_plus_empty"), rows)

    if "shift" in analyses:
        if len(models) < 2:
            raise ContractError("shift needs at least two checkpoints")
        base_name, base = models[0]
        rows = []
        for name, m in models[1:]:
            sm = an.shift_map(base, m)
            rows.extend((base_name, name, *e) for e in sm.entries)
            plotting.plot_shift(sm, out / f"shift_{name}.png")
            man.add(out / f"shift_{name}.png")
        emit("shift.csv", ("before", "after", "tensor", "layer", "kind", "frobenius"), rows)

    man.write()
    print(f"wrote {len(man.entries)} files to {out}")
    return EXIT_OK


def cmd_inspect(path: str) -> int:
    info = describe(path)
    print(json.dumps({k: v for k, v in info.items() if k != "tensors"}, indent=2))
    for name, shape in info["tensors"]:
        print(f"{name:24s} {shape}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "inspect-checkpoint":
            return cmd_inspect(args.path)
        cfg = resolve_config(args)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "finetune":
            return cmd_finetune(cfg, args.base, args.no_gate)
        analyses = [a.strip() for item in args.analysis for a in item.split(",") if a.strip()]
        return cmd_eval(cfg, analyses, args.checkpoints)
    except (ConfigKeyError, ConfigError, UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, LengthError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ContractError, ShapeError) as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
