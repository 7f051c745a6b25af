"""Command-line pipeline: ``compass <subcommand> [options]``.

Every run writes ``config.ini`` (the merged effective configuration) before
doing any work and ``run.json`` (seed plus a hash manifest of every artifact)
when it finishes. Work happens in a sibling temporary directory that is
renamed into place on success, so an output directory either holds a
complete run or does not exist.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import hashlib
import io
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

OUT_ROOT_ENV = "COMPASS_OUT_ROOT"
SUBCOMMANDS = ("gen-data", "pretrain", "finetune", "eval", "sweep", "report")

DEFAULTS = {
    "synthworld": {
        "envs": "0-9", "per_env": 8, "length": 40, "workers": 1,
        "map_size": 768, "crop_size": 32, "n_obstacles": 120, "track_curvature_scale": 1.0,
        "texture_seed": 0, "pixels_per_unit": 4.0, "speed": 1.0, "noise_scale": 1.0,
    },
    "trainer": {
        "mode": "COMPASS", "steps": 2000, "lr": 1e-3, "weight_decay": 0.01, "normalize": True,
        "temperature": 0.1, "d": 32, "width": 16, "precision": 32, "windows_per_step": 4,
        "span": 8, "horizon": 3, "negatives": 7, "window": 4, "stride": 4, "context": 4, "dataset": "",
    },
    "finetune": {
        "task": "steering", "fraction": 1.0, "freeze_encoder": False, "steps": 600,
        "batch_size": 64, "lr": 1e-3, "hidden": 64, "holdout": 3,
    },
    "eval": {"task": "steering", "split": "all", "segments": "10,20,30,40,50,60,70,80", "oracle": False},
    "sweep": {"task": "velocity", "fractions": "0.1,0.25,0.4,1.0", "seeds": 3},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ----------------------------------------------------------------- config

def _coerce(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    if path:
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise UsageError(f"config file not found: {path}")
        for sec in cp.sections():
            if sec not in cfg:
                raise UsageError(f"unknown config section [{sec}] in {path}")
            for key, val in cp.items(sec):
                if key not in cfg[sec]:
                    raise UsageError(f"unknown key {sec}.{key} in {path}")
                cfg[sec][key] = _coerce(val)
    for item in overrides:
        key, sep, val = item.partition("=")
        sec, dot, name = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        if sec not in cfg or name not in cfg[sec]:
            raise UsageError(f"unknown config key {key!r}")
        cfg[sec][name] = _coerce(val)
    return cfg


def config_text(cfg: dict) -> str:
    cp = configparser.ConfigParser()
    for sec in sorted(cfg):
        cp[sec] = {k: repr(v) if isinstance(v, str) else str(v) for k, v in sorted(cfg[sec].items())}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _int_list(spec) -> list[int]:
    out = []
    for part in str(spec).split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-")
            out += list(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def _float_list(spec) -> list[float]:
    if isinstance(spec, (int, float)):
        return [float(spec)]
    if isinstance(spec, tuple):
        return [float(v) for v in spec]
    return [float(v) for v in str(spec).split(",") if v.strip()]


# ----------------------------------------------------------------- run dirs

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    """Temporary working directory promoted to ``final`` on success."""

    def __init__(self, final: Path, force: bool):
        self.final = final
        if final.exists() and any(final.iterdir()) and not force:
            raise FileExistsError(f"output directory {final} exists and is not empty (use --force)")
        self.work = final.parent / f".{final.name}.tmp-{os.getpid()}"
        if self.work.exists():
            shutil.rmtree(self.work)
        self.work.mkdir(parents=True)

    def commit(self, meta: dict) -> Path:
        files = sorted(p for p in self.work.rglob("*") if p.is_file())
        manifest = {str(p.relative_to(self.work)): {"bytes": p.stat().st_size, "sha256": _sha256(p)} for p in files}
        with open(self.work / "run.json", "w") as fh:
            json.dump({**meta, "artifacts": manifest}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.work, self.final)
        return self.final

    def abort(self) -> None:
        shutil.rmtree(self.work, ignore_errors=True)


def _default_out(sub: str, seed: int) -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs")) / f"{sub}-seed{seed}"


# ----------------------------------------------------------------- subcommands

def _world_base(cfg: dict):
    from .synthworld import WorldConfig
    keys = {f for f in WorldConfig.__dataclass_fields__}
    return WorldConfig(**{k: v for k, v in cfg["synthworld"].items() if k in keys})


def cmd_gen_data(args, cfg, work: Path) -> dict:
    from .synthworld import environment_jobs, generate_dataset, write_dataset
    sw = cfg["synthworld"]
    jobs = environment_jobs(_int_list(sw["envs"]), int(sw["per_env"]), seed=args.seed, base=_world_base(cfg))
    records = generate_dataset(jobs, T=int(sw["length"]), workers=int(sw["workers"]))
    write_dataset(records, work)
    return {"sequences": len(records)}


def _train_config(cfg: dict, seed: int, dataset: str):
    from .trainer import TrainConfig
    tr = dict(cfg["trainer"])
    tr["dataset"] = dataset
    return TrainConfig.from_dict({**tr, "seed": seed})


def cmd_pretrain(args, cfg, work: Path) -> dict:
    from .trainer import loss_history_csv, pretrain, save_checkpoint
    dataset = args.data or cfg["trainer"]["dataset"]
    config = _train_config(cfg, args.seed, str(dataset))
    ckpt = pretrain(config)
    save_checkpoint(ckpt, work / "checkpoint")
    loss_history_csv(ckpt.history, work / "loss_history.csv")
    with open(work / "eval_loss.json", "w") as fh:
        json.dump(ckpt.eval_loss, fh, indent=2, sort_keys=True)
    return {"final_total": ckpt.history[-1]["total"] if ckpt.history else None}


def cmd_finetune(args, cfg, work: Path) -> dict:
    from .evaluation import finetune_split
    from .synthworld import read_dataset
    from .trainer import finetune, load_checkpoint, save_finetuned
    ft = cfg["finetune"]
    ckpt = load_checkpoint(args.checkpoint)
    split = finetune_split(read_dataset(args.data), int(ft["holdout"]))
    _, model = finetune(ckpt, str(ft["task"]), split["train"], fraction=float(ft["fraction"]),
                        freeze_encoder=bool(ft["freeze_encoder"]), seed=args.seed, steps=int(ft["steps"]),
                        batch_size=int(ft["batch_size"]), lr=float(ft["lr"]), hidden=int(ft["hidden"]))
    save_finetuned(model, ckpt.config, work / "model")
    return {"task": ft["task"], "train_sequences": len(split["train"])}


class _OraclePredictor:
    """Returns ground truth for the exact sample order ``task_samples`` produces."""

    def __init__(self, truth):
        self.truth = np.asarray(truth)
        self.offset = 0

    def predict(self, x):
        out = self.truth[self.offset: self.offset + len(x)]
        self.offset += len(x)
        return out


def cmd_eval(args, cfg, work: Path) -> dict:
    from . import evaluation as ev
    from .synthworld import read_dataset
    from .trainer import load_checkpoint, load_finetuned, task_samples
    ec = cfg["eval"]
    task = str(ec["task"])
    records = ev.split_records(read_dataset(args.data), str(ec["split"]))
    oracle = bool(ec["oracle"]) or args.oracle
    if not oracle and not args.model and task != "probe":
        raise UsageError("eval needs --model (or --oracle)")
    out: dict = {"task": task, "split": ec["split"], "oracle": oracle}
    if task in ("steering", "velocity"):
        if oracle:
            model = _OraclePredictor(task_samples(records, task)[1])
        else:
            model = load_finetuned(args.model)
        fn = ev.steering_l1 if task == "steering" else ev.velocity_errors
        rep = fn(model, records, split=str(ec["split"]))
        out["report"] = rep.to_dict()
        (work / "metrics.csv").write_text(rep.to_csv())
    elif task == "odometry":
        segments = _float_list(ec["segments"])
        window = cfg["trainer"]["window"]
        rows, trajs = [], {}
        model = None if oracle else load_finetuned(args.model)
        for k, r in enumerate(records):
            pred = _OraclePredictor(task_samples([r], "odometry", window=window, stride=window)[1]) if oracle else model
            est, truth, (t_rel, r_rel) = ev.odometry_drift(pred, r, segments, window=window)
            rows.append((k, t_rel, r_rel))
            trajs[str(k)] = {"estimated": est.poses.tolist(), "truth": truth.poses.tolist()}
        t = np.array([r[1] for r in rows])
        rr = np.array([r[2] for r in rows])
        out["t_rel"], out["r_rel"] = float(t.mean()), float(rr.mean())
        (work / "metrics.csv").write_text(
            "sequence,t_rel,r_rel\n" + "".join(f"{k},{a!r},{b!r}\n" for k, a, b in rows))
        with open(work / "trajectories.json", "w") as fh:
            json.dump(trajs, fh, sort_keys=True)
    elif task == "probe":
        if not args.checkpoint:
            raise UsageError("eval --task probe needs --checkpoint")
        model = load_checkpoint(args.checkpoint).model
        out["probes"] = {}
        for target, space in ev.PROBE_SPACE.items():
            res = ev.linear_probe(model, space, target, records, seed=args.seed)
            out["probes"][target] = {"space": space, "r2": res.r2, "per_target": list(res.per_target),
                                     "degenerate": res.degenerate}
    else:
        raise UsageError(f"unknown eval task {task!r}")
    with open(work / "report.json", "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
    return {"task": task}


def cmd_sweep(args, cfg, work: Path) -> dict:
    from .evaluation import data_efficiency_sweep, finetune_split
    from .model import init_params
    from .synthworld import read_dataset
    from .trainer import Checkpoint, TrainConfig, load_checkpoint
    sc, ft = cfg["sweep"], cfg["finetune"]
    ckpt = load_checkpoint(args.checkpoint)
    m = ckpt.model
    scratch_model = init_params(m.graph, d=m.d, seed=args.seed, precision=64 if str(m.dtype) == "torch.float64" else 32,
                                crop=m.crop, normalize=m.normalize,
                                width=m.encoders[m.graph.names[0]].conv[0].out_channels)
    scratch = Checkpoint(model=scratch_model, config=TrainConfig.from_dict({**ckpt.config.to_dict(), "mode": "SCRATCH"}))
    split = finetune_split(read_dataset(args.data), int(ft["holdout"]))
    rep = data_efficiency_sweep(ckpt, scratch, str(sc["task"]), split["train"], split["seen"] + split["unseen"],
                                fractions=_float_list(sc["fractions"]), seeds=range(int(sc["seeds"])),
                                steps=int(ft["steps"]), batch_size=int(ft["batch_size"]), lr=float(ft["lr"]),
                                hidden=int(ft["hidden"]))
    with open(work / "sweep.json", "w") as fh:
        json.dump(rep.to_dict(), fh, indent=2, sort_keys=True)
    (work / "sweep.csv").write_text(rep.to_csv())
    return {"comparison": rep.comparison()}


def cmd_report(args, cfg, work: Path) -> dict:
    from .report import render_report
    made = render_report(Path(args.run), work)
    return {"tables": sorted(made)}


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "eval": cmd_eval, "sweep": cmd_sweep, "report": cmd_report,
}


# ----------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="compass", description="Multimodal contrastive pretraining pipeline on a synthetic world.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="INI file with sections named after modules")
        s.add_argument("--out", help=f"output directory (default ${OUT_ROOT_ENV}/<command>-seed<seed>)")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        s.add_argument("--force", action="store_true", help="replace a non-empty output directory")
        if name in ("pretrain", "finetune", "eval", "sweep"):
            s.add_argument("--data", help="dataset directory")
        if name in ("finetune", "sweep", "eval"):
            s.add_argument("--checkpoint", help="pretraining checkpoint directory")
        if name == "finetune":
            s.add_argument("--task", choices=("steering", "velocity", "odometry"))
            s.add_argument("--fraction", type=float)
            s.add_argument("--freeze-encoder", action="store_true", default=None)
        if name == "eval":
            s.add_argument("--model", help="finetuned model directory")
            s.add_argument("--task", choices=("steering", "velocity", "odometry", "probe"))
            s.add_argument("--split", choices=("seen", "unseen", "all"))
            s.add_argument("--oracle", action="store_true", help="score ground truth as the prediction")
        if name == "sweep":
            s.add_argument("--task", choices=("steering", "velocity", "odometry"))
        if name == "pretrain":
            s.add_argument("--mode", choices=("COMPASS", "CPC", "CMC", "JOINT", "DISJOINT", "RGB_ONLY", "SCRATCH"))
            s.add_argument("--steps", type=int)
        if name == "report":
            s.add_argument("--run", required=True, help="run directory to render")
    return p


def _apply_flags(args, cfg: dict) -> None:
    section = {"finetune": "finetune", "eval": "eval", "sweep": "sweep", "pretrain": "trainer"}.get(args.command)
    for flag, key in (("task", "task"), ("fraction", "fraction"), ("freeze_encoder", "freeze_encoder"),
                      ("split", "split"), ("mode", "mode"), ("steps", "steps")):
        val = getattr(args, flag, None)
        if val is not None and section:
            cfg[section][key] = val


def _check_required(args, cfg: dict) -> None:
    cmd = args.command
    if cmd == "pretrain" and not (args.data or cfg["trainer"]["dataset"]):
        raise UsageError("pretrain needs a dataset (--data or trainer.dataset)")
    if cmd in ("finetune", "eval", "sweep") and not args.data:
        raise UsageError(f"{cmd} needs --data")
    if cmd in ("finetune", "sweep") and not args.checkpoint:
        raise UsageError(f"{cmd} needs --checkpoint")


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(f"missing subcommand; choose from {', '.join(SUBCOMMANDS)}")
        cfg = load_config(args.config, args.overrides)
        _apply_flags(args, cfg)
        _check_required(args, cfg)
    except UsageError as exc:
        print(f"compass: usage-error: {exc}", file=sys.stderr)
        return 2

    run = None
    try:
        import torch
        torch.set_num_threads(1)
        out = Path(args.out) if args.out else _default_out(args.command, args.seed)
        run = RunDir(out, args.force)
        (run.work / "config.ini").write_text(config_text(cfg))
        result = COMMANDS[args.command](args, cfg, run.work)
        run.commit({"command": args.command, "seed": args.seed, "result": result})
    except UsageError as exc:
        if run:
            run.abort()
        print(f"compass: usage-error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # module errors surface as one line, exit 1
        if run:
            run.abort()
        msg = " ".join(str(exc).split())
        print(f"compass: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
