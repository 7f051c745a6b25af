"""Tables and static plots rebuilt from a finished run directory."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_PNG_META = {"Software": None}


def _read_history(path: Path) -> dict[str, list[float]]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: [float(r[k]) for r in rows] for k in rows[0]}


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)] + [",".join(v if isinstance(v, str) else repr(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _loss_tables(run: Path, out: Path, made: dict) -> None:
    hist = _read_history(run / "loss_history.csv")
    if not hist:
        return
    comps = [k for k in hist if k != "step"]
    rows = [[c, hist[c][0], hist[c][-1], min(hist[c])] for c in comps]
    _write_rows(out / "loss_summary.csv", ["component", "first", "last", "min"], rows)
    made["loss_summary.csv"] = "table"
    fig, ax = plt.subplots(figsize=(6, 4))
    for c in comps:
        ax.plot(hist["step"], hist[c], label=c, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", metadata=_PNG_META)
    plt.close(fig)
    made["loss_curves.png"] = "plot"


def _sweep_tables(run: Path, out: Path, made: dict) -> None:
    rep = json.loads((run / "sweep.json").read_text())
    curve = rep["curve"]
    cols = list(curve[0])
    _write_rows(out / "sweep_curve.csv", cols, [[r[c] for c in cols] for r in curve])
    made["sweep_curve.csv"] = "table"
    fig, ax = plt.subplots(figsize=(6, 4))
    fr = [r["fraction"] for r in curve]
    for name in ("pretrained", "scratch"):
        ax.errorbar(fr, [r[f"{name}_mean"] for r in curve], yerr=[r[f"{name}_std"] for r in curve],
                    marker="o", capsize=3, label=name)
    ax.set_xlabel("finetuning data fraction")
    ax.set_ylabel(f"{rep['task']} error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "sweep.png", metadata=_PNG_META)
    plt.close(fig)
    made["sweep.png"] = "plot"


def _eval_tables(run: Path, out: Path, made: dict) -> None:
    rep = json.loads((run / "report.json").read_text())
    if "report" in rep:
        r = rep["report"]
        rows = [[c, m, s, r["n"]] for c, m, s in zip(r["columns"], r["mean"], r["std"])]
        _write_rows(out / "metrics_summary.csv", ["metric", "mean", "std", "n"], rows)
    elif "t_rel" in rep:
        _write_rows(out / "metrics_summary.csv", ["metric", "value"], [["t_rel", rep["t_rel"]], ["r_rel", rep["r_rel"]]])
    elif "probes" in rep:
        rows = [[t, p["space"], p["r2"], str(p["degenerate"])] for t, p in sorted(rep["probes"].items())]
        _write_rows(out / "metrics_summary.csv", ["target", "space", "r2", "degenerate"], rows)
    made["metrics_summary.csv"] = "table"
    traj_file = run / "trajectories.json"
    if traj_file.exists():
        trajs = json.loads(traj_file.read_text())
        fig, ax = plt.subplots(figsize=(5, 5))
        for k in sorted(trajs, key=int)[:4]:
            est, gt = trajs[k]["estimated"], trajs[k]["truth"]
            line, = ax.plot([p[0] for p in gt], [p[1] for p in gt], lw=1.5, label=f"truth {k}")
            ax.plot([p[0] for p in est], [p[1] for p in est], "--", color=line.get_color(), lw=1, label=f"estimate {k}")
        ax.set_aspect("equal")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "trajectories.png", metadata=_PNG_META)
        plt.close(fig)
        made["trajectories.png"] = "plot"


def render_report(run: Path, out: Path) -> dict:
    """Rebuild every table and plot a run directory supports; returns ``{name: kind}``."""
    run = Path(run)
    meta_file = run / "run.json"
    if not meta_file.exists():
        raise FileNotFoundError(f"{run} is not a run directory (no run.json)")
    meta = json.loads(meta_file.read_text())
    out.mkdir(parents=True, exist_ok=True)
    made: dict = {}
    cmd = meta.get("command")
    if cmd == "pretrain":
        _loss_tables(run, out, made)
    elif cmd == "sweep":
        _sweep_tables(run, out, made)
    elif cmd == "eval":
        _eval_tables(run, out, made)
    rows = [[k, json.dumps(v, sort_keys=True)] for k, v in sorted(meta.get("result", {}).items())]
    _write_rows(out / "run_summary.csv", ["key", "value"], [[k, '"' + v.replace('"', '""') + '"'] for k, v in rows])
    made["run_summary.csv"] = "table"
    return made
