"""Pretrain every mode on the same data and compare steering and velocity after finetuning.

    python scripts/baselines.py --steps 2000 --seeds 3 --out runs/baselines.csv
"""

import argparse
import csv
import logging
import time

import numpy as np
import torch

from compass import evaluation as ev
from compass.synthworld import environment_jobs, generate_dataset
from compass.trainer import MODES, TrainConfig, finetune, pretrain


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--modes", default=",".join(MODES))
    ap.add_argument("--out", default="baselines.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)

    pre = generate_dataset(environment_jobs(range(100, 116), 13, seed=0)[:200], T=40)
    split = ev.finetune_split(generate_dataset(environment_jobs(range(10), 8, seed=1), T=40))
    rows = []
    for mode in args.modes.split(","):
        for seed in range(args.seeds):
            t0 = time.perf_counter()
            ck = pretrain(TrainConfig(mode=mode, steps=args.steps, seed=seed), pre)
            _, steer = finetune(ck, "steering", split["train"], seed=seed)
            _, vel = finetune(ck, "velocity", split["train"], seed=seed)
            row = {
                "mode": mode, "seed": seed,
                "steer_seen": ev.steering_l1(steer, split["seen"]).mean[0],
                "steer_unseen": ev.steering_l1(steer, split["unseen"]).mean[0],
                "velocity": float(ev.velocity_errors(vel, split["seen"] + split["unseen"]).mean.mean()),
                "seconds": time.perf_counter() - t0,
            }
            logging.info("%s", row)
            rows.append(row)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for mode in dict.fromkeys(r["mode"] for r in rows):
        vals = np.array([[r["steer_unseen"], r["velocity"]] for r in rows if r["mode"] == mode])
        print(f"{mode:10s} unseen steering {np.median(vals[:, 0]):.4f}  velocity {np.median(vals[:, 1]):.4f}")


if __name__ == "__main__":
    main()
