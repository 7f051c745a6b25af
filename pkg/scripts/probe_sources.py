"""Linear-probe R² of every modality path into each latent space, pretrained vs random init.

    python scripts/probe_sources.py --checkpoint runs/pipeline/pretrain/checkpoint
"""

import argparse

import torch

from compass import evaluation as ev
from compass.model import init_params
from compass.synthworld import environment_jobs, generate_dataset
from compass.trainer import load_checkpoint


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)
    ck = load_checkpoint(args.checkpoint)
    m = ck.model
    rnd = init_params(m.graph, d=m.d, seed=args.seed, crop=m.crop, normalize=m.normalize, width=ck.config.width)
    data = generate_dataset(environment_jobs(range(10), 8, seed=1), T=40)
    print(f"{'space':5s} {'source':6s} {'pretrained':>10s} {'random':>8s}")
    for target, space in ev.PROBE_SPACE.items():
        sources = m.graph.names if space == "O_m" else m.graph.spatial
        for src in sources:
            a = ev.linear_probe(m, space, target, data, seed=args.seed, source=src)
            b = ev.linear_probe(rnd, space, target, data, seed=args.seed, source=src)
            print(f"{space:5s} {src:6s} {a.r2:10.3f} {b.r2:8.3f}")


if __name__ == "__main__":
    main()
