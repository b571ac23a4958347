"""Smallest complete pipeline: data, EM training, posterior inference, scoring.

Uses 16x16 scenes and narrow networks so it finishes in a couple of minutes
on a laptop CPU. The numbers it prints are a smoke signal, not a benchmark.

    python demos/tiny_end_to_end.py --out runs/tiny
"""
import argparse
import json
from pathlib import Path

from drc.config import RunConfig
from drc.metrics import evaluate_run
from drc.synth_data import ingest_folder, write_dataset
from drc.trainer import train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/tiny")
    ap.add_argument("--iterations", type=int, default=100)
    args = ap.parse_args()
    out = Path(args.out)

    cfg = RunConfig(seed=0).replace(
        model=dict(image_size=16, z_fg=32, z_bg=4, z_pix=64, gen_base_channels=32, gen_channels=[32, 16],
                   cls_channels=[16, 32]),
        data=dict(resolution=16, scale_range=[0.25, 0.4], sprite_count_range=[1, 2]),
        langevin=dict(prior_steps=20, posterior_steps=20, test_steps=100),
        train=dict(iterations=args.iterations, batch_size=16, checkpoint_every=50),
    )
    write_dataset(256, out / "train", cfg.data, seed=1)
    write_dataset(32, out / "test", cfg.data, seed=2)
    train_ds, test_ds = ingest_folder(out / "train", 16), ingest_folder(out / "test", 16)

    def show(rec):
        if rec["iter"] % 20 == 0:
            print(f"iter {rec['iter']:4d}  loss {rec['loss_total']:.3f}  recon {rec['loss_recon']:.3f}  "
                  f"E+ {rec['energy_pos_mean']:.2f}  E- {rec['energy_neg_mean']:.2f}  pi_f {rec['pi_f_mean']:.2f}")

    state, _ = train(cfg, train_ds, out / "run", on_record=show)
    state.model.eval()
    explicit = evaluate_run(state.model, test_ds, cfg.langevin, seed=0)
    permuted = evaluate_run(state.model, test_ds, cfg.langevin, seed=0, permute=True)
    explicit.write(out / "run", "report")
    summary = {"explicit_iou": explicit.mean_iou, "explicit_dice": explicit.mean_dice,
               "permuted_iou": permuted.mean_iou}
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
