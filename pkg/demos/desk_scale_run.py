"""Desk-scale learning run on Textured Multi-dSprites: full model vs. no re-assignment.

Generates a train/test split, trains both variants with matched seeds, scores
the explicit (non-permuted) foreground mask on the test split and writes
``results.json`` in the output folder.

    python demos/desk_scale_run.py --out runs/pilot --preset pilot32 --iterations 1000 --seeds 0

The acceptance protocol (64px, half-width nets, 5000 iterations, three
seeds) is ``--preset acceptance``. On a single CPU core it runs for weeks.
"""
import argparse
import json
import time
from pathlib import Path

from drc.config import RunConfig
from drc.metrics import evaluate_run
from drc.synth_data import ingest_folder, write_dataset
from drc.trainer import train

PRESETS = {
    # half the channel widths of the 64px generator / classifier stacks
    "acceptance": dict(size=64, gen=[512, 256, 128, 64], base=64, cls=[32, 64, 128, 256]),
    "pilot32": dict(size=32, gen=[64, 32, 16], base=32, cls=[16, 32, 64]),
    "pilot64": dict(size=64, gen=[64, 32, 16, 8], base=32, cls=[8, 16, 32, 64]),
}


def make_config(preset, seed, iterations, ablate, batch_size=16, posterior_steps=40):
    p = PRESETS[preset]
    return RunConfig(seed=seed).replace(
        model=dict(image_size=p["size"], gen_channels=p["gen"], gen_base_channels=p["base"],
                   cls_channels=p["cls"]),
        data=dict(resolution=p["size"], sprite_count_range=[2, 2]),
        langevin=dict(posterior_steps=posterior_steps),
        train=dict(iterations=iterations, batch_size=batch_size, disable_reassignment=ablate,
                   checkpoint_every=max(1, iterations // 4)),
    )


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--preset", default="pilot32", choices=sorted(PRESETS))
    ap.add_argument("--iterations", type=int, default=5000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--n-train", type=int, default=2000)
    ap.add_argument("--n-test", type=int, default=200)
    ap.add_argument("--test-steps", type=int, default=500)
    ap.add_argument("--posterior-steps", type=int, default=40)
    args = ap.parse_args()

    out = Path(args.out)
    base = make_config(args.preset, 0, args.iterations, False)
    train_dir, test_dir = out / "data" / "train", out / "data" / "test"
    if not (train_dir / "manifest.json").exists():
        write_dataset(args.n_train, train_dir, base.data, seed=1000)
    if not (test_dir / "manifest.json").exists():
        write_dataset(args.n_test, test_dir, base.data, seed=2000)
    size = base.model.image_size
    train_ds, test_ds = ingest_folder(train_dir, size), ingest_folder(test_dir, size)

    results_path = out / "results.json"
    results = json.loads(results_path.read_text()) if results_path.exists() else {}
    for seed in args.seeds:
        for variant, ablate in (("full", False), ("no_reassign", True)):
            key = f"{variant}/seed{seed}"
            if key in results:
                continue
            cfg = make_config(args.preset, seed, args.iterations, ablate,
                              posterior_steps=args.posterior_steps)
            run_dir = out / variant / f"seed{seed}"
            t0 = time.time()
            last = [time.time()]

            def progress(rec):
                if rec["iter"] % 50 == 0:
                    now = time.time()
                    print(f"[{key}] iter {rec['iter']} loss {rec['loss_total']:.3f} "
                          f"recon {rec['loss_recon']:.3f} pi_f {rec['pi_f_mean']:.3f} "
                          f"({now - last[0]:.0f}s)", flush=True)
                    last[0] = now

            state, _ = train(cfg, train_ds, run_dir, on_record=progress)
            state.model.eval()
            report = evaluate_run(state.model, test_ds, cfg.langevin.__class__(
                **{**vars(cfg.langevin), "test_steps": args.test_steps}), seed=seed)
            report.write(run_dir)
            results[key] = {"mean_iou": report.mean_iou, "mean_dice": report.mean_dice,
                            "train_seconds": time.time() - t0}
            print(key, results[key], flush=True)
            results_path.write_text(json.dumps(results, indent=2) + "\n")
    print(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
