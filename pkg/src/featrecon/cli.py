"""Command-line entry points.

Subcommands cover the full pipeline: train-teacher, extract-features,
train-flow, distill, train-gan, eval, plot-latents. Run
``featrecon <subcommand> --help`` for flags.
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from . import data, distiller, evalkit, flow as flow_mod, oracle, trainer
from .config import RunConfig


def _add_dataset_args(p, default_split: str | None = None):
    p.add_argument("--dataset", default="digits", help="dataset id (mnist or digits)")
    p.add_argument("--root", default=None, help="dataset root directory (mnist)")
    p.add_argument("--size", type=int, default=None, help="cap the number of samples")
    if default_split:
        p.add_argument("--split", choices=["train", "test"], default=default_split)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featrecon")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train the feature extractor under attack")
    _add_dataset_args(p)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("extract-features", help="embed a dataset split into a DBGF cache")
    _add_dataset_args(p, default_split="train")
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-flow", help="train the invertible latent metric")
    _add_dataset_args(p)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--spacing", type=float, default=8.0)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("distill", help="distill the blackbox teacher into a student")
    _add_dataset_args(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-gan", help="train the feature-conditional generator")
    p.add_argument("--config", required=True, help="run configuration JSON")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--whitebox", action="store_true")
    mode.add_argument("--blackbox", action="store_true")
    p.add_argument("--resume", default=None)

    p = sub.add_parser("eval", help="evaluate a trained generator")
    _add_dataset_args(p, default_split="test")
    p.add_argument("--generator", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--protocol", choices=["classify", "pairs"], default="classify")
    p.add_argument("--threshold", type=float, default=None, help="pair-protocol threshold (default: EER on real pairs)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report CSV path")

    p = sub.add_parser("plot-latents", help="2-D scatter of a feature cache")
    p.add_argument("--features", required=True, help="DBGF cache path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", choices=["random", "tsne"], default="random")
    p.add_argument("--out", required=True)

    return parser


def _load_split(args, split: str):
    return data.load_dataset(args.dataset, split=split, root=args.root, size=args.size)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "train-teacher":
        train = _load_split(args, "train")
        test = _load_split(args, "test")
        model = oracle.train_teacher(train, test, epochs=args.epochs, seed=args.seed, verbose=True)
        model.save(args.out)
        print(f"teacher saved to {args.out} (test accuracy {model.metadata['test_accuracy']:.4f})")
        return 0

    if args.command == "extract-features":
        teacher = oracle.load_teacher(args.teacher)
        ds = _load_split(args, args.split)
        oracle.cache_features(teacher, ds, args.out)
        print(f"cached {len(ds)} features to {args.out}")
        return 0

    if args.command == "train-flow":
        ds = _load_split(args, "train")
        priors = flow_mod.init_class_priors(args.classes, ds.channels * ds.resolution**2, args.spacing)
        cfg = flow_mod.FlowTrainConfig(epochs=args.epochs, seed=args.seed)
        model = flow_mod.train_flow(ds, priors, cfg, verbose=True)
        model.save(args.out, extra={"classes": args.classes, "spacing": args.spacing, "seed": args.seed})
        print(f"flow saved to {args.out}")
        return 0

    if args.command == "distill":
        teacher = oracle.load_teacher(args.teacher)
        ds = _load_split(args, "train")
        student = distiller.build_student(
            distiller.StudentConfig(feature_dim=teacher.feature_dim, channels=ds.channels, resolution=ds.resolution),
            teacher.feature_dim,
        )
        cfg = distiller.DistillConfig(epochs=args.epochs, seed=args.seed)
        student = distiller.distill_student(student, teacher.blackbox(), ds, cfg, verbose=True)
        student.save(args.out)
        print(f"student saved to {args.out} (held-out distance {student.metadata['val_distance']:.4f})")
        return 0

    if args.command == "train-gan":
        cfg = RunConfig.from_file(args.config)
        if args.whitebox:
            cfg.mode = "whitebox"
        if args.blackbox:
            cfg.mode = "blackbox"
        trainer.train_gan(cfg, resume=args.resume, verbose=True)
        print(f"run complete; artifacts in {cfg.trainer.out_dir}")
        return 0

    if args.command == "eval":
        teacher = oracle.load_teacher(args.teacher)
        G, stage = trainer.load_generator(args.generator)
        test = _load_split(args, args.split)
        feats = oracle.embed_dataset(teacher, test.images)
        recons = evalkit.reconstruct_dataset(G, feats, v_policy="per_sample", seed=args.seed, stage=stage)
        recons = evalkit.upsample_to(recons, teacher.resolution)
        if args.protocol == "classify":
            accuracy = evalkit.identity_preservation_accuracy(recons, test.labels, teacher)
            threshold = ""
        else:
            threshold = args.threshold
            if threshold is None:
                threshold = oracle.find_eer_threshold(feats, test.labels, seed=args.seed)
            accuracy = evalkit.identity_preservation_accuracy(
                recons, (test.images, test.labels), teacher,
                threshold=threshold, protocol="pairs", seed=args.seed,
            )
        quality = evalkit.ms_ssim_diversity(recons, n_pairs=100, seed=args.seed)
        score = evalkit.classifier_score(recons, teacher)
        recon_feats = np.concatenate(
            [teacher.embed(recons[i : i + 256]).numpy() for i in range(0, len(recons), 256)]
        )
        sil = evalkit.silhouette(recon_feats, test.labels)
        with open(args.out, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["protocol", "identity_accuracy", "ms_ssim", "classifier_score", "silhouette", "threshold"]
            )
            writer.writerow([args.protocol, f"{accuracy:.6f}", f"{quality:.6f}", f"{score:.6f}", f"{sil:.6f}", threshold])
        print(f"identity accuracy {accuracy:.4f}; report written to {args.out}")
        return 0

    if args.command == "plot-latents":
        labels, feats = oracle.read_feature_cache(args.features)
        evalkit.plot_latent_scatter(feats, labels, args.out, seed=args.seed, method=args.method)
        print(f"scatter written to {args.out}")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
