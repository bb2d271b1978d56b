"""Command-line interface: synth, train, score, eval, gradcheck.

Every subcommand echoes its resolved configuration as one JSON line on
stderr before doing any work, keeps stdout machine-readable (CSV or JSON),
and is deterministic given its flags. Exit codes: 0 success, 1 runtime
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import evaluation, gradcheck, synth, training
from .data import crop_reduce, load_manifest, read_feature_file
from .losses import LossWeights
from .model import model_forward


def _crop_mode(text):
    if text == "mean":
        return "mean"
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"crop mode must be 'mean' or a crop index, got {text!r}"
        ) from None


def _echo_config(command, pairs):
    payload = {"command": command}
    payload.update({k: (str(v) if v is not None and k.endswith("path") else v)
                    for k, v in pairs.items()})
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def _add_crop_flag(p):
    p.add_argument("--crop-mode", type=_crop_mode, default="mean",
                   help="crop reduction: 'mean' or a crop index (default mean)")


def cmd_synth(args) -> int:
    cfg = synth.SynthConfig(
        n_normal=args.n_normal,
        n_abnormal=args.n_abnormal,
        T=args.t,
        D=args.d,
        crops=args.crops,
        normal_mag_mean=args.normal_mag,
        abnormal_mag_mean=args.abnormal_mag,
        anomaly_snippets_per_video=args.anomaly_snippets,
        noise_std=args.noise_std,
        seed=args.seed,
        split=args.split,
        frames_per_snippet=args.frames_per_snippet,
    )
    _echo_config("synth", {"out_path": args.out, **cfg.__dict__})
    manifest_path = synth.synth_generate(cfg, args.out)
    print(manifest_path)
    return 0


def _train_config(args) -> training.TrainConfig:
    weights = LossWeights(
        magnitude=args.lambda1,
        classification=args.lambda2,
        smoothness=args.lambda3,
        sparsity=args.lambda4,
        margin=args.margin,
        top_k=args.top_k,
    )
    return training.TrainConfig(
        learning_rate=args.learning_rate,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        weights=weights,
        dropout_rate=args.dropout,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
    )


def cmd_train(args) -> int:
    cfg = _train_config(args)
    _echo_config("train", {
        "manifest_path": args.manifest,
        "checkpoint_path": args.checkpoint,
        "log_path": args.log,
        "resume_path": args.resume,
        "crop_mode": args.crop_mode,
        **training.config_to_dict(cfg),
    })
    manifest = load_manifest(args.manifest, split="train")
    result = training.train(
        manifest, cfg,
        log_path=args.log,
        checkpoint_path=args.checkpoint,
        resume=args.resume,
        crop_mode=args.crop_mode,
    )
    summary = {
        "checkpoint": str(args.checkpoint),
        "log": str(args.log),
        "epochs_run": len(result.log_rows),
        "final_epoch": result.checkpoint.epoch,
    }
    if result.log_rows:
        summary["final"] = result.log_rows[-1]
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_score(args) -> int:
    _echo_config("score", {
        "checkpoint_path": args.checkpoint,
        "features_path": args.features,
        "crop_mode": args.crop_mode,
    })
    ckpt = training.load_checkpoint(args.checkpoint)
    params = training.params_from_checkpoint(ckpt)
    features = crop_reduce(read_feature_file(args.features), args.crop_mode)
    if features.shape[1] != params.feature_dim:
        raise ValueError(f"feature dimension {features.shape[1]} does not match "
                         f"model dimension {params.feature_dim}")
    bag = model_forward(features, params, training=False)
    print("snippet,score,magnitude")
    for i, (s, m) in enumerate(zip(bag.scores.data, bag.magnitudes.data)):
        print(f"{i},{float(s)!r},{float(m)!r}")
    return 0


def cmd_eval(args) -> int:
    _echo_config("eval", {
        "checkpoint_path": args.checkpoint,
        "manifest_path": args.manifest,
        "report_path": args.report,
        "roc_out_path": args.roc_out,
        "crop_mode": args.crop_mode,
    })
    ckpt = training.load_checkpoint(args.checkpoint)
    params = training.params_from_checkpoint(ckpt)
    manifest = load_manifest(args.manifest, split="test")
    report = evaluation.evaluate(params, manifest, crop_mode=args.crop_mode)
    if args.roc_out is not None:
        evaluation.write_roc_csv(args.roc_out, report.roc)
    if args.report is not None:
        with open(args.report, "w") as fh:
            fh.write(report.to_json() + "\n")
        print(json.dumps({"auc": report.auc, "report": str(args.report)}))
    else:
        print(report.to_json())
    return 0


def cmd_gradcheck(args) -> int:
    _echo_config("gradcheck", {
        "t": args.t, "d": args.d, "seeds": args.seeds, "seed": args.seed,
        "eps": args.eps, "tol": args.tol, "top_k": args.top_k,
        "max_coords": args.max_coords,
    })

    def run():
        return gradcheck.run_checks(
            t_len=args.t, dim=args.d, seeds=args.seeds, base_seed=args.seed,
            eps=args.eps, tol=args.tol, top_k=args.top_k,
            max_model_coords=args.max_coords,
        )

    if args.inject_broken_gradient:
        with gradcheck.broken_gradient():
            results = run()
    else:
        results = run()

    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<{width}} rel_err {r.max_error:.3e} "
              f"(tol {r.tolerance:.1e}, {r.coords} coords)")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="magvad",
        description="Weakly supervised video anomaly detection on snippet features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic feature dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--split", choices=("train", "test"), default="train",
                   help="test split also writes frame labels")
    p.add_argument("--n-normal", type=int, default=20)
    p.add_argument("--n-abnormal", type=int, default=20)
    p.add_argument("--t", type=int, default=32, help="snippets per video")
    p.add_argument("--d", type=int, default=64, help="feature dimension")
    p.add_argument("--crops", type=int, default=1)
    p.add_argument("--normal-mag", type=float, default=1.0)
    p.add_argument("--abnormal-mag", type=float, default=3.0)
    p.add_argument("--anomaly-snippets", type=int, default=3)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--frames-per-snippet", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", default="model.vadc", help="checkpoint output path")
    p.add_argument("--log", default="train_log.csv", help="per-epoch CSV log path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--learning-rate", "--lr", type=float, default=0.001)
    p.add_argument("--weight-decay", type=float, default=0.005)
    p.add_argument("--batch-size", type=int, default=32, help="videos per class per batch")
    p.add_argument("--lambda1", type=float, default=1.0, help="magnitude loss weight")
    p.add_argument("--lambda2", type=float, default=1.0, help="classification loss weight")
    p.add_argument("--lambda3", type=float, default=8e-4, help="smoothness weight")
    p.add_argument("--lambda4", type=float, default=8e-4, help="sparsity weight")
    p.add_argument("--margin", type=float, default=100.0)
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--dropout", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="also checkpoint every N epochs (0 = final only)")
    _add_crop_flag(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score one feature file as CSV on stdout")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="feature file to score")
    _add_crop_flag(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="frame-level ROC/AUC over a test manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", default=None, help="write the JSON report here "
                   "instead of stdout")
    p.add_argument("--roc-out", default=None, help="write ROC points as CSV")
    _add_crop_flag(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify gradients by finite differences")
    p.add_argument("--t", type=int, default=4, help="snippets per probe")
    p.add_argument("--d", type=int, default=8, help="probe feature dimension")
    p.add_argument("--seeds", type=int, default=10, help="probe draws per check")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--eps", type=float, default=gradcheck.DEFAULT_EPS)
    p.add_argument("--tol", type=float, default=gradcheck.DEFAULT_TOL)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--max-coords", type=int, default=6,
                   help="sampled coordinates per parameter in whole-model checks")
    p.add_argument("--inject-broken-gradient", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def entrypoint(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(entrypoint())


if __name__ == "__main__":
    main()
