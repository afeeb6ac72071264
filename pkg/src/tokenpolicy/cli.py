"""Command-line entry points: pretrain, train, sample, eval, ablate.

Exit codes: 0 success, 2 configuration error, 3 numerical abort,
4 missing artifact.  ``ADANAT_OUT`` overrides ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .backbone import MaskedTokenPredictor, TrainingDivergedError
from .config import ConfigError, RunConfig, load_config
from .estimator import AdaptiveDecodingPolicy
from .experiments import (ArmResult, comparison_table, evaluate_tokens, policy_grid, pretrain_backbone,
                          reference_set, reward_grid)
from .metrics import load_stats, save_stats
from .plots import training_curves
from .ppo import NumericalAbort
from .world import make_codebook, save_world, write_image

log = logging.getLogger("tokenpolicy")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4


class MissingArtifact(FileNotFoundError):
    pass


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found: {path} (run the producing command first)")
    return path


def _out_dir(args) -> Path:
    out = Path(os.environ.get("ADANAT_OUT") or args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    overrides = {} if args.seed is None else {"seed": args.seed}
    return load_config(args.config, overrides)


def _load_backbone(out: Path, cfg: RunConfig) -> MaskedTokenPredictor:
    blob = _require(out / "backbone.ckpt", "backbone checkpoint").read_bytes()
    return MaskedTokenPredictor.from_bytes(blob, cfg.world_spec().fingerprint())


def _estimator(cfg: RunConfig, backbone, out: Path | None = None, train: bool = False):
    spec = cfg.world_spec()
    return AdaptiveDecodingPolicy(
        backbone=backbone, codebook=make_codebook(spec.codebook_size), grid=spec.grid,
        n_steps=cfg.sampler.T, policy_mode=cfg.policy.mode, reward=cfg.reward.kind,
        schedule_lam=cfg.sampler.lam, schedule_k=cfg.sampler.k, schedule_tau1=cfg.sampler.tau1,
        hidden=cfg.policy.hidden, ppo=cfg.ppo.to_dict(), group_size=cfg.reward.group_size,
        external_hook=cfg.reward.external_hook, disc_objective=cfg.reward.disc_objective,
        eval_every=cfg.eval.eval_every, n_eval=cfg.eval.n_eval, random_state=cfg.seed,
        log_path=(out / "train_log.csv") if train else None,
        checkpoint_dir=(out / "checkpoints") if train else None,
    )


def _prepared(cfg: RunConfig, out: Path):
    """Estimator with reference statistics and (for learned modes) the saved policy."""
    spec = cfg.world_spec()
    est = _estimator(cfg, _load_backbone(out, cfg))
    est.prepare(*reference_set(spec, cfg.eval.n_reference, cfg.seed))
    if not cfg.policy.mode.startswith("static"):
        est.load_policy(_require(out / "policy.ckpt", "policy checkpoint").read_bytes())
    return est


# -- commands ----------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg, out = _config(args), _out_dir(args)
    spec = cfg.world_spec()
    b = cfg.backbone
    pred = pretrain_backbone(spec, cfg.seed, n_steps=b.n_steps, n_train=b.n_train, hidden=tuple(b.hidden),
                             batch_size=b.batch_size, learning_rate=b.learning_rate,
                             class_dropout=b.class_dropout)
    (out / "backbone.ckpt").write_bytes(pred.to_bytes(spec.fingerprint()))
    with open(out / "pretrain_loss.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        w.writerows((i, repr(v)) for i, v in enumerate(pred.loss_curve_))
    save_world(spec, out / "world.yaml")
    cfg.save(out / "config.yaml")
    print(f"backbone saved to {out / 'backbone.ckpt'} (final loss {pred.loss_curve_[-1]:.4f})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, out = _config(args), _out_dir(args)
    cfg.save(out / "config.yaml")
    spec = cfg.world_spec()
    est = _estimator(cfg, _load_backbone(out, cfg), out, train=True)
    X, y = reference_set(spec, cfg.eval.n_reference, cfg.seed)
    est.fit(X, y)
    save_stats(out / "reference_stats.json", est.ref_stats_)
    if est.policy_ is not None:
        (out / "policy.ckpt").write_bytes(est.policy_.to_bytes())
        if hasattr(est.reward_model_, "to_bytes"):
            (out / "disc.ckpt").write_bytes(est.reward_model_.to_bytes())
        training_curves(est.log_, out)
    report = evaluate_tokens(est, est.sample(cfg.eval.n_eval, random_state=[cfg.seed, 4]), spec, args.workers)
    (out / "train_metrics.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg, out = _config(args), _out_dir(args)
    est = _prepared(cfg, out)
    classes = None if args.cls is None else np.full(args.n, args.cls)
    if classes is not None and not 0 <= args.cls < est.backbone.n_classes:
        raise ConfigError(f"class {args.cls} outside [0, {est.backbone.n_classes})")
    tokens, traj = est.sample(args.n, classes=classes, random_state=cfg.seed, return_trajectory=True)
    sdir = out / "samples"
    sdir.mkdir(exist_ok=True)
    np.save(sdir / "tokens.npy", tokens)
    np.save(sdir / "classes.npy", traj.classes)
    traj.to_csv(sdir / "trajectory.csv")
    for i, img in enumerate(est._decode(tokens)):
        write_image(sdir / f"sample_{i:05d}.{args.format}", img)
    print(f"wrote {args.n} samples to {sdir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, out = _config(args), _out_dir(args)
    spec = cfg.world_spec()
    stats_path = out / "reference_stats.json"
    ref = load_stats(_require(stats_path, "reference statistics file"))
    est = _prepared(cfg, out)
    est.ref_stats_ = ref
    if args.samples:
        tokens = np.load(_require(Path(args.samples), "samples file"))
    else:
        tokens = est.sample(cfg.eval.n_eval, random_state=[cfg.seed, 4])
    if tokens.ndim != 2 or tokens.shape[0] < 2:
        raise ConfigError("evaluation needs at least 2 token sequences")
    report = evaluate_tokens(est, tokens, spec, args.workers)
    (out / "eval_report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, out = _config(args), _out_dir(args)
    cfg.save(out / "config.yaml")
    spec = cfg.world_spec()
    backbone = _load_backbone(out, cfg)
    X, y = reference_set(spec, cfg.eval.n_reference, cfg.seed)
    seeds = [cfg.seed + i for i in range(args.n_seeds)]
    kw = dict(n_loops=cfg.ppo.n_loops, ppo=cfg.ppo.to_dict(), n_eval=cfg.eval.n_eval, workers=args.workers,
              n_steps=cfg.sampler.T, hidden=cfg.policy.hidden, group_size=cfg.reward.group_size,
              disc_objective=cfg.reward.disc_objective)
    results: list[ArmResult] = policy_grid(backbone, spec, X, y, seeds, **kw)
    results += [r for r in reward_grid(backbone, spec, X, y, seeds, **kw) if r.reward != "adversarial"]
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(results[0].row()))
        w.writeheader()
        w.writerows(r.row() for r in results)
    table = comparison_table(results)
    (out / "ablation.md").write_text(table)
    print(table, end="")
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults when omitted)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="threads for featurization (results do not depend on it)")
    common.add_argument("--out", default="runs/default", help="output directory (ADANAT_OUT overrides)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="tokenpolicy", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the masked-token backbone")
    sub.add_parser("train", parents=[common], help="train the decoding policy")
    p = sub.add_parser("sample", parents=[common], help="generate images and per-step traces")
    p.add_argument("-n", type=int, default=16)
    p.add_argument("--class", dest="cls", type=int, default=None)
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p = sub.add_parser("eval", parents=[common], help="toy-FID, divergences and diversity")
    p.add_argument("--samples", help=".npy file of token sequences (generated on the fly when omitted)")
    p = sub.add_parser("ablate", parents=[common], help="policy-design and reward-design grids")
    p.add_argument("--n-seeds", type=int, default=3)
    sub.add_parser("dump-config", parents=[common], help="print the effective configuration")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "dump-config":
            sys.stdout.write(_config(args).dump())
            return EXIT_OK
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, TrainingDivergedError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
