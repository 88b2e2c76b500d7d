"""Command-line surface: `idp {synth,ingest,pretrain,eval,analyze}`.

Every run is driven by one TOML config plus flag overrides (flags win);
the IDP_SEED environment variable overrides the master seed.  All outputs
land under the configured output directory and embed the config
fingerprint.  Exit codes: 0 ok, 1 config/path problem, 2 numerical
divergence, 3 insufficient data.
"""

from __future__ import annotations

import os

# Pin BLAS to one thread before numpy loads: episode math must not depend
# on the worker count.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .adaptation import FinetuneConfig, LossWeights, init_adapter
from .config import RunConfig, apply_env_seed, file_sha256, load_config
from .containers import (
    FeatureDataset,
    FeatureMap,
    FeatureShape,
    LabelSpace,
    read_container,
    write_container,
)
from .episodes import EpisodeSpec, EvalSetup, run_evaluation
from .errors import ConfigError, DivergedLoss, IdpError, InsufficientSamples
from .prototypes import (
    SourceTrainConfig,
    cluster_prototypes,
    load_bank,
    load_pool,
    save_bank,
    save_pool,
    train_source_prototypes,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_INSUFFICIENT = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idp", description=__doc__)
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument("--seed", type=int, help="master seed (overrides config)")
    parser.add_argument("--lambda", dest="ridge_lambda", type=float,
                        help="ridge regularizer (overrides config)")
    parser.add_argument("--workers", type=int, help="parallel episode workers")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate synthetic source/target containers")

    p_ingest = sub.add_parser("ingest", help="convert an .npz feature dump to a container")
    p_ingest.add_argument("--in", dest="npz", required=True, help="input .npz file")
    p_ingest.add_argument("--role", choices=["source", "target"], required=True)
    p_ingest.add_argument("--to", required=True, help="output container path")

    p_pre = sub.add_parser("pretrain", help="train the source prototype bank")
    p_pre.add_argument("--steps", type=int, help="source training steps")

    p_eval = sub.add_parser("eval", help="episodic evaluation on the target container")
    p_eval.add_argument("--episodes", type=int, help="episode count")
    p_eval.add_argument("--epochs", type=int, help="fine-tuning steps per episode")
    p_eval.add_argument("--no-proxy-loss", action="store_true",
                        help="ablation: zero the proxy loss weight")
    p_eval.add_argument("--no-align-loss", action="store_true",
                        help="ablation: zero the alignment loss weight")
    p_eval.add_argument("--align-full-params", action="store_true",
                        help="route alignment gradients into the prototypes too")
    p_eval.add_argument("--force", action="store_true",
                        help="skip the bank/source fingerprint check")

    p_an = sub.add_parser("analyze", help="run the empirical-study suite")
    p_an.add_argument("--prop1-seeds", type=int, default=1000)
    p_an.add_argument("--fig4-seeds", type=int, default=20)
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.out is not None:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.ridge_lambda is not None:
        cfg.ridge_lambda = args.ridge_lambda
    if args.workers is not None:
        cfg.workers = args.workers
    apply_env_seed(cfg)
    cfg.validate()
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    return cfg


def _shift_spec(cfg: RunConfig) -> analysis.ShiftSpec:
    return analysis.ShiftSpec.from_magnitude(
        cfg.synth_channels, cfg.shift_magnitude, cfg.seed, cfg.content_noise
    )


def _synth_shape(cfg: RunConfig) -> FeatureShape:
    return FeatureShape(cfg.synth_width, cfg.synth_height, cfg.synth_channels)


def cmd_synth(cfg: RunConfig, args) -> int:
    source, target = analysis.synth_domains(
        _shift_spec(cfg), cfg.synth_classes, cfg.synth_samples_per_class, _synth_shape(cfg)
    )
    src_path, tgt_path = cfg.out_path("source.idpf"), cfg.out_path("target.idpf")
    write_container(source, src_path)
    write_container(target, tgt_path)
    print(f"wrote {src_path} ({len(source.records)} records) and "
          f"{tgt_path} ({len(target.records)} records)")
    return EXIT_OK


def cmd_ingest(cfg: RunConfig, args) -> int:
    with np.load(args.npz, allow_pickle=False) as npz:
        feats = np.asarray(npz["features"], dtype=np.float64)
        labels = np.asarray(npz["labels"], dtype=np.int64)
        names = tuple(str(n) for n in npz["class_names"])
        if feats.ndim == 4:
            n, h, w, d = feats.shape
            feats = feats.reshape(n, h * w, d)
            shape = FeatureShape(w, h, d)
        elif feats.ndim == 3:
            side = int(np.sqrt(feats.shape[1]))
            if side * side != feats.shape[1]:
                raise ConfigError("cannot infer W, H from a non-square position count")
            shape = FeatureShape(side, side, feats.shape[2])
        else:
            raise ConfigError(f"features must be 3-D or 4-D, got {feats.ndim}-D")
    records = [FeatureMap(i, int(l), feats[i]) for i, l in enumerate(labels)]
    ds = FeatureDataset(shape, LabelSpace(names, args.role), records)
    write_container(ds, args.to)
    print(f"wrote {args.to} ({len(records)} records, {len(names)} classes)")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    src_path = Path(cfg.source)
    if not src_path.exists():
        src_path = cfg.out_path(cfg.source)
    if not src_path.exists():
        raise ConfigError(f"source container not found: {cfg.source}")
    dataset = read_container(src_path)
    train_cfg = SourceTrainConfig(
        learning_rate=cfg.source_learning_rate,
        steps=args.steps if args.steps is not None else cfg.source_steps,
        batch_size=cfg.source_batch_size,
        lam=cfg.ridge_lambda,
        per_class=cfg.prototypes_per_class,
        seed=cfg.seed,
    )
    bank, trace = train_source_prototypes(dataset, train_cfg)
    bank.lam = cfg.ridge_lambda
    bank.config_fingerprint = cfg.fingerprint()
    bank.source_fingerprint = file_sha256(src_path)
    bank_path = cfg.out_path(Path(cfg.bank).name)
    save_bank(bank, bank_path)
    # Re-load so the pool provenance matches the float32 artifact exactly.
    bank = load_bank(bank_path)
    pool = cluster_prototypes(bank, cfg.pool_size, cfg.seed)
    pool_path = cfg.out_path(Path(cfg.pool).name)
    save_pool(pool, pool_path)
    with open(cfg.out_path("pretrain_loss.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        writer.writerows(enumerate(trace))
    print(f"wrote {bank_path} and {pool_path}; final loss {trace[-1]:.6f}")
    return EXIT_OK


def _locate(cfg: RunConfig, configured: str) -> Path:
    p = Path(configured)
    if p.exists():
        return p
    q = cfg.out_path(p.name)
    if q.exists():
        return q
    raise ConfigError(f"file not found: {configured}")


def cmd_eval(cfg: RunConfig, args) -> int:
    src_path = _locate(cfg, cfg.source)
    tgt_path = _locate(cfg, cfg.target)
    bank = load_bank(_locate(cfg, cfg.bank))
    pool = load_pool(_locate(cfg, cfg.pool))
    if not (args.force or cfg.force):
        actual = file_sha256(src_path)
        if bank.source_fingerprint and bank.source_fingerprint != actual:
            raise ConfigError(
                "bank was trained on a different source container "
                "(rerun pretrain or pass --force)"
            )
    source = read_container(src_path)
    target = read_container(tgt_path)
    steps = args.epochs if args.epochs is not None else cfg.steps
    weights = LossWeights(
        cfg.weight_target,
        0.0 if args.no_proxy_loss else cfg.weight_proxy,
        0.0 if args.no_align_loss else cfg.weight_align,
    )
    if steps == 0:
        variant = "no-adaptation"
    elif args.no_align_loss and args.no_proxy_loss:
        variant = "target-loss-only"
    elif args.no_proxy_loss:
        variant = "no-proxy-loss"
    elif args.no_align_loss:
        variant = "no-align-loss"
    else:
        variant = "full"
    finetune = FinetuneConfig(
        steps=steps,
        learning_rate=cfg.learning_rate,
        lam=cfg.ridge_lambda,
        per_class=cfg.target_prototypes_per_class,
        weights=weights,
        align_full_params=args.align_full_params or cfg.align_full_params,
    )
    adapter = init_adapter(
        source.all_rows(), cfg.adapter_depth, cfg.adapter_eps, cfg.schedule_alpha
    )
    spec = EpisodeSpec(
        ways=cfg.ways,
        shots=cfg.shots,
        queries=cfg.queries,
        episodes=args.episodes if args.episodes is not None else cfg.episodes,
        seed=cfg.seed,
    )
    setup = EvalSetup(
        finetune=finetune,
        adapter=adapter,
        workers=cfg.workers,
        config_fingerprint=cfg.fingerprint(),
        variant=variant,
    )
    report = run_evaluation(target, bank, pool, spec, setup)
    report_path = cfg.out_path("report.json")
    report_path.write_text(report.to_json())
    if finetune.steps > 0:
        # loss trace of the first episode, re-run deterministically
        from .adaptation import finetune_episode, trace_csv
        from .containers import split_support_query
        from .episodes import _episode_rng

        rng = _episode_rng(spec.seed, 0)
        split = split_support_query(target, spec, rng)
        result = finetune_episode(split, bank, pool, adapter, finetune, rng)
        cfg.out_path("trace_episode0.csv").write_text(trace_csv(result.trace))
    with open(cfg.out_path("episodes.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "accuracy", "error"])
        fails = dict(report.failures)
        for i, acc in enumerate(report.accuracies):
            writer.writerow([i, "" if acc is None else f"{acc:.6f}", fails.get(i, "")])
    cfg.out_path("run_meta.json").write_text(
        json.dumps({"wall_clock_seconds": report.wall_clock, "variant": variant},
                   sort_keys=True, indent=2) + "\n"
    )
    print(report.summary())
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    spec = _shift_spec(cfg)
    shape = _synth_shape(cfg)
    rng = np.random.default_rng(cfg.seed)

    # Proxy-closer-than-source check over seeds, with the lambda curves.
    passes = 0
    for i in range(args.prop1_seeds):
        s, t, u = analysis.make_instance(spec, seed=cfg.seed + i)
        if analysis.verify_prop1(s, t, u).passed:
            passes += 1
    prop1 = {"seeds": args.prop1_seeds, "pass_rate": passes / args.prop1_seeds}

    # F(lambda) sweep on one matched-shape instance.
    inst_rng = np.random.default_rng(cfg.seed)
    t_rows = inst_rng.standard_normal((8, cfg.synth_channels))
    u_rows = inst_rng.standard_normal((8, cfg.synth_channels))
    f_curve = [
        {"lambda": lam, "f": analysis.f_lambda(t_rows, u_rows, lam)}
        for lam in (0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1e3)
    ]
    with open(out / "f_lambda.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "f"])
        writer.writerows([(row["lambda"], row["f"]) for row in f_curve])

    # Residual vs nested pool size, lambda = 0.
    channels = max(cfg.synth_channels, 64)
    base = np.random.default_rng(cfg.seed + 1).standard_normal((50, channels))
    targets = np.random.default_rng(cfg.seed + 2).standard_normal((60, channels))
    curve = []
    for size in (1, 5, 20, 50):
        from .numerics import ridge_solve

        _, recon = ridge_solve(targets, base[:size], 0.0)
        curve.append({"pool_size": size, "residual": float(np.sum((targets - recon) ** 2))})
    with open(out / "pool_size_residual.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pool_size", "residual"])
        writer.writerows([(row["pool_size"], row["residual"]) for row in curve])

    # Paired aligned/unaligned comparison (directional).
    episode_spec = EpisodeSpec(
        ways=min(cfg.ways, cfg.synth_classes), shots=5, queries=cfg.queries,
        episodes=max(4, args.fig4_seeds), seed=cfg.seed,
    )
    prop2 = analysis.verify_prop2(
        spec, episode_spec, FinetuneConfig(per_class=cfg.target_prototypes_per_class),
        classes=cfg.synth_classes, samples_per_class=cfg.synth_samples_per_class,
        shape=shape,
    )

    # Cross-domain distance histogram of the synthetic pair.
    source, target = analysis.synth_domains(
        spec, cfg.synth_classes, cfg.synth_samples_per_class, shape
    )
    edges, counts, mean_dist = analysis.alignment_histogram(
        source.all_rows(), target.all_rows(), 5000, rng
    )
    with open(out / "alignment_histogram.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count"])
        writer.writerows(zip(edges[:-1], edges[1:], counts))

    doc = {
        "prop1": prop1,
        "prop2": {
            "acc_aligned": prop2.acc_aligned,
            "acc_unaligned": prop2.acc_unaligned,
            "delta_accuracy": prop2.delta_accuracy,
            "delta_discrepancy": prop2.delta_discrepancy,
        },
        "f_lambda": f_curve,
        "pool_size_residual": curve,
        "histogram_mean_distance": mean_dist,
        "config_fingerprint": cfg.fingerprint(),
    }
    (out / "analysis.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    print(f"prop1 pass rate {prop1['pass_rate']:.3f}; "
          f"delta accuracy {prop2.delta_accuracy:+.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "synth":
            return cmd_synth(cfg, args)
        if args.command == "ingest":
            return cmd_ingest(cfg, args)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, args)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        if args.command == "analyze":
            return cmd_analyze(cfg, args)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except InsufficientSamples as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT
    except IdpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
