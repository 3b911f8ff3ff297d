"""Command-line entry point.

Subcommands: synth, train-vae, extract, train-clf, eval, grid, ttest,
export-latents.  Reports are written as human-readable text plus a
machine-readable summary.csv row, with loss-curve and confusion-matrix
figures rendered alongside.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, harness
from .nn import restore_checkpoint, save_checkpoint
from .tensor import RngState, derive_seed
from .vae import VaeModel
from .classifiers import BiLstmClassifier, LrHead


def _load_config(args):
    cfg = harness.TrainConfig()
    if getattr(args, "config", None):
        cfg = harness.parse_config(args.config, cfg)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


def _load_splits(args):
    manifest = data.parse_manifest(args.manifest)
    return manifest, data.load_dataset(manifest)


def _build_vae(manifest, cfg):
    rng = RngState(derive_seed(cfg.seed, 0x11))
    return VaeModel(manifest.d_in, cfg.d_h, cfg.d_z, rng,
                    kl_weight=cfg.kl_weight)


def cmd_synth(args):
    cfg = data.SyntheticConfig(
        seed=args.seed if args.seed is not None else 0,
        train_videos=args.videos, test_videos=args.test_videos,
        utterances_min=args.utt_min, utterances_max=args.utt_max,
        d_t=args.d_t, d_a=args.d_a, d_v=args.d_v, classes=args.classes,
        latent_dim=args.latent_dim, noise=args.noise,
        context_shift=args.context_shift)
    train, test, _ = data.synth_generate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.format == "binary":
        train_name, test_name = "train.mmf", "test.mmf"
        data.write_binary(out / train_name, train, cfg.d_t, cfg.d_a, cfg.d_v,
                          cfg.classes)
        data.write_binary(out / test_name, test, cfg.d_t, cfg.d_a, cfg.d_v,
                          cfg.classes)
    else:
        train_name, test_name = "train.csv", "test.csv"
        data.write_csv(out / train_name, train, cfg.d_t, cfg.d_a, cfg.d_v)
        data.write_csv(out / test_name, test, cfg.d_t, cfg.d_a, cfg.d_v)
    manifest = [
        "name = synthetic",
        f"d_t = {cfg.d_t}", f"d_a = {cfg.d_a}", f"d_v = {cfg.d_v}",
        f"classes = {cfg.classes}",
        f"train_path = {train_name}", f"test_path = {test_name}",
        f"expect_train = {len(train)}", f"expect_test = {len(test)}",
    ]
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")
    print(f"wrote {len(train)} train / {len(test)} test utterances to {out}")
    return 0


def cmd_train_vae(args):
    cfg = _load_config(args)
    manifest, splits = _load_splits(args)
    normalizer = (harness.fit_normalizer(splits["train"])
                  if cfg.normalize else None)
    model, trace, _ = harness.train_vae(cfg, splits["train"], normalizer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.store, out / "vae.fvw")
    with open(out / "elbo_trace.csv", "w") as f:
        f.write("epoch,mean_loss\n")
        for i, loss in enumerate(trace, 1):
            f.write(f"{i},{loss:.17g}\n")
    if trace:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(range(1, len(trace) + 1), trace)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean negative ELBO" if cfg.fusion != "ae"
                      else "mean reconstruction loss")
        fig.tight_layout()
        fig.savefig(out / "elbo_trace.png", dpi=120)
        plt.close(fig)
    last = f"{trace[-1]:.6f}" if trace else "n/a"
    print(f"trained {cfg.fusion} for {cfg.epochs} epochs; final loss {last}; "
          f"checkpoint at {out / 'vae.fvw'}")
    return 0


def _export(args, filename_by_split):
    cfg = _load_config(args)
    manifest, splits = _load_splits(args)
    model = _build_vae(manifest, cfg)
    restore_checkpoint(model.store, args.checkpoint)
    normalizer = (harness.fit_normalizer(splits["train"])
                  if cfg.normalize else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in args.splits.split(","):
        split = split.strip()
        if split not in splits:
            raise SystemExit(f"unknown split {split!r}")
        path = out / filename_by_split(split)
        harness.export_latents(model, splits[split], path, normalizer)
        print(f"wrote {len(splits[split])} latents for split {split} to {path}")
    return 0


def cmd_extract(args):
    return _export(args, lambda split: f"latents_{split}.csv")


def cmd_export_latents(args):
    return _export(args, lambda split: f"latents_{split}.csv")


def cmd_train_clf(args):
    cfg = _load_config(args)
    manifest, splits = _load_splits(args)
    report, vae_model, clf = harness.run_pipeline(
        cfg, splits["train"], splits["test"], manifest.classes,
        dataset_name=manifest.name)
    out = Path(args.out)
    harness.write_report(report, out, stem=args.stem)
    if vae_model is not None:
        save_checkpoint(vae_model.store, out / "vae.fvw")
    save_checkpoint(clf.store, out / "classifier.fvw")
    print(report.summary_row())
    print(f"weighted F1 {report.metrics.weighted_f1:.4f}, "
          f"accuracy {report.metrics.accuracy:.4f}; report in {out}")
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    manifest, splits = _load_splits(args)
    normalizer = (harness.fit_normalizer(splits["train"])
                  if cfg.normalize else None)
    vae_model = None
    if cfg.fusion in ("vae", "ae"):
        if not args.vae_checkpoint:
            raise SystemExit(f"fusion={cfg.fusion} needs --vae-checkpoint")
        vae_model = _build_vae(manifest, cfg)
        restore_checkpoint(vae_model.store, args.vae_checkpoint)
    fused = harness.fuse_records(cfg, splits["test"], vae_model, normalizer,
                                 RngState(derive_seed(cfg.seed, 0x55)))
    d_in = len(fused[0].z)
    rng = RngState(derive_seed(cfg.seed, 0x33))
    if cfg.classifier == "lr":
        clf = LrHead(d_in, manifest.classes, rng)
    else:
        clf = BiLstmClassifier(d_in, cfg.d_l, manifest.classes, rng,
                               input_dropout=cfg.dropout,
                               output_dropout=cfg.dropout)
    restore_checkpoint(clf.store, args.clf_checkpoint)
    preds, targets = harness.predict_fused(cfg, clf, fused, manifest.classes)
    from .metrics import evaluate
    metrics = evaluate(preds, targets, manifest.classes)
    report = harness.RunReport(config=cfg, seed=cfg.seed, metrics=metrics,
                               dataset=manifest.name)
    harness.write_report(report, Path(args.out), stem=args.stem)
    print(report.summary_row())
    return 0


def _parse_axis(raw, cast):
    return [cast(tok) for tok in raw.split(",") if tok.strip()]


def cmd_grid(args):
    cfg = _load_config(args)
    manifest, splits = _load_splits(args)
    grid = (_parse_axis(args.d_h, int), _parse_axis(args.d_l, int),
            _parse_axis(args.lr, float))
    best_cfg, final_report, cells = harness.grid_search(
        cfg, grid, splits["train"], splits["test"], manifest.classes,
        val_records=splits.get("val"), dataset_name=manifest.name)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "grid.csv", "w") as f:
        f.write("d_h,d_l,learning_rate,val_weighted_f1,status\n")
        for cell in cells:
            status = "failed" if cell.failed else "ok"
            score = "" if cell.failed else f"{cell.score:.6f}"
            f.write(f"{cell.d_h},{cell.d_l},{cell.learning_rate},"
                    f"{score},{status}\n")
    harness.write_report(final_report, out, stem="grid_best")
    print(f"best cell: d_h={best_cfg.d_h} d_l={best_cfg.d_l} "
          f"lr={best_cfg.learning_rate}; test weighted F1 "
          f"{final_report.metrics.weighted_f1:.4f}")
    return 0


def _read_scores(path):
    """Newline-separated numbers, or a summary.csv (weighted_f1 column)."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()
             if ln.strip()]
    if lines and lines[0].startswith("config_hash,"):
        col = lines[0].split(",").index("weighted_f1")
        return [float(ln.split(",")[col]) for ln in lines[1:]]
    return [float(ln) for ln in lines]


def cmd_ttest(args):
    a = _read_scores(args.a)
    b = _read_scores(args.b)
    from .metrics import paired_t_test
    t, p = paired_t_test(a, b)
    verdict = "significant" if p < 0.05 else "not significant"
    print(f"n={len(a)} t={t:.6g} p={p:.6g} ({verdict} at p<0.05)")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mmfuse",
        description="Multimodal VAE fusion: training, evaluation, and "
                    "significance-testing toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True, config=True, out=True):
        if manifest:
            p.add_argument("--manifest", required=True)
        if config:
            p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        if out:
            p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, manifest=False, config=False)
    p.add_argument("--videos", type=int, default=50)
    p.add_argument("--test-videos", type=int, default=20)
    p.add_argument("--utt-min", type=int, default=2)
    p.add_argument("--utt-max", type=int, default=8)
    p.add_argument("--d-t", type=int, default=8)
    p.add_argument("--d-a", type=int, default=8)
    p.add_argument("--d-v", type=int, default=8)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--latent-dim", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--context-shift", type=int, default=0)
    p.add_argument("--format", choices=["csv", "binary"], default="csv")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train-vae", help="stage 1: train the fusion model")
    common(p)
    p.set_defaults(fn=cmd_train_vae)

    for name, fn in (("extract", cmd_extract),
                     ("export-latents", cmd_export_latents)):
        p = sub.add_parser(name, help="write fused latent CSVs")
        common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--splits", default="train,test")
        p.set_defaults(fn=fn)

    p = sub.add_parser("train-clf", help="full pipeline: fusion + classifier")
    common(p)
    p.add_argument("--stem", default="run")
    p.set_defaults(fn=cmd_train_clf)

    p = sub.add_parser("eval", help="evaluate saved checkpoints on test")
    common(p)
    p.add_argument("--vae-checkpoint", default=None)
    p.add_argument("--clf-checkpoint", required=True)
    p.add_argument("--stem", default="eval")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grid", help="grid search over d_h, d_l, lr")
    common(p)
    p.add_argument("--d-h", required=True, help="comma-separated values")
    p.add_argument("--d-l", required=True, help="comma-separated values")
    p.add_argument("--lr", required=True, help="comma-separated values")
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("ttest", help="paired t-test over two score files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(fn=cmd_ttest)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
