"""Experiment orchestration: two-stage training (unsupervised fusion
model, then classifier on frozen latents), evaluation, grid search,
paired significance testing, and report/figure output.
"""

import hashlib
import itertools
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .tensor import RngState, derive_seed
from .nn import AdamState
from .vae import DomainError, VaeModel, write_latent_csv
from .classifiers import BiLstmClassifier, LrHead, VideoSequence
from .data import group_by_video, make_batches, records_matrix
from .metrics import evaluate

FUSIONS = ("vae", "ae", "concat")
CLASSIFIERS = ("lr", "bclstm")
LATENT_MODES = ("mean", "sample")


class TrainingDiverged(RuntimeError):
    def __init__(self, stage, epoch, batch):
        super().__init__(f"non-finite loss in {stage} at epoch {epoch}, "
                         f"batch {batch}")
        self.stage = stage
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    seed: int = 0
    learning_rate: float = 0.001
    batch_size: int = 100
    epochs: int = 100
    d_h: int = 150
    d_z: int = 100
    d_l: int = 100
    dropout: float = 0.2
    kl_weight: float = 1.0
    latent_mode: str = "mean"
    classifier: str = "lr"
    fusion: str = "vae"
    normalize: bool = False
    clip_norm: float = 0.0   # 0 disables gradient clipping
    joint: bool = False      # non-canonical single-stage ablation

    def validate(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.classifier not in CLASSIFIERS:
            raise ValueError(f"classifier must be one of {CLASSIFIERS}")
        if self.latent_mode not in LATENT_MODES:
            raise ValueError(f"latent_mode must be one of {LATENT_MODES}")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        for name in ("learning_rate", "batch_size", "epochs", "d_h", "d_z",
                     "d_l"):
            if getattr(self, name) <= 0 and name != "epochs":
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.joint and self.classifier != "lr":
            raise ValueError("joint training is only supported with the "
                             "logistic-regression classifier")

    def hash(self):
        blob = ";".join(f"{f.name}={getattr(self, f.name)!r}"
                        for f in fields(self))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


_BOOL = {"true": True, "1": True, "yes": True,
         "false": False, "0": False, "no": False}


def parse_config(path, base=None):
    """Read the flat key = value config format over optional defaults."""
    cfg = base if base is not None else TrainConfig()
    kv = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    known = {f.name: f.type for f in fields(TrainConfig)}
    updates = {}
    for key, raw in kv.items():
        if key not in known:
            raise ValueError(f"{path}: unknown config key {key!r}")
        current = getattr(cfg, key)
        if isinstance(current, bool):
            updates[key] = _BOOL[raw.lower()]
        elif isinstance(current, int):
            updates[key] = int(raw)
        elif isinstance(current, float):
            updates[key] = float(raw)
        else:
            updates[key] = raw
    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


@dataclass
class FusedRecord:
    video_id: str
    utterance_index: int
    label: int
    z: np.ndarray


@dataclass
class RunReport:
    config: TrainConfig
    seed: int
    metrics: object
    elbo_trace: list = field(default_factory=list)
    clf_trace: list = field(default_factory=list)
    elapsed_s: float = 0.0
    dataset: str = ""

    def summary_row(self):
        m = self.metrics
        return (f"{self.config.hash()},{self.seed},{m.weighted_f1:.6f},"
                f"{m.macro_f1:.6f},{m.accuracy:.6f},{self.elapsed_s:.3f}")


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, F):
        return (F - self.mean) / self.std


def fit_normalizer(records):
    F, _ = records_matrix(records)
    mean = F.mean(axis=1, keepdims=True)
    std = F.std(axis=1, keepdims=True)
    std[std < 1e-12] = 1.0
    return Normalizer(mean=mean, std=std)


# ---------------------------------------------------------------------------
# stage 1: unsupervised fusion training


def train_vae(config, records, normalizer=None):
    """Minimize the negative ELBO (or plain AE loss) with Adam.

    Unsupervised: labels are never read.  Returns (model, per-epoch mean
    loss trace, per-epoch mean KL trace).  Deterministic given config.seed.
    """
    config.validate()
    d_in = len(records[0].concat())
    init_rng = RngState(derive_seed(config.seed, 0x11))
    model = VaeModel(d_in, config.d_h, config.d_z, init_rng,
                     kl_weight=config.kl_weight)
    trace, kl_trace = _run_vae_epochs(model, config, records, normalizer)
    return model, trace, kl_trace


def _run_vae_epochs(model, config, records, normalizer=None):
    opt = AdamState(model.store, lr=config.learning_rate,
                    clip_norm=config.clip_norm or None)
    train_rng = RngState(derive_seed(config.seed, 0x22))
    use_vae = config.fusion != "ae"
    trace = []
    kl_trace = []
    for epoch in range(config.epochs):
        batches = make_batches(records, config.batch_size, train_rng)
        total = 0.0
        total_kl = 0.0
        count = 0
        for b, batch in enumerate(batches):
            F, _ = records_matrix(batch)
            if normalizer is not None:
                F = normalizer.apply(F)
            if use_vae:
                try:
                    breakdown = model.elbo_loss(F, rng=train_rng)
                except DomainError:
                    # blown-up weights underflow the softplus sigma to 0
                    raise TrainingDiverged("vae", epoch, b) from None
                loss = breakdown.total_loss
                if not (np.isfinite(loss) and breakdown.kl_term >= 0):
                    raise TrainingDiverged("vae", epoch, b)
                total_kl += breakdown.kl_term * len(batch)
            else:
                loss = model.ae_loss(F)
                if not np.isfinite(loss):
                    raise TrainingDiverged("ae", epoch, b)
            opt.step()
            total += loss * len(batch)
            count += len(batch)
        trace.append(total / count)
        kl_trace.append(total_kl / count)
    return trace, kl_trace


def fuse_records(config, records, model=None, normalizer=None, rng=None):
    """Turn utterance records into fused vectors for classification."""
    if config.fusion == "concat":
        return [FusedRecord(r.video_id, r.utterance_index, r.label, r.concat())
                for r in records]
    if model is None:
        raise ValueError(f"fusion={config.fusion} needs a trained model")
    if config.latent_mode == "sample" and rng is None:
        raise ValueError("latent_mode=sample needs an rng")
    mode = "mean" if config.fusion == "ae" else config.latent_mode
    out = []
    for start in range(0, len(records), 512):
        chunk = records[start:start + 512]
        F, _ = records_matrix(chunk)
        if normalizer is not None:
            F = normalizer.apply(F)
        Z = model.extract_latent(F, mode=mode, rng=rng)
        for i, r in enumerate(chunk):
            out.append(FusedRecord(r.video_id, r.utterance_index, r.label,
                                   Z[:, i].copy()))
    return out


def fused_to_videos(fused):
    by_video = {}
    for rec in fused:
        by_video.setdefault(rec.video_id, []).append(rec)
    sequences = []
    for vid, recs in by_video.items():
        recs.sort(key=lambda r: r.utterance_index)
        feats = np.stack([r.z for r in recs], axis=1)
        labels = np.array([r.label for r in recs], dtype=np.int64)
        sequences.append(VideoSequence(video_id=vid, features=feats,
                                       labels=labels))
    return sequences


# ---------------------------------------------------------------------------
# stage 2: classifiers


def train_lr(config, fused_train, n_classes):
    d_in = len(fused_train[0].z)
    rng = RngState(derive_seed(config.seed, 0x33))
    head = LrHead(d_in, n_classes, rng)
    opt = AdamState(head.store, lr=config.learning_rate,
                    clip_norm=config.clip_norm or None)
    trace = []
    for epoch in range(config.epochs):
        batches = make_batches(fused_train, config.batch_size, rng)
        total = 0.0
        count = 0
        for b, batch in enumerate(batches):
            Z = np.stack([r.z for r in batch], axis=1)
            y = np.array([r.label for r in batch], dtype=np.int64)
            loss = head.train_step_loss(Z, y)
            if not np.isfinite(loss):
                raise TrainingDiverged("lr", epoch, b)
            opt.step()
            total += loss * len(batch)
            count += len(batch)
        trace.append(total / count)
    return head, trace


def train_bclstm(config, fused_train, n_classes):
    d_in = len(fused_train[0].z)
    rng = RngState(derive_seed(config.seed, 0x44))
    model = BiLstmClassifier(d_in, config.d_l, n_classes, rng,
                             input_dropout=config.dropout,
                             output_dropout=config.dropout)
    opt = AdamState(model.store, lr=config.learning_rate,
                    clip_norm=config.clip_norm or None)
    videos = fused_to_videos(fused_train)
    # whole-video batches: a batch is a set of videos, never a truncation
    videos_per_batch = max(1, config.batch_size // 8)
    trace = []
    for epoch in range(config.epochs):
        batches = make_batches(videos, videos_per_batch, rng)
        total = 0.0
        count = 0
        for b, batch in enumerate(batches):
            scale = 1.0 / len(batch)
            for seq in batch:
                model.forward(seq, train_mode=True, rng=rng)
                loss = model.backward(seq.labels, loss_scale=scale)
                if not np.isfinite(loss):
                    raise TrainingDiverged("bclstm", epoch, b)
                total += loss * seq.n
                count += seq.n
            opt.step()
        trace.append(total / count)
    return model, trace


def predict_fused(config, clf, fused, n_classes):
    """Predictions and targets over a fused split, classifier-agnostic."""
    if config.classifier == "lr":
        Z = np.stack([r.z for r in fused], axis=1)
        y = np.array([r.label for r in fused], dtype=np.int64)
        _, preds = clf.predict(Z)
        return preds, y
    preds = []
    targets = []
    for seq in fused_to_videos(fused):
        _, yhat = clf.forward(seq, train_mode=False)
        preds.extend(yhat.tolist())
        targets.extend(seq.labels.tolist())
    return np.array(preds), np.array(targets)


def train_joint(config, train_records, n_classes, normalizer=None):
    """Non-canonical single-stage ablation: negative ELBO + CE, weight 1.0.

    Only the logistic-regression head is supported; gradients from the
    classifier flow into the encoder through the sampled latent.
    """
    config.validate()
    if not config.joint:
        raise ValueError("train_joint requires config.joint")
    d_in = len(train_records[0].concat())
    init_rng = RngState(derive_seed(config.seed, 0x11))
    model = VaeModel(d_in, config.d_h, config.d_z, init_rng,
                     kl_weight=config.kl_weight)
    head_rng = RngState(derive_seed(config.seed, 0x33))
    head = LrHead(config.d_z, n_classes, head_rng)
    opt_vae = AdamState(model.store, lr=config.learning_rate)
    opt_head = AdamState(head.store, lr=config.learning_rate)
    train_rng = RngState(derive_seed(config.seed, 0x22))
    trace = []
    for epoch in range(config.epochs):
        batches = make_batches(train_records, config.batch_size, train_rng)
        total = 0.0
        count = 0
        for b, batch in enumerate(batches):
            F, y = records_matrix(batch)
            if normalizer is not None:
                F = normalizer.apply(F)
            ce_box = {}

            def hook(z):
                loss, d_z = head.loss_and_input_grad(z, y)
                ce_box["loss"] = loss
                return d_z

            breakdown = model.elbo_loss(F, rng=train_rng, z_hook=hook)
            loss = breakdown.total_loss + ce_box["loss"]
            if not np.isfinite(loss):
                raise TrainingDiverged("joint", epoch, b)
            opt_vae.step()
            opt_head.step()
            total += loss * len(batch)
            count += len(batch)
        trace.append(total / count)
    return model, head, trace


# ---------------------------------------------------------------------------
# full pipeline and grid search


def run_pipeline(config, train_records, test_records, n_classes,
                 dataset_name=""):
    """synth/load -> train fusion -> extract -> train classifier -> report."""
    config.validate()
    start = time.perf_counter()
    normalizer = fit_normalizer(train_records) if config.normalize else None

    elbo_trace = []
    vae_model = None
    if config.joint:
        vae_model, clf, clf_trace = train_joint(config, train_records,
                                                n_classes, normalizer)
        elbo_trace = clf_trace
    elif config.fusion in ("vae", "ae"):
        vae_model, elbo_trace, _ = train_vae(config, train_records, normalizer)

    sample_rng = RngState(derive_seed(config.seed, 0x55))
    fused_train = fuse_records(config, train_records, vae_model, normalizer,
                               sample_rng)
    fused_test = fuse_records(config, test_records, vae_model, normalizer,
                              sample_rng)

    if config.joint:
        clf_trace = elbo_trace
    elif config.classifier == "lr":
        clf, clf_trace = train_lr(config, fused_train, n_classes)
    else:
        clf, clf_trace = train_bclstm(config, fused_train, n_classes)

    preds, targets = predict_fused(config, clf, fused_test, n_classes)
    metrics = evaluate(preds, targets, n_classes)
    report = RunReport(config=config, seed=config.seed, metrics=metrics,
                       elbo_trace=elbo_trace, clf_trace=clf_trace,
                       elapsed_s=time.perf_counter() - start,
                       dataset=dataset_name)
    return report, vae_model, clf


def holdout_split(records, seed, fraction=0.1):
    """Deterministic video-level holdout carved from the train split."""
    video_ids = []
    seen = set()
    for rec in records:
        if rec.video_id not in seen:
            seen.add(rec.video_id)
            video_ids.append(rec.video_id)
    rng = RngState(derive_seed(seed, 0x66))
    rng.shuffle(video_ids)
    n_hold = max(1, int(round(fraction * len(video_ids))))
    held = set(video_ids[:n_hold])
    train = [r for r in records if r.video_id not in held]
    val = [r for r in records if r.video_id in held]
    return train, val


@dataclass
class GridCell:
    d_h: int
    d_l: int
    learning_rate: float
    report: RunReport = None
    failed: str = None

    @property
    def score(self):
        return self.report.metrics.weighted_f1 if self.report else -1.0


def grid_search(config, grid, train_records, test_records, n_classes,
                val_records=None, dataset_name=""):
    """Train every (d_h, d_l, lr) combination; select by validation
    weighted F1; retrain the winner on the full train split.

    A cell whose training diverges (non-finite loss) is recorded as
    failed and excluded from selection; any other error propagates,
    tagged with the failing cell.  Ties break toward smaller d_h, then
    d_l, then learning rate.
    """
    d_h_list, d_l_list, lr_list = grid
    if not (d_h_list and d_l_list and lr_list):
        raise ValueError("grid axes must be nonempty")
    if val_records is None:
        sub_train, val_records = holdout_split(train_records, config.seed)
    else:
        sub_train = train_records

    cells = []
    for i, (d_h, d_l, lr) in enumerate(
            itertools.product(d_h_list, d_l_list, lr_list)):
        cell_cfg = replace(config, d_h=d_h, d_l=d_l, learning_rate=lr,
                           seed=derive_seed(config.seed, 0x77, i))
        cell = GridCell(d_h=d_h, d_l=d_l, learning_rate=lr)
        try:
            cell.report, _, _ = run_pipeline(cell_cfg, sub_train, val_records,
                                             n_classes, dataset_name)
        except TrainingDiverged as exc:
            cell.failed = f"d_h={d_h},d_l={d_l},lr={lr}: {exc}"
        except Exception as exc:
            raise RuntimeError(
                f"grid cell d_h={d_h},d_l={d_l},lr={lr} failed") from exc
        cells.append(cell)

    viable = [c for c in cells if c.report is not None]
    if not viable:
        raise RuntimeError("every grid cell diverged")
    best = max(viable,
               key=lambda c: (c.score, -c.d_h, -c.d_l, -c.learning_rate))
    best_cfg = replace(config, d_h=best.d_h, d_l=best.d_l,
                       learning_rate=best.learning_rate)
    final_report, vae_model, clf = run_pipeline(
        best_cfg, train_records, test_records, n_classes, dataset_name)
    return best_cfg, final_report, cells


# ---------------------------------------------------------------------------
# report output: human-readable text, delimited summary row, figures


SUMMARY_HEADER = "config_hash,seed,weighted_f1,macro_f1,accuracy,elapsed_s"


def write_report(report, out_dir, stem="run", figures=True):
    """Write {stem}.txt, append to summary.csv, render figures to PNG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    m = report.metrics
    lines = [f"run report: {stem}"]
    if report.dataset:
        lines.append(f"dataset: {report.dataset}")
    lines.append(f"seed: {report.seed}")
    lines.append("config:")
    for key, value in report.config.to_dict().items():
        lines.append(f"  {key} = {value}")
    lines.append(f"accuracy: {m.accuracy:.6f}")
    lines.append(f"weighted F1: {m.weighted_f1:.6f}")
    lines.append(f"macro F1: {m.macro_f1:.6f}")
    lines.append("per-class precision / recall / F1 / support:")
    for c in range(len(m.support)):
        lines.append(f"  class {c}: {m.precision[c]:.4f} {m.recall[c]:.4f} "
                     f"{m.f1[c]:.4f} {int(m.support[c])}")
    lines.append("confusion matrix (rows = true, cols = predicted):")
    for row in m.confusion:
        lines.append("  " + " ".join(f"{int(v):6d}" for v in row))
    if report.elbo_trace:
        lines.append(f"fusion loss trace ({len(report.elbo_trace)} epochs): "
                     f"first {report.elbo_trace[0]:.6f}, "
                     f"last {report.elbo_trace[-1]:.6f}")
    if report.clf_trace:
        lines.append(f"classifier loss trace ({len(report.clf_trace)} epochs):"
                     f" first {report.clf_trace[0]:.6f}, "
                     f"last {report.clf_trace[-1]:.6f}")
    lines.append(f"elapsed: {report.elapsed_s:.3f} s")
    (out_dir / f"{stem}.txt").write_text("\n".join(lines) + "\n")

    summary = out_dir / "summary.csv"
    if not summary.exists():
        summary.write_text(SUMMARY_HEADER + "\n")
    with open(summary, "a") as f:
        f.write(report.summary_row() + "\n")

    if figures:
        render_figures(report, out_dir, stem)


def render_figures(report, out_dir, stem="run"):
    """Loss-curve and confusion-matrix PNGs next to the delimited output."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    if report.elbo_trace or report.clf_trace:
        fig, ax = plt.subplots(figsize=(6, 4))
        if report.elbo_trace:
            ax.plot(range(1, len(report.elbo_trace) + 1), report.elbo_trace,
                    label="fusion loss (negative ELBO)")
        if report.clf_trace and report.clf_trace is not report.elbo_trace:
            ax.plot(range(1, len(report.clf_trace) + 1), report.clf_trace,
                    label="classifier cross-entropy")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / f"{stem}_loss.png", dpi=120)
        plt.close(fig)

    cm = report.metrics.confusion
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(cm, cmap="Blues")
    fig.colorbar(im, ax=ax)
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(int(cm[i, j])), ha="center", va="center",
                    color="black", fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(f"confusion (weighted F1 {report.metrics.weighted_f1:.3f})")
    fig.tight_layout()
    fig.savefig(out_dir / f"{stem}_confusion.png", dpi=120)
    plt.close(fig)


def export_latents(model, records, path, normalizer=None):
    """Posterior-mean latent CSV for external projection/plotting."""
    rows = []
    for start in range(0, len(records), 512):
        chunk = records[start:start + 512]
        F, _ = records_matrix(chunk)
        if normalizer is not None:
            F = normalizer.apply(F)
        Z = model.extract_latent(F, mode="mean")
        for i, r in enumerate(chunk):
            rows.append((r.video_id, r.utterance_index, r.label, Z[:, i]))
    write_latent_csv(path, rows)
