"""Dataset manifests, feature file formats, per-video grouping, batching,
and a synthetic multimodal generator with known ground truth.

Feature files come in two interchangeable formats:

* CSV with header ``video_id,utterance_index,label,t_0..,a_0..,v_0..``
  (floats written with 17 significant digits).
* binary "MMF1": magic, u32 version, u32 d_t/d_a/d_v/classes, u64 count,
  then packed records (u16 length-prefixed utf-8 id, u32 index, u32 label,
  d_t+d_a+d_v little-endian f64 features).  Round-trips bit-exactly.
"""

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import RngState, derive_seed
from .vae import ModalityFeatures
from .classifiers import VideoSequence

MMF_MAGIC = b"MMF1"
MMF_VERSION = 1


class DataFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class DatasetManifest:
    name: str
    d_t: int
    d_a: int
    d_v: int
    classes: int
    labels: list
    train_path: str
    test_path: str
    val_path: str = None
    expect_train: int = None
    expect_test: int = None

    @property
    def d_in(self):
        return self.d_t + self.d_a + self.d_v


def parse_manifest(path):
    """Parse the flat key = value manifest format."""
    kv = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ManifestError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    required = ["name", "d_t", "d_a", "d_v", "classes", "train_path", "test_path"]
    missing = [k for k in required if k not in kv]
    if missing:
        raise ManifestError(f"{path}: missing keys {missing}")
    base = Path(path).parent

    def resolve(p):
        return str(base / p) if p else None

    labels = kv.get("labels", "")
    labels = [s.strip() for s in labels.split(",") if s.strip()]
    classes = int(kv["classes"])
    if labels and len(labels) != classes:
        raise ManifestError(f"{path}: {len(labels)} labels for {classes} classes")
    if not labels:
        labels = [str(i) for i in range(classes)]
    return DatasetManifest(
        name=kv["name"],
        d_t=int(kv["d_t"]), d_a=int(kv["d_a"]), d_v=int(kv["d_v"]),
        classes=classes, labels=labels,
        train_path=resolve(kv["train_path"]),
        test_path=resolve(kv["test_path"]),
        val_path=resolve(kv.get("val_path")),
        expect_train=int(kv["expect_train"]) if "expect_train" in kv else None,
        expect_test=int(kv["expect_test"]) if "expect_test" in kv else None,
    )


@dataclass
class UtteranceRecord:
    video_id: str
    utterance_index: int
    label: int
    features: ModalityFeatures

    def concat(self):
        return np.concatenate([self.features.f_t, self.features.f_a,
                               self.features.f_v])


# ---------------------------------------------------------------------------
# file formats


def write_csv(path, records, d_t, d_a, d_v):
    with open(path, "w", newline="") as f:
        header = ["video_id", "utterance_index", "label"]
        header += [f"t_{i}" for i in range(d_t)]
        header += [f"a_{i}" for i in range(d_a)]
        header += [f"v_{i}" for i in range(d_v)]
        f.write(",".join(header) + "\n")
        for rec in records:
            if not rec.video_id:
                raise DataFormatError("empty video_id is not writable")
            cells = [rec.video_id, str(rec.utterance_index), str(rec.label)]
            for vec in (rec.features.f_t, rec.features.f_a, rec.features.f_v):
                cells += [f"{v:.17g}" for v in vec]
            f.write(",".join(cells) + "\n")


def read_csv(path, d_t, d_a, d_v):
    records = []
    with open(path) as f:
        header = f.readline()
        if not header.startswith("video_id,utterance_index,label"):
            raise DataFormatError(f"{path}: unrecognized CSV header")
        want = 3 + d_t + d_a + d_v
        for lineno, line in enumerate(f, 2):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != want:
                raise DataFormatError(
                    f"{path}:{lineno}: {len(cells)} columns, expected {want}")
            try:
                idx = int(cells[1])
                label = int(cells[2])
                vals = np.array([float(c) for c in cells[3:]])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: malformed row: {exc}")
            records.append(UtteranceRecord(
                video_id=cells[0], utterance_index=idx, label=label,
                features=ModalityFeatures(
                    f_t=vals[:d_t], f_a=vals[d_t:d_t + d_a],
                    f_v=vals[d_t + d_a:])))
    return records


def write_binary(path, records, d_t, d_a, d_v, classes):
    with open(path, "wb") as f:
        f.write(MMF_MAGIC)
        f.write(struct.pack("<IIIII", MMF_VERSION, d_t, d_a, d_v, classes))
        f.write(struct.pack("<Q", len(records)))
        for rec in records:
            if not rec.video_id:
                raise DataFormatError("empty video_id is not writable")
            raw = rec.video_id.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<II", rec.utterance_index, rec.label))
            f.write(rec.concat().astype("<f8").tobytes())


def read_binary(path):
    """Read an MMF1 file; returns (records, d_t, d_a, d_v, classes)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MMF_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}")
        version, d_t, d_a, d_v, classes = struct.unpack("<IIIII", f.read(20))
        if version != MMF_VERSION:
            raise DataFormatError(f"{path}: unsupported version {version}")
        (count,) = struct.unpack("<Q", f.read(8))
        d = d_t + d_a + d_v
        records = []
        for _ in range(count):
            head = f.read(2)
            if len(head) != 2:
                raise DataFormatError(f"{path}: truncated file")
            (nlen,) = struct.unpack("<H", head)
            vid = f.read(nlen).decode("utf-8")
            meta = f.read(8)
            raw = f.read(8 * d)
            if len(meta) != 8 or len(raw) != 8 * d:
                raise DataFormatError(f"{path}: truncated file")
            idx, label = struct.unpack("<II", meta)
            vals = np.frombuffer(raw, dtype="<f8").copy()
            records.append(UtteranceRecord(
                video_id=vid, utterance_index=idx, label=label,
                features=ModalityFeatures(
                    f_t=vals[:d_t], f_a=vals[d_t:d_t + d_a],
                    f_v=vals[d_t + d_a:])))
    return records, d_t, d_a, d_v, classes


def read_feature_file(path, d_t, d_a, d_v):
    """Load either format, sniffed from the leading magic bytes."""
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == MMF_MAGIC:
        records, bt, ba, bv, _ = read_binary(path)
        if (bt, ba, bv) != (d_t, d_a, d_v):
            raise DataFormatError(
                f"{path}: file dims ({bt},{ba},{bv}) != manifest "
                f"({d_t},{d_a},{d_v})")
        return records
    return read_csv(path, d_t, d_a, d_v)


def _validate_split(records, manifest, split, expected):
    for i, rec in enumerate(records):
        if not (0 <= rec.label < manifest.classes):
            raise DataFormatError(
                f"{split} record {i}: unknown label {rec.label}")
        for name, vec, want in (("textual", rec.features.f_t, manifest.d_t),
                                ("acoustic", rec.features.f_a, manifest.d_a),
                                ("visual", rec.features.f_v, manifest.d_v)):
            if len(vec) != want:
                raise DataFormatError(
                    f"{split} record {i}: {name} width {len(vec)}, "
                    f"expected {want}")
    if expected is not None and len(records) != expected:
        raise DataFormatError(
            f"{split} split: {len(records)} records, manifest expects {expected}")


def load_dataset(manifest):
    """Load and validate every split named by the manifest."""
    splits = {}
    splits["train"] = read_feature_file(
        manifest.train_path, manifest.d_t, manifest.d_a, manifest.d_v)
    _validate_split(splits["train"], manifest, "train", manifest.expect_train)
    splits["test"] = read_feature_file(
        manifest.test_path, manifest.d_t, manifest.d_a, manifest.d_v)
    _validate_split(splits["test"], manifest, "test", manifest.expect_test)
    if manifest.val_path:
        splits["val"] = read_feature_file(
            manifest.val_path, manifest.d_t, manifest.d_a, manifest.d_v)
        _validate_split(splits["val"], manifest, "val", None)
    return splits


# ---------------------------------------------------------------------------
# grouping and batching


def group_by_video(records):
    """One VideoSequence per video_id, utterances ordered by index."""
    by_video = {}
    for rec in records:
        by_video.setdefault(rec.video_id, []).append(rec)
    sequences = []
    for vid, recs in by_video.items():
        seen = set()
        for rec in recs:
            if rec.utterance_index in seen:
                raise DataFormatError(
                    f"duplicate utterance ({vid!r}, {rec.utterance_index})")
            seen.add(rec.utterance_index)
        recs.sort(key=lambda r: r.utterance_index)
        feats = np.stack([r.concat() for r in recs], axis=1)
        labels = np.array([r.label for r in recs], dtype=np.int64)
        sequences.append(VideoSequence(video_id=vid, features=feats,
                                       labels=labels))
    return sequences


def make_batches(items, batch_size, rng):
    """Deterministic shuffle, then contiguous chunks (last may be short)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = list(items)
    rng.shuffle(order)
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def records_matrix(records):
    """Stack record features into a (d_in, n) batch plus the label vector."""
    F = np.stack([r.concat() for r in records], axis=1)
    y = np.array([r.label for r in records], dtype=np.int64)
    return F, y


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticConfig:
    seed: int = 0
    train_videos: int = 50
    test_videos: int = 20
    utterances_min: int = 2
    utterances_max: int = 8
    d_t: int = 8
    d_a: int = 8
    d_v: int = 8
    classes: int = 2
    latent_dim: int = 4
    noise: float = 0.05
    # label of utterance j derives from the true latent of utterance
    # j - context_shift (clamped at 0); nonzero makes context informative
    context_shift: int = 0

    def validate(self):
        if self.latent_dim > min(self.d_t, self.d_a, self.d_v):
            raise ValueError("latent_dim must not exceed any modality width")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")


def _normal_cdf(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def synth_generate(config):
    """Generate train/test records with known ground-truth latents.

    Per utterance a true latent u ~ N(0, I_k) is drawn; the label is the
    equal-probability quantile bin of a fixed linear score of u (shifted
    back by `context_shift` utterances); each modality is A_m u + b_m
    plus Gaussian noise.  Returns (train, test, truth) where truth maps
    (video_id, utterance_index) -> u.
    """
    config.validate()
    k = config.latent_dim
    mix_rng = RngState(derive_seed(config.seed, 0xA1))
    mixers = {}
    for name, width in (("t", config.d_t), ("a", config.d_a), ("v", config.d_v)):
        mixers[name] = (mix_rng.gaussian(width, k),
                        mix_rng.gaussian(width, 1))
    w = mix_rng.gaussians(k)
    w /= math.sqrt(float(w @ w))

    truth = {}

    def gen_split(tag, n_videos, stream_word):
        rng = RngState(derive_seed(config.seed, stream_word))
        records = []
        span = config.utterances_max - config.utterances_min + 1
        for v in range(n_videos):
            vid = f"{tag}{v:05d}"
            n = config.utterances_min + rng.randint(span)
            latents = [rng.gaussians(k) for _ in range(n)]
            for j in range(n):
                u = latents[j]
                src = latents[max(j - config.context_shift, 0)]
                score = float(w @ src)
                label = min(config.classes - 1,
                            int(config.classes * _normal_cdf(score)))
                feats = {}
                for name, width in (("t", config.d_t), ("a", config.d_a),
                                    ("v", config.d_v)):
                    A, b = mixers[name]
                    x = (A @ u.reshape(-1, 1) + b).reshape(-1)
                    if config.noise > 0:
                        x = x + config.noise * rng.gaussians(width)
                    feats[name] = x
                records.append(UtteranceRecord(
                    video_id=vid, utterance_index=j, label=label,
                    features=ModalityFeatures(f_t=feats["t"], f_a=feats["a"],
                                              f_v=feats["v"])))
                truth[(vid, j)] = u
        return records

    train = gen_split("train", config.train_videos, 0xB2)
    test = gen_split("test", config.test_videos, 0xC3)
    return train, test, truth
