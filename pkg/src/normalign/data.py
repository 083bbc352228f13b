"""Synthetic multi-modal multi-domain feature datasets.

Clips are class-conditional Gaussian frame features per modality (class mean =
seeded random direction, unit covariance), pushed through a per-domain affine
shift and per-domain per-modality norm scaling. The target domain uses its own
held-out shift and scaling, so a spec can reproduce exactly the pathology the
norm-alignment losses are meant to fix: one modality carrying inflated feature
norms on the sources and a different scale on the target.

On disk a dataset is a directory: ``manifest.json`` (spec, counts, per-blob
CRC32), one raw little-endian float32 blob per modality (row-major
[n_clips, T, d], all splits concatenated in manifest order), and
``labels.csv`` with columns clip_id, domain, verb, noun (verb/noun blank for
the unlabeled target training split). Features are quantized to float32 at
generation time and widened to float64 in memory, so save/load round-trips
are bitwise exact.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class DataFormatError(ValueError):
    """Base for on-disk format violations."""


class VersionError(DataFormatError):
    pass


class TruncationError(DataFormatError):
    pass


class ChecksumError(DataFormatError):
    pass


class ConsistencyError(DataFormatError):
    pass


class LabelHygieneError(RuntimeError):
    """A training-side read of target labels."""


class EmptySplitError(ValueError):
    pass


FORMAT_VERSION = 1
TARGET_TRAIN = "target_train"
TARGET_TEST = "target_test"


@dataclass
class DatasetSpec:
    """Generator parameters for one synthetic multi-source dataset."""

    num_source_domains: int = 3
    modalities: list[str] = field(default_factory=lambda: ["rgb", "audio"])
    feature_dims: dict[str, int] = field(default_factory=lambda: {"rgb": 16, "audio": 16})
    frames_per_clip: int = 4
    num_verbs: int = 4
    num_nouns: int = 4
    clips_per_domain: int = 200
    shift_magnitude: float = 1.0
    # modality -> one factor per source domain plus a final held-out target factor
    norm_scales: dict[str, list[float]] = field(default_factory=dict)
    label_noise: float = 0.0
    class_separation: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.num_source_domains < 1:
            raise ValueError("num_source_domains must be >= 1")
        if not self.modalities:
            raise ValueError("at least one modality required")
        missing = [m for m in self.modalities if m not in self.feature_dims]
        if missing:
            raise ValueError(f"feature_dims missing for {missing}")
        if not (0.0 <= self.label_noise < 1.0):
            raise ValueError("label_noise must be in [0, 1)")
        if not self.norm_scales:
            self.norm_scales = {m: [1.0] * (self.num_source_domains + 1) for m in self.modalities}
        for m in self.modalities:
            scales = self.norm_scales.get(m)
            if scales is None or len(scales) != self.num_source_domains + 1:
                raise ValueError(
                    f"norm_scales[{m!r}] needs {self.num_source_domains + 1} entries "
                    f"(one per source domain plus target)"
                )
            if any(s <= 0 for s in scales):
                raise ValueError(f"norm_scales[{m!r}] must be > 0")

    def source_split_names(self) -> list[str]:
        return [f"source_{k}" for k in range(self.num_source_domains)]

    def split_names(self) -> list[str]:
        return self.source_split_names() + [TARGET_TRAIN, TARGET_TEST]

    def to_dict(self) -> dict:
        return {
            "num_source_domains": self.num_source_domains,
            "modalities": list(self.modalities),
            "feature_dims": dict(self.feature_dims),
            "frames_per_clip": self.frames_per_clip,
            "num_verbs": self.num_verbs,
            "num_nouns": self.num_nouns,
            "clips_per_domain": self.clips_per_domain,
            "shift_magnitude": self.shift_magnitude,
            "norm_scales": {m: list(v) for m, v in self.norm_scales.items()},
            "label_noise": self.label_noise,
            "class_separation": self.class_separation,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetSpec":
        return cls(**doc)


@dataclass
class Split:
    """Clips of one domain slice. Labels are None for the target training split."""

    name: str
    features: dict[str, np.ndarray]  # modality -> [n, T, d] float64 (f32-exact)
    verbs: np.ndarray | None
    nouns: np.ndarray | None

    @property
    def n_clips(self) -> int:
        return next(iter(self.features.values())).shape[0]

    @property
    def labeled(self) -> bool:
        return self.verbs is not None


class FeatureDataset:
    """All splits of one generated dataset plus the label-access guard.

    Every label read goes through ``labels()``, which counts attempts against
    the target training split and refuses them; the trainer reports that
    counter so unsupervised runs can prove they never touched target labels.
    """

    def __init__(self, spec: DatasetSpec, splits: dict[str, Split]):
        self.spec = spec
        self.splits = splits
        self.target_label_attempts = 0

    def split(self, name: str) -> Split:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}; have {list(self.splits)}")
        return self.splits[name]

    def labels(self, split_name: str, indices: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Verb and noun labels of a split; the only sanctioned label accessor."""
        sp = self.split(split_name)
        if split_name == TARGET_TRAIN or not sp.labeled:
            self.target_label_attempts += 1
            raise LabelHygieneError(f"labels of split {split_name!r} are not available for training")
        if indices is None:
            return sp.verbs, sp.nouns
        return sp.verbs[indices], sp.nouns[indices]

    def fetch(self, split_name: str, indices: np.ndarray) -> dict[str, np.ndarray]:
        """Clip features as flat [len(indices)*T, d] row blocks per modality."""
        sp = self.split(split_name)
        out = {}
        for m, arr in sp.features.items():
            sel = arr[indices]
            out[m] = sel.reshape(sel.shape[0] * sel.shape[1], sel.shape[2])
        return out

    def source_pool(self) -> "SourcePool":
        if not hasattr(self, "_source_pool"):
            names = self.spec.source_split_names()
            feats = {
                m: np.concatenate([self.splits[n].features[m] for n in names], axis=0)
                for m in self.spec.modalities
            }
            verbs = np.concatenate([self.splits[n].verbs for n in names])
            nouns = np.concatenate([self.splits[n].nouns for n in names])
            domains = np.concatenate(
                [np.full(self.splits[n].n_clips, k, dtype=np.intp) for k, n in enumerate(names)]
            )
            self._source_pool = SourcePool(feats, verbs, nouns, domains)
        return self._source_pool


@dataclass
class SourcePool:
    """All labeled source clips pooled across domains, for mixed-domain batches."""

    features: dict[str, np.ndarray]  # modality -> [Ns, T, d]
    verbs: np.ndarray
    nouns: np.ndarray
    domains: np.ndarray  # source domain index per clip

    @property
    def n_clips(self) -> int:
        return self.verbs.shape[0]

    def fetch(self, indices: np.ndarray) -> dict[str, np.ndarray]:
        out = {}
        for m, arr in self.features.items():
            sel = arr[indices]
            out[m] = sel.reshape(sel.shape[0] * sel.shape[1], sel.shape[2])
        return out

    def labels(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.verbs[indices], self.nouns[indices]


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def _f32_exact(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32).astype(np.float64)


def generate(spec: DatasetSpec) -> FeatureDataset:
    """Build a dataset deterministically from the spec (bitwise in the seed)."""
    rng = np.random.default_rng(spec.seed)
    k_src = spec.num_source_domains

    verb_dirs = {m: np.stack([_unit(rng, spec.feature_dims[m]) for _ in range(spec.num_verbs)])
                 for m in spec.modalities}
    noun_dirs = {m: np.stack([_unit(rng, spec.feature_dims[m]) for _ in range(spec.num_nouns)])
                 for m in spec.modalities}
    # one shift per (modality, domain); the last domain index is the target
    shifts = {
        m: np.stack([_unit(rng, spec.feature_dims[m]) * spec.shift_magnitude for _ in range(k_src + 1)])
        for m in spec.modalities
    }

    def make_split(name: str, domain_index: int, keep_labels: bool) -> Split:
        n, t = spec.clips_per_domain, spec.frames_per_clip
        true_verbs = rng.integers(0, spec.num_verbs, size=n)
        true_nouns = rng.integers(0, spec.num_nouns, size=n)
        features = {}
        for m in spec.modalities:
            d = spec.feature_dims[m]
            mean = (verb_dirs[m][true_verbs] + noun_dirs[m][true_nouns]) * (spec.class_separation / 2.0)
            frames = mean[:, None, :] + rng.normal(size=(n, t, d))
            frames = frames + shifts[m][domain_index]
            frames = frames * spec.norm_scales[m][domain_index]
            features[m] = _f32_exact(frames)
        verbs, nouns = true_verbs.copy(), true_nouns.copy()
        if spec.label_noise > 0.0:
            flip = rng.random(n) < spec.label_noise
            verbs[flip] = (verbs[flip] + rng.integers(1, spec.num_verbs, size=flip.sum())) % spec.num_verbs
            flip = rng.random(n) < spec.label_noise
            nouns[flip] = (nouns[flip] + rng.integers(1, spec.num_nouns, size=flip.sum())) % spec.num_nouns
        if not keep_labels:
            return Split(name, features, None, None)
        return Split(name, features, verbs, nouns)

    splits: dict[str, Split] = {}
    for k in range(k_src):
        splits[f"source_{k}"] = make_split(f"source_{k}", k, keep_labels=True)
    splits[TARGET_TRAIN] = make_split(TARGET_TRAIN, k_src, keep_labels=False)
    splits[TARGET_TEST] = make_split(TARGET_TEST, k_src, keep_labels=True)
    return FeatureDataset(spec, splits)


# -- persistence ---------------------------------------------------------------


def save(dataset: FeatureDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = dataset.spec
    split_names = spec.split_names()

    modality_docs = []
    for m in spec.modalities:
        blob = b"".join(
            np.ascontiguousarray(dataset.splits[n].features[m], dtype="<f4").tobytes()
            for n in split_names
        )
        (out / f"features_{m}.bin").write_bytes(blob)
        total_clips = sum(dataset.splits[n].n_clips for n in split_names)
        modality_docs.append(
            {
                "name": m,
                "file": f"features_{m}.bin",
                "dim": spec.feature_dims[m],
                "dtype": "float32",
                "shape": [total_clips, spec.frames_per_clip, spec.feature_dims[m]],
                "crc32": zlib.crc32(blob),
            }
        )

    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "splits": [{"name": n, "n_clips": dataset.splits[n].n_clips} for n in split_names],
        "modalities": modality_docs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "domain", "verb", "noun"])
        clip_id = 0
        for n in split_names:
            sp = dataset.splits[n]
            for i in range(sp.n_clips):
                if sp.labeled:
                    writer.writerow([clip_id, n, int(sp.verbs[i]), int(sp.nouns[i])])
                else:
                    writer.writerow([clip_id, n, "", ""])
                clip_id += 1


def load(in_dir: str | Path) -> FeatureDataset:
    src = Path(in_dir)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise ConsistencyError(f"{src}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(
            f"{src}: format version {manifest.get('format_version')} != {FORMAT_VERSION}"
        )
    spec = DatasetSpec.from_dict(manifest["spec"])
    split_names = spec.split_names()
    split_counts = {doc["name"]: doc["n_clips"] for doc in manifest["splits"]}
    if list(split_counts) != split_names:
        raise ConsistencyError(f"{src}: manifest splits {list(split_counts)} != {split_names}")

    listed = {doc["name"] for doc in manifest["modalities"]}
    if listed != set(spec.modalities):
        raise ConsistencyError(f"{src}: manifest modalities {sorted(listed)} != spec {spec.modalities}")
    on_disk = {p.name for p in src.glob("features_*.bin")}
    expected_files = {doc["file"] for doc in manifest["modalities"]}
    if on_disk != expected_files:
        raise ConsistencyError(
            f"{src}: feature blobs on disk {sorted(on_disk)} != manifest {sorted(expected_files)}"
        )

    per_modality: dict[str, np.ndarray] = {}
    for doc in manifest["modalities"]:
        blob = (src / doc["file"]).read_bytes()
        n_total, t, d = doc["shape"]
        expected_bytes = n_total * t * d * 4
        if len(blob) != expected_bytes:
            raise TruncationError(
                f"{src}/{doc['file']}: {len(blob)} bytes, expected {expected_bytes}"
            )
        if zlib.crc32(blob) != doc["crc32"]:
            raise ChecksumError(f"{src}/{doc['file']}: CRC32 mismatch")
        per_modality[doc["name"]] = (
            np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(n_total, t, d)
        )

    verbs_all, nouns_all, domains_all = _read_labels(src / "labels.csv")
    total = sum(split_counts.values())
    if len(domains_all) != total:
        raise ConsistencyError(f"{src}/labels.csv: {len(domains_all)} rows != {total} clips")

    splits: dict[str, Split] = {}
    offset = 0
    for name in split_names:
        n = split_counts[name]
        rows = slice(offset, offset + n)
        if any(dom != name for dom in domains_all[rows]):
            raise ConsistencyError(f"{src}/labels.csv: domain column disagrees with manifest at {name}")
        features = {m: per_modality[m][rows] for m in spec.modalities}
        if name == TARGET_TRAIN:
            splits[name] = Split(name, features, None, None)
        else:
            verbs = np.array(verbs_all[rows.start : rows.stop], dtype=np.intp)
            nouns = np.array(nouns_all[rows.start : rows.stop], dtype=np.intp)
            if np.any(verbs < 0) or np.any(nouns < 0):
                raise ConsistencyError(f"{src}/labels.csv: missing labels in labeled split {name}")
            splits[name] = Split(name, features, verbs, nouns)
        offset += n
    return FeatureDataset(spec, splits)


def _read_labels(path: Path) -> tuple[list[int], list[int], list[str]]:
    if not path.exists():
        raise ConsistencyError(f"{path}: missing labels file")
    verbs, nouns, domains = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["clip_id", "domain", "verb", "noun"]:
            raise ConsistencyError(f"{path}: unexpected header {header}")
        for row in reader:
            domains.append(row[1])
            verbs.append(int(row[2]) if row[2] != "" else -1)
            nouns.append(int(row[3]) if row[3] != "" else -1)
    return verbs, nouns, domains


# -- batching -------------------------------------------------------------------


@dataclass
class Batch:
    """Indices plus flattened features; labels stay behind the dataset accessor."""

    split: str
    indices: np.ndarray
    features: dict[str, np.ndarray]  # modality -> [(b*T), d]
    domains: np.ndarray              # per-clip domain index (K for target)

    @property
    def n_clips(self) -> int:
        return self.indices.shape[0]


def _perm_rng(seed: int, epoch: int, stream: str) -> np.random.Generator:
    return np.random.default_rng((seed, epoch, zlib.crc32(stream.encode())))


def batches(
    dataset: FeatureDataset,
    split_name: str,
    batch_size: int,
    seed: int,
    epoch: int,
) -> Iterator[Batch]:
    """Seeded shuffled mini-batches over one split; last partial batch kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    sp = dataset.split(split_name)
    n = sp.n_clips
    if n == 0:
        raise EmptySplitError(f"split {split_name!r} is empty")
    k_src = dataset.spec.num_source_domains
    domain_index = (
        int(split_name.removeprefix("source_")) if split_name.startswith("source_") else k_src
    )
    perm = _perm_rng(seed, epoch, split_name).permutation(n)
    for lo in range(0, n, batch_size):
        idx = perm[lo : lo + batch_size]
        yield Batch(
            split=split_name,
            indices=idx,
            features=dataset.fetch(split_name, idx),
            domains=np.full(idx.shape[0], domain_index, dtype=np.intp),
        )


def source_batches(
    dataset: FeatureDataset, batch_size: int, seed: int, epoch: int
) -> Iterator[Batch]:
    """Mixed-domain batches over the pooled source splits."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    pool = dataset.source_pool()
    if pool.n_clips == 0:
        raise EmptySplitError("source pool is empty")
    perm = _perm_rng(seed, epoch, "source_pool").permutation(pool.n_clips)
    for lo in range(0, pool.n_clips, batch_size):
        idx = perm[lo : lo + batch_size]
        yield Batch(
            split="source_pool",
            indices=idx,
            features=pool.fetch(idx),
            domains=pool.domains[idx],
        )


def paired_batches(
    dataset: FeatureDataset, batch_size: int, seed: int, epoch: int
) -> Iterator[tuple[Batch, Batch]]:
    """Zip source-pool and target-train batches; the shorter side cycles."""
    src = list(source_batches(dataset, batch_size, seed, epoch))
    tgt = list(batches(dataset, TARGET_TRAIN, batch_size, seed, epoch))
    steps = max(len(src), len(tgt))
    for i in range(steps):
        yield src[i % len(src)], tgt[i % len(tgt)]
