"""Datasets: in-memory representation, a synthetic generator producing
families of related-but-distinct classification datasets, the on-disk
directory format, and deterministic batch iteration.

A family shares one pool of class-prototype latents and one fixed linear
decoder. Each member dataset picks its own prototypes, applies a
dataset-specific affine style transform plus Gaussian latent noise, and
renders through the decoder. Members therefore share latent structure while
keeping disjoint label spaces.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from mlfd.errors import ConfigError, CorruptionError, FormatError
from mlfd.numerics import Tensor, load_tensor, save_tensor
from mlfd.seeding import generator

SPLITS = ("train", "val", "test")
VAL_FRACTION = 0.1


@dataclass
class LabeledDataset:
    name: str
    inputs: Tensor  # (n, 1, S, S) images or (n, F) vectors
    labels: np.ndarray  # int class ids in [0, num_classes)
    num_classes: int
    splits: dict  # split name -> sorted index array

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.inputs.shape[0]
        if n < 1:
            raise ConfigError(f"dataset {self.name!r}: needs at least one sample")
        if self.num_classes < 1:
            raise ConfigError(f"dataset {self.name!r}: class count must be >= 1")
        if len(self.labels) != n:
            raise ConfigError(f"dataset {self.name!r}: {len(self.labels)} labels for {n} inputs")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError(f"dataset {self.name!r}: label outside [0, {self.num_classes})")
        covered = np.concatenate([np.asarray(self.splits[s], dtype=np.int64) for s in SPLITS])
        if len(np.unique(covered)) != n or len(covered) != n:
            raise ConfigError(f"dataset {self.name!r}: splits must partition all {n} samples")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def split_indices(self, split: str) -> np.ndarray:
        if split not in self.splits:
            raise ConfigError(f"unknown split {split!r}")
        return np.asarray(self.splits[split], dtype=np.int64)

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.split_indices(split)
        return self.inputs.data[idx], self.labels[idx]

    def one_hot(self, labels: np.ndarray) -> np.ndarray:
        out = np.zeros((len(labels), self.num_classes))
        out[np.arange(len(labels)), labels] = 1.0
        return out


@dataclass
class SyntheticFamilySpec:
    m: int = 3
    latent_dim: int = 12
    class_counts: Sequence[int] = (8, 8, 8)
    train_samples: int = 2000
    test_samples: int = 500
    style_scale: float = 0.3
    noise_sigma: float = 0.5
    render: str = "image"  # "image" or "vector"
    image_side: int = 16
    vector_dim: int = 32
    prototype_pool: Optional[int] = None  # defaults to max class count
    master_seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError(f"family needs m >= 1, got {self.m}")
        if len(self.class_counts) != self.m:
            raise ConfigError(f"{len(self.class_counts)} class counts for m={self.m}")
        if any(c < 2 for c in self.class_counts):
            raise ConfigError("every dataset needs at least 2 classes")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be nonnegative")
        if self.render not in ("image", "vector"):
            raise ConfigError(f"render mode must be 'image' or 'vector', got {self.render!r}")
        pool = self.prototype_pool if self.prototype_pool is not None else max(self.class_counts)
        if any(c > pool for c in self.class_counts):
            raise ConfigError(
                f"class count exceeds the {pool} available prototypes; raise prototype_pool"
            )

    @property
    def pool_size(self) -> int:
        return self.prototype_pool if self.prototype_pool is not None else max(self.class_counts)

    @property
    def output_dim(self) -> int:
        return self.image_side**2 if self.render == "image" else self.vector_dim


@dataclass
class BatchPlan:
    batch_size: int = 64
    shuffle_seed: int = 0
    accumulation: int = 1
    interleave: Optional[Sequence[str]] = None  # dataset order for joint training

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.accumulation < 1:
            raise ConfigError(f"accumulation factor must be >= 1, got {self.accumulation}")


@dataclass
class Batch:
    inputs: Tensor
    targets: Tensor  # one-hot, C columns
    indices: np.ndarray


def _styled_prototypes(spec: SyntheticFamilySpec):
    """Shared pool, per-dataset selection, and per-dataset styled prototypes."""
    pool_rng = generator("family", spec.master_seed, "prototypes")
    pool = pool_rng.normal(size=(spec.pool_size, spec.latent_dim))
    per_dataset = []
    for i in range(spec.m):
        sel_rng = generator("family", spec.master_seed, "select", i)
        chosen = np.sort(sel_rng.choice(spec.pool_size, size=spec.class_counts[i], replace=False))
        style_rng = generator("family", spec.master_seed, "style", i)
        mix = style_rng.normal(size=(spec.latent_dim, spec.latent_dim)) / np.sqrt(spec.latent_dim)
        transform = np.eye(spec.latent_dim) + spec.style_scale * mix
        per_dataset.append(pool[chosen] @ transform.T)
    return per_dataset


def family_prototypes(spec: SyntheticFamilySpec) -> list[np.ndarray]:
    """Per-dataset styled prototypes, (C_i, latent_dim) each. Exposes the
    style knob for inspection: cross-dataset prototype distance grows with
    style_scale."""
    return _styled_prototypes(spec)


def _allocate_per_class(total: int, classes: int) -> np.ndarray:
    base, extra = divmod(total, classes)
    counts = np.full(classes, base, dtype=np.int64)
    counts[:extra] += 1
    return counts


def gen_synthetic_family(spec: SyntheticFamilySpec) -> list[LabeledDataset]:
    """Deterministically generate the m related datasets of a family."""
    protos = _styled_prototypes(spec)
    dec_rng = generator("family", spec.master_seed, "decoder")
    decoder = dec_rng.normal(size=(spec.latent_dim, spec.output_dim)) / np.sqrt(spec.latent_dim)

    datasets = []
    for i in range(spec.m):
        c = spec.class_counts[i]
        train_counts = _allocate_per_class(spec.train_samples, c)
        test_counts = _allocate_per_class(spec.test_samples, c)
        sample_rng = generator("family", spec.master_seed, "samples", i)

        latents, labels = [], []
        for cls in range(c):
            count = int(train_counts[cls] + test_counts[cls])
            noise = sample_rng.normal(size=(count, spec.latent_dim)) * spec.noise_sigma
            latents.append(protos[i][cls] + noise)
            labels.append(np.full(count, cls, dtype=np.int64))
        latents = np.concatenate(latents)
        labels = np.concatenate(labels)

        rendered = latents @ decoder
        if spec.render == "image":
            rendered = rendered.reshape(-1, 1, spec.image_side, spec.image_side)

        # class-blocked order -> train/test assignment per class, then a
        # stratified validation carve-out from the train portion
        train_idx, val_idx, test_idx = [], [], []
        offset = 0
        split_rng = generator("family", spec.master_seed, "splits", i)
        for cls in range(c):
            tr, te = int(train_counts[cls]), int(test_counts[cls])
            block = np.arange(offset, offset + tr + te)
            perm = split_rng.permutation(tr + te)
            train_block = block[perm[:tr]]
            test_block = block[perm[tr:]]
            n_val = int(round(tr * VAL_FRACTION))
            val_idx.append(train_block[:n_val])
            train_idx.append(train_block[n_val:])
            test_idx.append(test_block)
            offset += tr + te

        datasets.append(
            LabeledDataset(
                name=f"synth-{i}",
                inputs=Tensor(rendered),
                labels=labels,
                num_classes=c,
                splits={
                    "train": np.sort(np.concatenate(train_idx)),
                    "val": np.sort(np.concatenate(val_idx)),
                    "test": np.sort(np.concatenate(test_idx)),
                },
            )
        )
    return datasets


# ---------------------------------------------------------------------------
# on-disk format: manifest + inputs.tnsr + labels.tnsr + splits
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(d: LabeledDataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    save_tensor(root / "inputs.tnsr", d.inputs)
    save_tensor(root / "labels.tnsr", d.labels.astype(np.float64))
    lines = []
    for split in SPLITS:
        idx = " ".join(str(int(v)) for v in d.split_indices(split))
        lines.append(f"{split}: {idx}")
    (root / "splits").write_text("\n".join(lines) + "\n")
    manifest = {
        "name": d.name,
        "samples": d.n,
        "input_shape": list(d.input_shape),
        "num_classes": d.num_classes,
        "split_sizes": {s: int(len(d.splits[s])) for s in SPLITS},
        "checksums": {
            "inputs.tnsr": _sha256(root / "inputs.tnsr"),
            "labels.tnsr": _sha256(root / "labels.tnsr"),
            "splits": _sha256(root / "splits"),
        },
    }
    (root / "manifest").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> LabeledDataset:
    root = Path(path)
    manifest_path = root / "manifest"
    if not manifest_path.is_file():
        raise FormatError(f"missing manifest in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unparseable manifest in {root}: {exc}") from exc
    for key in ("name", "samples", "input_shape", "num_classes", "split_sizes", "checksums"):
        if key not in manifest:
            raise FormatError(f"manifest in {root} lacks field {key!r}")
    if manifest["num_classes"] < 1:
        raise FormatError(f"manifest in {root} declares num_classes={manifest['num_classes']}")

    for fname, expected in manifest["checksums"].items():
        target = root / fname
        if not target.is_file():
            raise CorruptionError(f"missing data file {target}")
        actual = _sha256(target)
        if actual != expected:
            raise CorruptionError(f"checksum mismatch for {target}")

    inputs = load_tensor(root / "inputs.tnsr")
    labels = load_tensor(root / "labels.tnsr").data.astype(np.int64)
    splits = {}
    for line in (root / "splits").read_text().splitlines():
        if not line.strip():
            continue
        head, _, rest = line.partition(":")
        values = np.array([int(v) for v in rest.split()], dtype=np.int64)
        splits[head.strip()] = values
    return LabeledDataset(
        name=manifest["name"],
        inputs=inputs,
        labels=labels,
        num_classes=int(manifest["num_classes"]),
        splits=splits,
    )


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def iterate_batches(
    d: LabeledDataset, plan: BatchPlan, epoch: int, split: str = "train"
) -> Iterator[Batch]:
    """Shuffled minibatches over one split. The permutation depends only on
    (shuffle_seed, epoch, dataset name); the final short batch is emitted."""
    idx = d.split_indices(split)
    order = generator("batches", plan.shuffle_seed, d.name, split, epoch).permutation(len(idx))
    shuffled = idx[order]
    for start in range(0, len(shuffled), plan.batch_size):
        chosen = shuffled[start : start + plan.batch_size]
        labels = d.labels[chosen]
        yield Batch(
            inputs=Tensor(d.inputs.data[chosen]),
            targets=Tensor(d.one_hot(labels)),
            indices=chosen,
        )
