"""Aligned multimodal sequences: in-memory batches, tensor packs, manifests,
and a synthetic generator with controllable shared/unique structure."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

MODALITIES = ("V", "A", "T")
MODALITY_LABELS = {"V": 0, "A": 1, "T": 2}
TASKS = ("msa", "mer")
PACK_MAGIC = b"CSAT"
MANIFEST_FORMAT = "cosa-manifest/1"


class DataError(ValueError):
    pass


def parse_modalities(spec) -> tuple[str, ...]:
    """'VA' / ['V', 'A'] / {'A', 'V'} -> ('V', 'A') in canonical order."""
    if isinstance(spec, str):
        chars = set(spec.upper().replace("+", "").replace(",", ""))
    else:
        chars = {str(s).upper() for s in spec}
    unknown = chars - set(MODALITIES)
    if unknown:
        raise DataError(f"unknown modalities {sorted(unknown)}; use a subset of V, A, T")
    if not chars:
        raise DataError("modality set must be non-empty")
    return tuple(m for m in MODALITIES if m in chars)


@dataclass
class MultimodalBatch:
    """Per-modality ``[B, T, d_i]`` float32 arrays plus labels.

    MSA labels are real sentiment scores in [-3, 3]; MER labels are class
    indices stored as integers.
    """

    features: dict[str, np.ndarray]
    labels: np.ndarray
    ids: np.ndarray
    task: str = "msa"
    active: tuple[str, ...] = MODALITIES
    mask: np.ndarray | None = None

    def __post_init__(self):
        if set(self.features) != set(MODALITIES):
            raise DataError(f"features must have keys {MODALITIES}, got {sorted(self.features)}")
        shapes = {m: self.features[m].shape for m in MODALITIES}
        if any(len(s) != 3 for s in shapes.values()):
            raise DataError(f"modality tensors must be rank 3 [B, T, d], got {shapes}")
        bt = {s[:2] for s in shapes.values()}
        if len(bt) != 1:
            raise DataError(f"modalities disagree on (B, T): {shapes}")
        n, t = bt.pop()
        if len(self.labels) != n or len(self.ids) != n:
            raise DataError(f"{n} samples but {len(self.labels)} labels / {len(self.ids)} ids")
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}")
        if self.mask is None:
            self.mask = np.ones((n, t), dtype=bool)

    def __len__(self):
        return len(self.labels)

    @property
    def seq_len(self) -> int:
        return self.features["V"].shape[1]

    @property
    def widths(self) -> dict[str, int]:
        return {m: self.features[m].shape[2] for m in MODALITIES}

    def take(self, index) -> "MultimodalBatch":
        return replace(
            self,
            features={m: x[index] for m, x in self.features.items()},
            labels=self.labels[index],
            ids=self.ids[index],
            mask=self.mask[index],
        )

    def batches(self, batch_size: int, shuffle_seed: int | None = None, epoch: int = 0) -> Iterator["MultimodalBatch"]:
        """Mini-batches; shuffled by (seed, epoch) when a seed is given. The last short batch is kept."""
        n = len(self)
        if shuffle_seed is None:
            order = np.arange(n)
        else:
            order = np.random.default_rng([int(shuffle_seed), int(epoch)]).permutation(n)
        for start in range(0, n, batch_size):
            yield self.take(order[start:start + batch_size])


def subset_modalities(batch: MultimodalBatch, modalities) -> MultimodalBatch:
    """Zero out and deactivate every modality not in ``modalities``."""
    keep = parse_modalities(modalities)
    features = {
        m: (x if m in keep else np.zeros_like(x)) for m, x in batch.features.items()
    }
    return replace(batch, features=features, active=keep)


# ---------------------------------------------------------------------------
# tensor packs: "CSAT" | u8 rank | u64 dims | little-endian f32 payload


def write_pack(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(PACK_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def read_pack(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read tensor pack {path}: {exc}") from exc
    if raw[:4] != PACK_MAGIC:
        raise DataError(f"{path}: not a tensor pack (magic {raw[:4]!r})")
    rank = raw[4]
    head = 5 + 8 * rank
    dims = struct.unpack(f"<{rank}Q", raw[5:head])
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    if len(raw) - head != expected:
        raise DataError(
            f"{path}: payload has {len(raw) - head} bytes, expected {expected} for shape {dims}"
        )
    return np.frombuffer(raw, dtype="<f4", offset=head).reshape(dims).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticSpec:
    """Latent-trajectory generator.

    Each sample has a shared trajectory ``s(t)`` and one unique trajectory per
    modality. Every latent dimension is ``level + amp * sin(2 pi f t / T + phase)``.
    Modality ``i`` observes ``offset_i + A_i s(t) + B_i u_i(t) + noise``; the label
    mixes the frame-mean of ``s`` and of every ``u_i``.
    """

    seed: int = 0
    task: str = "msa"
    sizes: dict = field(default_factory=lambda: {"train": 2000, "valid": 250, "test": 250})
    seq_len: int = 20
    widths: dict = field(default_factory=lambda: {"V": 16, "A": 16, "T": 32})
    shared_dim: int = 4
    unique_dim: int = 4
    noise: float = 0.1
    static_scale: float = 1.0
    shared_weight: float = 1.0
    unique_weight: float = 1.0
    label_scale: float = 0.75
    num_classes: int = 4

    def validate(self) -> None:
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}")
        if self.seq_len < 2:
            raise DataError("seq_len must be >= 2")
        if set(self.widths) != set(MODALITIES) or min(self.widths.values()) < 1:
            raise DataError(f"widths must give a positive width for each of {MODALITIES}")
        if self.shared_dim < 1 or self.unique_dim < 0:
            raise DataError("shared_dim must be >= 1 and unique_dim >= 0")
        if min(self.sizes.values()) < 1:
            raise DataError("every split needs at least one sample")
        if self.noise < 0 or self.static_scale < 0:
            raise DataError("noise and static_scale must be non-negative")
        if self.task == "mer" and self.num_classes < 2:
            raise DataError("MER needs at least two classes")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def _trajectories(rng, n, dim, seq_len):
    level = rng.standard_normal((n, 1, dim))
    amp = rng.uniform(0.5, 1.5, (n, 1, dim))
    freq = rng.uniform(0.5, 1.5, (n, 1, dim))
    phase = rng.uniform(0, 2 * np.pi, (n, 1, dim))
    t = np.arange(seq_len).reshape(1, seq_len, 1)
    return level + amp * np.sin(2 * np.pi * freq * t / seq_len + phase)


@dataclass
class SyntheticWorld:
    """The fixed (seed-drawn) mixing matrices and label directions of a spec."""

    spec: SyntheticSpec
    offsets: dict
    shared_mix: dict
    unique_mix: dict
    shared_dir: np.ndarray
    unique_dir: dict

    @classmethod
    def from_spec(cls, spec: SyntheticSpec) -> "SyntheticWorld":
        spec.validate()
        rng = np.random.default_rng([spec.seed, 0])
        out_dim = spec.num_classes if spec.task == "mer" else 1
        offsets, shared_mix, unique_mix, unique_dir = {}, {}, {}, {}
        for m in MODALITIES:
            d = spec.widths[m]
            offsets[m] = spec.static_scale * rng.standard_normal(d)
            shared_mix[m] = rng.standard_normal((d, spec.shared_dim)) / np.sqrt(spec.shared_dim)
            unique_mix[m] = rng.standard_normal((d, spec.unique_dim)) / np.sqrt(max(spec.unique_dim, 1))
        shared_dir = _unit_columns(rng.standard_normal((spec.shared_dim, out_dim)))
        for m in MODALITIES:
            unique_dir[m] = _unit_columns(rng.standard_normal((spec.unique_dim, out_dim)))
        return cls(spec, offsets, shared_mix, unique_mix, shared_dir, unique_dir)

    def sample_latents(self, split: str, n: int):
        spec = self.spec
        rng = np.random.default_rng([spec.seed, 1, _split_code(split)])
        shared = _trajectories(rng, n, spec.shared_dim, spec.seq_len)
        unique = {m: _trajectories(rng, n, spec.unique_dim, spec.seq_len) for m in MODALITIES}
        noise = {m: rng.standard_normal((n, spec.seq_len, spec.widths[m])) for m in MODALITIES}
        return shared, unique, noise

    def observe(self, shared, unique, noise) -> dict[str, np.ndarray]:
        spec = self.spec
        return {
            m: (
                self.offsets[m]
                + shared @ self.shared_mix[m].T
                + unique[m] @ self.unique_mix[m].T
                + spec.noise * noise[m]
            ).astype(np.float32)
            for m in MODALITIES
        }

    def scores(self, shared, unique) -> np.ndarray:
        spec = self.spec
        score = spec.shared_weight * shared.mean(axis=1) @ self.shared_dir
        for m in MODALITIES:
            score = score + spec.unique_weight * unique[m].mean(axis=1) @ self.unique_dir[m]
        return spec.label_scale * score

    def labels(self, shared, unique) -> np.ndarray:
        score = self.scores(shared, unique)
        if self.spec.task == "msa":
            return np.clip(score[:, 0], -3.0, 3.0).astype(np.float32)
        return score.argmax(axis=1).astype(np.int64)

    def split(self, split: str, n: int, id_offset: int = 0) -> MultimodalBatch:
        shared, unique, noise = self.sample_latents(split, n)
        return MultimodalBatch(
            features=self.observe(shared, unique, noise),
            labels=self.labels(shared, unique),
            ids=np.arange(id_offset, id_offset + n),
            task=self.spec.task,
        )


def _unit_columns(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=0, keepdims=True)


def _split_code(split: str) -> int:
    return {"train": 0, "valid": 1, "test": 2}.get(split, 3 + sum(map(ord, split)))


def generate_synthetic(spec: SyntheticSpec, out_dir=None) -> "Dataset":
    """Build every split of ``spec``; also write packs and manifest when ``out_dir`` is given."""
    world = SyntheticWorld.from_spec(spec)
    splits, offset = {}, 0
    for name, n in spec.sizes.items():
        splits[name] = world.split(name, n, id_offset=offset)
        offset += n
    dataset = Dataset(
        task=spec.task,
        splits=splits,
        seq_len=spec.seq_len,
        num_classes=spec.num_classes if spec.task == "mer" else None,
        generator={**asdict(spec), "hash": spec.digest()},
    )
    if out_dir is not None:
        dataset.save(out_dir)
    return dataset


# ---------------------------------------------------------------------------
# datasets and manifests


@dataclass
class Dataset:
    task: str
    splits: dict[str, MultimodalBatch]
    seq_len: int
    num_classes: int | None = None
    generator: dict | None = None

    @property
    def widths(self) -> dict[str, int]:
        return next(iter(self.splits.values())).widths

    def manifest(self) -> dict:
        doc = {
            "format": MANIFEST_FORMAT,
            "task": self.task,
            "seq_len": self.seq_len,
            "widths": self.widths,
            "num_classes": self.num_classes,
            "splits": {
                name: {
                    "size": len(b),
                    "files": {**{m: f"{name}_{m}.csat" for m in MODALITIES}, "labels": f"{name}_labels.csat"},
                }
                for name, b in self.splits.items()
            },
        }
        if self.generator is not None:
            doc["generator"] = self.generator
        return doc

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        doc = self.manifest()
        for name, b in self.splits.items():
            files = doc["splits"][name]["files"]
            for m in MODALITIES:
                write_pack(out / files[m], b.features[m])
            write_pack(out / files["labels"], b.labels.astype(np.float32))
        path = out / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.manifest(), sort_keys=True, default=str).encode())
        for name in sorted(self.splits):
            b = self.splits[name]
            for m in MODALITIES:
                h.update(np.ascontiguousarray(b.features[m]).tobytes())
            h.update(np.ascontiguousarray(b.labels).tobytes())
        return h.hexdigest()[:16]


def validate_manifest(doc: dict) -> None:
    if doc.get("format") != MANIFEST_FORMAT:
        raise DataError(f"manifest format must be {MANIFEST_FORMAT!r}, got {doc.get('format')!r}")
    if doc.get("task") not in TASKS:
        raise DataError(f"manifest task must be one of {TASKS}")
    widths = doc.get("widths", {})
    if set(widths) != set(MODALITIES):
        raise DataError(f"manifest widths must cover {MODALITIES}")
    if not isinstance(doc.get("seq_len"), int) or doc["seq_len"] < 2:
        raise DataError("manifest seq_len must be an integer >= 2")
    if doc["task"] == "mer" and not (isinstance(doc.get("num_classes"), int) and doc["num_classes"] >= 2):
        raise DataError("MER manifest needs num_classes >= 2")
    if not doc.get("splits"):
        raise DataError("manifest declares no splits")
    for name, split in doc["splits"].items():
        files = split.get("files", {})
        missing = [k for k in (*MODALITIES, "labels") if k not in files]
        if missing:
            raise DataError(f"split {name!r} lacks files for {missing}")


def _fit_length(x: np.ndarray, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    n, t = x.shape[:2]
    mask = np.zeros((n, seq_len), dtype=bool)
    mask[:, :min(t, seq_len)] = True
    if t >= seq_len:
        return x[:, :seq_len], mask
    pad = np.zeros((n, seq_len - t) + x.shape[2:], dtype=x.dtype)
    return np.concatenate([x, pad], axis=1), mask


def load_dataset(manifest_path) -> Dataset:
    """Read a manifest and its packs. Sequences are truncated or zero-padded to
    the manifest length; the resulting validity mask is kept on each batch."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    validate_manifest(doc)
    root = manifest_path.parent
    splits, offset = {}, 0
    for name, split in doc["splits"].items():
        files = split["files"]
        feats, mask = {}, None
        for m in MODALITIES:
            x = read_pack(root / files[m])
            if x.ndim != 3 or x.shape[0] != split["size"] or x.shape[2] != doc["widths"][m]:
                raise DataError(
                    f"{root / files[m]}: shape {x.shape} does not match manifest "
                    f"[{split['size']}, T, {doc['widths'][m]}]"
                )
            feats[m], m_mask = _fit_length(x, doc["seq_len"])
            mask = m_mask if mask is None else mask & m_mask
        labels = read_pack(root / files["labels"]).reshape(-1)
        if len(labels) != split["size"]:
            raise DataError(f"{root / files['labels']}: {len(labels)} labels, manifest says {split['size']}")
        if doc["task"] == "mer":
            labels = labels.astype(np.int64)
            if labels.min() < 0 or labels.max() >= doc["num_classes"]:
                raise DataError(f"{root / files['labels']}: class index outside [0, {doc['num_classes']})")
        elif np.abs(labels).max() > 3.0:
            raise DataError(f"{root / files['labels']}: sentiment labels outside [-3, 3]")
        splits[name] = MultimodalBatch(
            features=feats, labels=labels, ids=np.arange(offset, offset + len(labels)),
            task=doc["task"], mask=mask,
        )
        offset += len(labels)
    return Dataset(
        task=doc["task"], splits=splits, seq_len=doc["seq_len"],
        num_classes=doc.get("num_classes"), generator=doc.get("generator"),
    )
