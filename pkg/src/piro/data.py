"""Multi-view datasets: synthetic generation, manifest files, pair sampling."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .io import atomic_write_bytes, atomic_write_text

log = logging.getLogger(__name__)

VECTOR_MAGIC = b"PIROVEC1"
HEADER = struct.Struct("<8sQ")  # magic, dim -> 16 bytes
SPLITS = ("train", "test")


class ManifestError(ValueError):
    pass


@dataclass
class ObjectRecord:
    object_id: str
    category_id: str
    views: np.ndarray
    split: str = "train"

    @property
    def num_views(self) -> int:
        return self.views.shape[0]


@dataclass
class Dataset:
    categories: dict[str, str]
    objects: list[ObjectRecord]

    def __post_init__(self):
        if not self.objects:
            raise ValueError("no objects")
        seen = set()
        dim = None
        for obj in self.objects:
            if obj.object_id in seen:
                raise ValueError(f"duplicate object id {obj.object_id!r}")
            seen.add(obj.object_id)
            if obj.category_id not in self.categories:
                raise ValueError(f"object {obj.object_id!r} has unknown category {obj.category_id!r}")
            if obj.split not in SPLITS:
                raise ValueError(f"object {obj.object_id!r} has split {obj.split!r}")
            if obj.views.ndim != 2 or obj.views.shape[0] < 1:
                raise ValueError(f"object {obj.object_id!r} needs at least one view")
            if dim is None:
                dim = obj.views.shape[1]
            elif obj.views.shape[1] != dim:
                raise ValueError(f"object {obj.object_id!r} has view dim {obj.views.shape[1]}, expected {dim}")
        unused = set(self.categories) - {o.category_id for o in self.objects}
        if unused:
            raise ValueError(f"categories without objects: {sorted(unused)}")
        self._index = {c: i for i, c in enumerate(self.categories)}

    @property
    def input_dim(self) -> int:
        return self.objects[0].views.shape[1]

    @property
    def category_ids(self) -> list[str]:
        return list(self.categories)

    def category_index(self, category_id: str) -> int:
        return self._index[category_id]

    def split(self, name: str) -> list[ObjectRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [o for o in self.objects if o.split == name]

    def equals(self, other: "Dataset") -> bool:
        if self.categories != other.categories or len(self.objects) != len(other.objects):
            return False
        return all(
            a.object_id == b.object_id and a.category_id == b.category_id and a.split == b.split
            and a.views.shape == b.views.shape and np.array_equal(a.views, b.views)
            for a, b in zip(self.objects, other.objects)
        )


# ---------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class SyntheticConfig:
    num_categories: int = 10
    objects_per_category: int = 8
    views_per_object: int = 8
    input_dim: int = 32
    noise: float = 0.05
    seed: int = 0
    object_scale: float = 0.5
    pose_scale: float = 0.5
    test_fraction: float = 0.25

    def validate(self) -> None:
        if self.num_categories < 2:
            raise ValueError("num_categories must be >= 2")
        if self.objects_per_category < 2:
            raise ValueError("objects_per_category must be >= 2 (pair sampling draws two objects per category)")
        if self.views_per_object < 2:
            raise ValueError("views_per_object must be >= 2")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.noise < 0 or self.object_scale <= 0 or self.pose_scale < 0:
            raise ValueError("noise and pose_scale must be >= 0, object_scale > 0")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in [0, 1)")


def pose_transforms(num_views: int, dim: int, pose_scale: float, rng: np.random.Generator) -> np.ndarray:
    """One orthogonal matrix per view index, exp of a random skew-symmetric
    generator; ``pose_scale`` sets the typical rotation angle."""
    out = np.empty((num_views, dim, dim))
    for k in range(num_views):
        a = rng.normal(size=(dim, dim))
        skew = (a - a.T) * (pose_scale / np.sqrt(2.0 * dim))
        out[k] = expm(skew)
    return out


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """View k of object j in category i is R_k (p_i + s_ij) + noise.

    Prototypes p_i ~ N(0, I); signatures s_ij ~ N(0, object_scale^2 I), so for
    object_scale < 1 same-category objects sit closer than categories do.
    """
    config.validate()
    C, M, V, D = config.num_categories, config.objects_per_category, config.views_per_object, config.input_dim
    rng = np.random.default_rng(config.seed)
    prototypes = rng.normal(size=(C, D))
    signatures = rng.normal(size=(C, M, D)) * config.object_scale
    rotations = pose_transforms(V, D, config.pose_scale, rng)
    n_test = int(np.floor(M * config.test_fraction))
    categories = {f"c{i:03d}": f"category_{i}" for i in range(C)}
    objects = []
    for i, cat in enumerate(categories):
        for j in range(M):
            latent = prototypes[i] + signatures[i, j]
            views = np.einsum("kde,e->kd", rotations, latent)
            views = views + rng.normal(size=(V, D)) * config.noise
            split = "test" if j >= M - n_test else "train"
            objects.append(ObjectRecord(f"{cat}_o{j:03d}", cat, views, split))
    return Dataset(categories, objects)


# ---------------------------------------------------------------------------
# manifests

def write_vector(path: Path, vec: np.ndarray) -> None:
    vec = np.ascontiguousarray(vec, dtype="<f8")
    atomic_write_bytes(path, HEADER.pack(VECTOR_MAGIC, vec.size) + vec.tobytes())


def read_vector(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise ValueError(f"{path}: truncated vector file")
    magic, dim = HEADER.unpack_from(raw)
    if magic != VECTOR_MAGIC:
        raise ValueError(f"{path}: bad magic")
    if len(raw) != HEADER.size + 8 * dim:
        raise ValueError(f"{path}: expected {dim} values, file has {(len(raw) - HEADER.size) / 8}")
    return np.frombuffer(raw, dtype="<f8", offset=HEADER.size).astype(np.float64)


def sidecar_path(manifest: Path) -> Path:
    return Path(manifest).with_name("categories.json")


def save_manifest(dataset: Dataset, out_dir, name: str = "manifest.tsv") -> Path:
    """Write ``out_dir/name``, ``out_dir/categories.json`` and one vector file
    per view under ``out_dir/views``; paths in the manifest are relative."""
    out_dir = Path(out_dir)
    lines = []
    for obj in dataset.objects:
        rel = []
        for k, view in enumerate(obj.views):
            path = Path("views") / f"{obj.object_id}_v{k:03d}.f64"
            write_vector(out_dir / path, view)
            rel.append(path.as_posix())
        lines.append("\t".join([obj.object_id, obj.category_id, obj.split, ",".join(rel)]))
    manifest = out_dir / name
    atomic_write_text(manifest, "\n".join(lines) + "\n")
    atomic_write_text(sidecar_path(manifest), json.dumps(dataset.categories, indent=2) + "\n")
    return manifest


def load_manifest(path) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"{path}: manifest not found")
    sidecar = sidecar_path(path)
    categories: dict[str, str] = {}
    if sidecar.is_file():
        try:
            categories = {str(k): str(v) for k, v in json.loads(sidecar.read_text()).items()}
        except (json.JSONDecodeError, AttributeError) as exc:
            raise ManifestError(f"{sidecar}: malformed category sidecar: {exc}") from None
    objects: list[ObjectRecord] = []
    seen: dict[str, int] = {}
    dim = None
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4 or not all(fields):
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields")
        object_id, category_id, split, paths = fields
        if split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: split must be one of {SPLITS}, got {split!r}")
        if object_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate object id {object_id!r} (first on line {seen[object_id]})")
        seen[object_id] = lineno
        if sidecar.is_file() and category_id not in categories:
            raise ManifestError(f"{path}:{lineno}: category {category_id!r} missing from {sidecar.name}")
        categories.setdefault(category_id, category_id)
        views = []
        for rel in paths.split(","):
            view_path = path.parent / rel
            if not view_path.is_file():
                raise ManifestError(f"{path}:{lineno}: view file {rel!r} not found")
            try:
                vec = read_vector(view_path)
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ManifestError(f"{path}:{lineno}: view {rel!r} has dimension {vec.size}, expected {dim}")
            views.append(vec)
        objects.append(ObjectRecord(object_id, category_id, np.stack(views), split))
    if not objects:
        raise ManifestError(f"{path}: no objects")
    try:
        return Dataset(categories, objects)
    except ValueError as exc:
        raise ManifestError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# pair sampling

@dataclass
class Pair:
    a: ObjectRecord
    b: ObjectRecord
    views_a: np.ndarray
    views_b: np.ndarray


@dataclass
class PairBatch:
    pairs: list[Pair] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)


def default_num_views(objects: list[ObjectRecord], cap: int = 4) -> int:
    return min(cap, min(o.num_views for o in objects))


def _sample_views(obj: ObjectRecord, V: int, rng: np.random.Generator) -> np.ndarray:
    if obj.num_views >= V:
        return rng.choice(obj.num_views, size=V, replace=False)
    log.warning("object %s has %d views < V=%d; sampling with replacement", obj.object_id, obj.num_views, V)
    return rng.choice(obj.num_views, size=V, replace=True)


def eligible_categories(dataset: Dataset, split: str = "train") -> list[tuple[str, list[ObjectRecord]]]:
    groups: dict[str, list[ObjectRecord]] = {c: [] for c in dataset.categories}
    for obj in dataset.split(split):
        groups[obj.category_id].append(obj)
    return [(c, objs) for c, objs in groups.items() if len(objs) >= 2]


def sample_pairs(dataset: Dataset, V: int, batch_pairs: int, rng: np.random.Generator,
                 split: str = "train") -> PairBatch:
    """Uniform category, then two distinct objects of it, then V views each."""
    if V < 1 or batch_pairs < 1:
        raise ValueError("V and batch_pairs must be >= 1")
    eligible = eligible_categories(dataset, split)
    if not eligible:
        raise ValueError(f"no category in the {split} split has >= 2 objects")
    batch = PairBatch()
    for _ in range(batch_pairs):
        _, objs = eligible[int(rng.integers(len(eligible)))]
        i, j = rng.choice(len(objs), size=2, replace=False)
        a, b = objs[int(i)], objs[int(j)]
        batch.pairs.append(Pair(a, b, _sample_views(a, V, rng), _sample_views(b, V, rng)))
    return batch
