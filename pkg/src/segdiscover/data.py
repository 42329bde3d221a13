"""Scene data: synthetic cloud generation, scan-format IO, class splits.

Synthetic scenes stand in for LiDAR captures at desk scale. Every class
is an archetype with a rotation-invariant geometric signature (distance
from the vertical axis, height band, spread), so classes stay separable
under the augmentations used for the swapped prediction task. Scenes can
randomly omit classes to exercise the missing-class condition the queue
exists for.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Label value a point carries once its (novel) ground truth is hidden.
UNLABELLED = -1


@dataclass
class LabelledCloud:
    """One scene: point coordinates in meters with per-point class ids."""

    coords: np.ndarray  # (m, 3) float64
    labels: np.ndarray  # (m,) int64
    scene_id: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be (m, 3), got {self.coords.shape}")
        if self.labels.shape != (self.coords.shape[0],):
            raise ValueError("labels length must match point count")
        if self.coords.shape[0] < 1:
            raise ValueError("a cloud needs at least one point")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords must be finite")

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class SplitSpec:
    """Partition of a dataset's class ids into base (labelled) and novel."""

    dataset: str
    name: str
    base_classes: frozenset
    novel_classes: frozenset

    def __post_init__(self):
        if self.base_classes & self.novel_classes:
            raise ValueError(f"{self.name}: base and novel classes overlap")
        if not self.novel_classes:
            raise ValueError(f"{self.name}: need at least one novel class")

    @property
    def n_novel(self) -> int:
        return len(self.novel_classes)

    @property
    def all_classes(self) -> frozenset:
        return self.base_classes | self.novel_classes


@dataclass(frozen=True)
class ClassArchetype:
    """Geometry of one synthetic class.

    Blob classes scatter Gaussian clusters at a fixed distance from the
    vertical axis and a fixed height, with a random azimuth per scene.
    A planar archetype fills a horizontal disc (ground). ``presence``
    is the chance the class appears in a given scene at all; rare
    classes are what the class-balanced queue exists for.
    """

    name: str
    share: float
    spread: float
    radius: float
    height: float
    n_blobs: int = 1
    planar: bool = False
    presence: float = 1.0


@dataclass(frozen=True)
class SyntheticConfig:
    archetypes: tuple
    n_scenes: int
    points_per_scene: int
    seed: int = 0
    scene_dropout: float = 0.0  # chance a class is absent from a scene
    novel_classes: tuple = ()

    def __post_init__(self):
        if self.n_scenes < 1 or self.points_per_scene < 1:
            raise ValueError("need at least one scene and one point per scene")
        if not self.archetypes:
            raise ValueError("need at least one class archetype")
        shares = sum(a.share for a in self.archetypes)
        if abs(shares - 1.0) > 1e-9:
            raise ValueError(f"class shares must sum to 1, got {shares}")
        if any(a.spread <= 0 for a in self.archetypes):
            raise ValueError("spreads must be positive")
        if not (0.0 <= self.scene_dropout < 1.0):
            raise ValueError("scene_dropout must be in [0, 1)")
        for c in self.novel_classes:
            if not (0 <= c < len(self.archetypes)):
                raise ValueError(f"novel class id {c} out of range")

    @property
    def n_classes(self) -> int:
        return len(self.archetypes)

    def split(self) -> SplitSpec:
        novel = frozenset(self.novel_classes)
        base = frozenset(range(self.n_classes)) - novel
        return SplitSpec("synthetic", "synthetic", base, novel)

    def class_names(self) -> dict:
        return {i: a.name for i, a in enumerate(self.archetypes)}


def _sample_class_points(arch: ClassArchetype, count: int, rng: np.random.Generator) -> np.ndarray:
    if arch.planar:
        r = arch.radius * np.sqrt(rng.random(count))
        theta = rng.uniform(0.0, 2.0 * np.pi, count)
        z = rng.normal(arch.height, arch.spread, count)
        return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])
    per_blob = np.full(arch.n_blobs, count // arch.n_blobs)
    per_blob[: count % arch.n_blobs] += 1
    chunks = []
    for n in per_blob:
        theta = rng.uniform(0.0, 2.0 * np.pi)
        center = np.array([arch.radius * np.cos(theta), arch.radius * np.sin(theta), arch.height])
        chunks.append(center + rng.normal(0.0, arch.spread, (n, 3)))
    return np.concatenate(chunks, axis=0)


def generate_synthetic(cfg: SyntheticConfig) -> list[LabelledCloud]:
    """Reproducible scene list; scene 0 always contains every class so the
    dataset as a whole covers the label set even under dropout."""
    rng = np.random.default_rng(cfg.seed)
    shares = np.array([a.share for a in cfg.archetypes])
    appear = np.array([a.presence * (1.0 - cfg.scene_dropout) for a in cfg.archetypes])
    clouds = []
    for i in range(cfg.n_scenes):
        present = np.ones(cfg.n_classes, dtype=bool)
        if np.any(appear < 1.0) and i > 0:
            present = rng.random(cfg.n_classes) < appear
            if not present.any():
                present[int(np.argmax(shares))] = True
        p = shares * present
        counts = rng.multinomial(cfg.points_per_scene, p / p.sum())
        coords, labels = [], []
        for cls, count in enumerate(counts):
            if count == 0:
                continue
            coords.append(_sample_class_points(cfg.archetypes[cls], int(count), rng))
            labels.append(np.full(int(count), cls, dtype=np.int64))
        xyz = np.concatenate(coords, axis=0)
        lab = np.concatenate(labels)
        order = rng.permutation(xyz.shape[0])
        clouds.append(LabelledCloud(xyz[order], lab[order], scene_id=f"{i:04d}"))
    return clouds


def toy_discovery_config(seed: int = 0, n_scenes: int = 200, points_per_scene: int = 512) -> SyntheticConfig:
    """Five classes, three base plus two novel, separable by radius/height."""
    archetypes = (
        ClassArchetype("ground", share=0.30, spread=0.1, radius=10.0, height=0.0, planar=True),
        ClassArchetype("hub", share=0.18, spread=0.4, radius=3.0, height=2.5),
        ClassArchetype("ring", share=0.16, spread=0.5, radius=7.0, height=2.0, n_blobs=2),
        # novel classes are imbalanced and often missing from a scene,
        # the regime the queue and equipartition interact in
        ClassArchetype("mast", share=0.22, spread=0.45, radius=5.0, height=5.0, presence=0.85),
        ClassArchetype("crown", share=0.14, spread=0.45, radius=1.5, height=7.5, presence=0.45),
    )
    return SyntheticConfig(
        archetypes=archetypes,
        n_scenes=n_scenes,
        points_per_scene=points_per_scene,
        seed=seed,
        novel_classes=(3, 4),
    )


def make_archetypes(n_classes: int, seed: int = 0) -> tuple:
    """Programmatic archetype set: one ground plane plus separated blobs."""
    if n_classes < 1:
        raise ValueError("need at least one class")
    rng = np.random.default_rng(seed)
    archetypes = [ClassArchetype("ground", 0.0, 0.2, 9.0, 0.0, planar=True)]
    for i in range(1, n_classes):
        archetypes.append(
            ClassArchetype(
                f"blob{i}",
                0.0,
                spread=float(rng.uniform(0.4, 0.8)),
                radius=float(2.0 + (i * 2.7) % 7.0),
                height=float(1.5 + 1.4 * i),
                n_blobs=int(rng.integers(1, 3)),
            )
        )
    # Unequal shares, ground heaviest, mimicking LiDAR class imbalance.
    weights = np.array([2.5] + [1.0 + 0.5 * ((i * 7) % 3) for i in range(1, n_classes)])
    shares = weights / weights.sum()
    return tuple(
        ClassArchetype(a.name, float(s), a.spread, a.radius, a.height, a.n_blobs, a.planar)
        for a, s in zip(archetypes, shares)
    )


# ---------------------------------------------------------------------------
# Scan-format IO (SemanticKITTI layout: xyz+remission f32, label u32)
# ---------------------------------------------------------------------------

def read_kitti_scan(bin_path, label_path) -> LabelledCloud:
    """Read one scan/label pair.

    A scan record is four little-endian f32 (x, y, z, remission); the
    remission is discarded. A label is a little-endian u32 whose lower
    16 bits are the class id.
    """
    raw = Path(bin_path).read_bytes()
    if len(raw) == 0:
        raise ValueError(f"{bin_path}: empty scan file")
    if len(raw) % 16 != 0:
        raise ValueError(f"{bin_path}: truncated scan, {len(raw)} bytes is not a multiple of 16")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    lab_raw = Path(label_path).read_bytes()
    if len(lab_raw) % 4 != 0:
        raise ValueError(f"{label_path}: truncated label file")
    labels = np.frombuffer(lab_raw, dtype="<u4")
    if labels.shape[0] != pts.shape[0]:
        raise ValueError(
            f"{label_path}: {labels.shape[0]} labels for {pts.shape[0]} points"
        )
    return LabelledCloud(
        pts[:, :3].astype(np.float64),
        (labels & 0xFFFF).astype(np.int64),
        scene_id=Path(bin_path).stem,
    )


def write_kitti_scan(bin_path, label_path, cloud: LabelledCloud):
    """Inverse of ``read_kitti_scan``; remission written as zero."""
    pts = np.zeros((cloud.n_points, 4), dtype="<f4")
    pts[:, :3] = cloud.coords
    Path(bin_path).write_bytes(pts.tobytes())
    if np.any(cloud.labels < 0) or np.any(cloud.labels > 0xFFFF):
        raise ValueError("labels must fit in 16 bits to be written")
    Path(label_path).write_bytes(cloud.labels.astype("<u4").tobytes())


def load_scan_dir(root) -> list[LabelledCloud]:
    """Read every scan/label pair under ``root``/scans and ``root``/labels."""
    root = Path(root)
    clouds = []
    for bin_path in sorted((root / "scans").glob("*.bin")):
        label_path = root / "labels" / (bin_path.stem + ".label")
        clouds.append(read_kitti_scan(bin_path, label_path))
    if not clouds:
        raise ValueError(f"{root}: no scan files found")
    return clouds


def write_scan_dir(root, clouds):
    root = Path(root)
    (root / "scans").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for cloud in clouds:
        write_kitti_scan(
            root / "scans" / f"{cloud.scene_id}.bin",
            root / "labels" / f"{cloud.scene_id}.label",
            cloud,
        )


# ---------------------------------------------------------------------------
# Class tables and builtin splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetClasses:
    """Evaluated classes of a dataset plus the raw-label mapping."""

    dataset: str
    names: dict  # train id -> name, ignore id excluded
    ignore_id: int = 0
    raw_map: dict = field(default_factory=dict)  # raw label -> train id

    def id_of(self, name: str) -> int:
        for cid, cname in self.names.items():
            if cname == name:
                return cid
        raise KeyError(f"{self.dataset}: unknown class name {name!r}")

    def remap_raw(self, labels: np.ndarray) -> np.ndarray:
        out = np.full(labels.shape, self.ignore_id, dtype=np.int64)
        for raw, train in self.raw_map.items():
            out[labels == raw] = train
        return out


def load_class_table(dataset_name: str) -> DatasetClasses:
    """Class-id mapping table shipped with the package."""
    path = importlib.resources.files("segdiscover.tables") / f"{dataset_name}.tsv"
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ValueError(f"no class table for dataset {dataset_name!r}") from None
    names: dict = {}
    raw_map: dict = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        raw_id, _raw_name, train_id, train_name = line.split("\t")
        raw_map[int(raw_id)] = int(train_id)
        if int(train_id) != 0:
            names.setdefault(int(train_id), train_name)
    return DatasetClasses(dataset_name, names, ignore_id=0, raw_map=raw_map)


_KITTI_SPLITS = {
    "kitti-5-0": ["building", "road", "sidewalk", "terrain", "vegetation"],
    "kitti-5-1": ["car", "fence", "other-ground", "parking", "trunk"],
    "kitti-5-2": ["motorcycle", "other-vehicle", "pole", "traffic-sign", "truck"],
    "kitti-4-3": ["bicycle", "bicyclist", "motorcyclist", "person"],
}

_POSS_SPLITS = {
    "poss-4-0": ["building", "car", "ground", "plants"],
    "poss-3-1": ["bike", "fence", "person"],
    "poss-3-2": ["pole", "traffic-sign", "trunk"],
    "poss-3-3": ["cone-stone", "rider", "trashcan"],
}


def builtin_splits(dataset_name: str, synthetic_cfg: SyntheticConfig | None = None) -> list[SplitSpec]:
    """The benchmark splits for the real datasets; config-derived for synthetic."""
    if dataset_name == "synthetic":
        if synthetic_cfg is None:
            raise ValueError("synthetic splits are defined by the generation config")
        return [synthetic_cfg.split()]
    if dataset_name == "semantickitti":
        table = _KITTI_SPLITS
    elif dataset_name == "semanticposs":
        table = _POSS_SPLITS
    else:
        raise ValueError(f"unknown dataset {dataset_name!r}")
    classes = load_class_table(dataset_name)
    all_ids = frozenset(classes.names)
    splits = []
    for split_name, novel_names in table.items():
        novel = frozenset(classes.id_of(n) for n in novel_names)
        splits.append(SplitSpec(dataset_name, split_name, all_ids - novel, novel))
    return splits


def write_split_file(path, split: SplitSpec, names: dict):
    novel_names = ",".join(names[c] for c in sorted(split.novel_classes))
    Path(path).write_text(
        f"dataset={split.dataset}\nsplit_name={split.name}\nnovel={novel_names}\n"
    )


def read_split_file(path, names: dict) -> SplitSpec:
    """Parse the plain-text split format against a known class table."""
    fields = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    for key in ("dataset", "split_name", "novel"):
        if key not in fields:
            raise ValueError(f"{path}: split file missing {key!r}")
    by_name = {v: k for k, v in names.items()}
    novel = frozenset(by_name[n.strip()] for n in fields["novel"].split(",") if n.strip())
    base = frozenset(names) - novel
    return SplitSpec(fields["dataset"], fields["split_name"], base, novel)


def write_class_names(path, names: dict):
    Path(path).write_text("".join(f"{cid}\t{name}\n" for cid, name in sorted(names.items())))


def read_class_names(path) -> dict:
    names = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        cid, name = line.split("\t")
        names[int(cid)] = name
    return names


def mask_novel(clouds, split: SplitSpec, ignore_id: int | None = None) -> list[LabelledCloud]:
    """Hide novel ground truth: novel labels become UNLABELLED, ignore-labelled
    points are dropped entirely. Training code only ever sees the result."""
    base = np.array(sorted(split.base_classes), dtype=np.int64)
    masked = []
    for cloud in clouds:
        labels = cloud.labels
        keep = np.ones(labels.shape[0], dtype=bool)
        if ignore_id is not None:
            keep = labels != ignore_id
        coords = cloud.coords[keep]
        labels = labels[keep]
        if coords.shape[0] == 0:
            continue  # scene was entirely ignore-labelled
        out = np.where(np.isin(labels, base), labels, UNLABELLED)
        masked.append(LabelledCloud(coords, out, scene_id=cloud.scene_id))
    return masked
