"""Deterministic phantom volumes with known inlier / held-out lesion classes.

Each volume is an organ ellipse (ellipsoid in 3-D) on a background, with
lesion blobs painted strictly inside the organ. Every class renders as a
sinusoidal texture with its own intensity mean, amplitude, spatial
frequency and noise level; held-out classes overlap the inlier intensity
range but carry a distinct frequency signature, so they are near rather
than far out-of-distribution.

Class index layout (axis 0 of the mask stack):

    0              background
    1              organ
    2 .. 1+n_in    inlier tumor classes (training targets)
    2+n_in ..      held-out tumor classes (evaluation labels only)

All randomness flows from ``(spec.seed, case_seed)`` through one
``numpy.random.Generator``, so regeneration is bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import ConfigError, DataError, GeometryError

__all__ = [
    "TextureParams",
    "OrganGeometry",
    "TumorGeometry",
    "PhantomSpec",
    "LabeledVolume",
    "CaseRecord",
    "DatasetManifest",
    "default_textures",
    "generate_volume",
    "generate_split",
    "write_manifest",
    "read_manifest",
    "save_volume",
    "load_volume",
    "materialize_dataset",
]

MANIFEST_VERSION = 1
PLACEMENT_RETRIES = 40
PARTITIONS = ("train", "val", "test_inlier", "test_ood")


@dataclass(frozen=True)
class TextureParams:
    """Appearance of one class: base intensity, oriented sinusoid, noise.

    `orientation_deg` pins the wave direction (part of the class signature);
    None draws a fresh direction per case, for classes whose identity should
    not depend on orientation (e.g. background clutter).
    """

    mean: float
    amplitude: float
    frequency: float  # cycles across the grid
    noise_std: float = 0.02
    orientation_deg: float | None = None
    pattern: str = "wave"  # "wave": one sinusoid; "crosshatch": two, orthogonal

    def __post_init__(self):
        if self.pattern not in ("wave", "crosshatch"):
            raise ConfigError(f"unknown texture pattern {self.pattern!r}")

    def signature(self) -> tuple:
        return (
            self.mean,
            self.amplitude,
            self.frequency,
            self.noise_std,
            self.orientation_deg,
            self.pattern,
        )


@dataclass(frozen=True)
class OrganGeometry:
    semiaxis_range: tuple[float, float] = (22.0, 29.0)
    center_jitter: float = 3.0
    margin: float = 2.0  # clearance kept from the grid border


@dataclass(frozen=True)
class TumorGeometry:
    radius_range: tuple[float, float] = (4.0, 9.0)
    aspect_range: tuple[float, float] = (0.6, 1.0)
    wobble: float = 0.12  # max relative radial perturbation per harmonic
    max_inlier_lesions: int = 2


def default_textures(n_inlier: int, n_ood: int) -> tuple[TextureParams, ...]:
    """Background, organ, then lesion classes.

    Inlier lesions share overlapping intensity means and are identified by
    an oriented frequency signature; held-out lesions keep their means
    inside the inlier range but come from different texture families
    (isotropic speckle, crosshatch at an unseen frequency/orientation), the
    near-OOD regime: close in intensity, distinct in structure.
    """
    inlier = [
        TextureParams(mean=0.60, amplitude=0.10, frequency=10.0, orientation_deg=0.0),
        TextureParams(mean=0.64, amplitude=0.10, frequency=16.0, orientation_deg=45.0),
        TextureParams(mean=0.68, amplitude=0.10, frequency=22.0, orientation_deg=90.0),
        TextureParams(mean=0.56, amplitude=0.10, frequency=28.0, orientation_deg=135.0),
        TextureParams(mean=0.72, amplitude=0.10, frequency=7.0, orientation_deg=120.0),
    ]
    ood = [
        TextureParams(mean=0.62, amplitude=0.0, frequency=1.0, noise_std=0.10),
        TextureParams(
            mean=0.66, amplitude=0.10, frequency=26.0, orientation_deg=135.0,
            pattern="crosshatch",
        ),
        TextureParams(
            mean=0.64, amplitude=0.10, frequency=13.0, orientation_deg=22.5,
            pattern="crosshatch",
        ),
        TextureParams(mean=0.58, amplitude=0.0, frequency=1.0, noise_std=0.08),
    ]
    if n_inlier > len(inlier) or n_ood > len(ood):
        raise ConfigError(
            f"default textures cover {len(inlier)} inlier and {len(ood)} held-out "
            "classes; pass explicit textures for more"
        )
    textures = [
        TextureParams(mean=0.15, amplitude=0.12, frequency=6.0, noise_std=0.03),
        TextureParams(mean=0.45, amplitude=0.08, frequency=3.5),
    ]
    textures.extend(inlier[:n_inlier])
    textures.extend(ood[:n_ood])
    return tuple(textures)


@dataclass(frozen=True)
class PhantomSpec:
    """Everything needed to regenerate a dataset bit-for-bit."""

    shape: tuple[int, int, int] = (64, 64, 1)
    num_inlier_tumor_classes: int = 3
    num_ood_tumor_classes: int = 2
    textures: tuple[TextureParams, ...] = ()
    organ_geometry: OrganGeometry = field(default_factory=OrganGeometry)
    tumor_geometry: TumorGeometry = field(default_factory=TumorGeometry)
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ConfigError(f"shape must be three positive dims, got {self.shape}")
        if self.shape[0] < 2 or self.shape[1] < 2:
            raise ConfigError("H and W must both exceed 1; only D may be singleton")
        if self.num_inlier_tumor_classes < 1:
            raise ConfigError("need at least one inlier tumor class")
        if self.num_ood_tumor_classes < 1:
            raise ConfigError("need at least one held-out tumor class")
        if not self.textures:
            object.__setattr__(
                self,
                "textures",
                default_textures(self.num_inlier_tumor_classes, self.num_ood_tumor_classes),
            )
        if len(self.textures) != self.num_classes_total:
            raise ConfigError(
                f"{self.num_classes_total} classes need {self.num_classes_total} textures, "
                f"got {len(self.textures)}"
            )
        signatures = [t.signature() for t in self.textures]
        if len(set(signatures)) != len(signatures):
            raise ConfigError("every class must have a distinct texture signature")
        # The in-plane semiaxes come from semiaxis_range; the depth semiaxis
        # is clamped to the grid in the sampler, so only H and W gate the fit.
        lo, hi = self.organ_geometry.semiaxis_range
        if 2 * lo + 2 * self.organ_geometry.margin > min(self.shape[0], self.shape[1]):
            raise GeometryError("organ ellipse cannot fit in the grid")

    @property
    def num_classes_train(self) -> int:
        return 2 + self.num_inlier_tumor_classes

    @property
    def num_classes_total(self) -> int:
        return self.num_classes_train + self.num_ood_tumor_classes

    @property
    def inlier_class_ids(self) -> tuple[int, ...]:
        return tuple(range(2, self.num_classes_train))

    @property
    def ood_class_ids(self) -> tuple[int, ...]:
        return tuple(range(self.num_classes_train, self.num_classes_total))

    @property
    def class_roles(self) -> tuple[str, ...]:
        return (
            ("background", "organ")
            + ("inlier_tumor",) * self.num_inlier_tumor_classes
            + ("ood_tumor",) * self.num_ood_tumor_classes
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "PhantomSpec":
        raw = dict(raw)
        raw["shape"] = tuple(raw["shape"])
        raw["textures"] = tuple(TextureParams(**t) for t in raw["textures"])
        raw["organ_geometry"] = OrganGeometry(
            semiaxis_range=tuple(raw["organ_geometry"]["semiaxis_range"]),
            center_jitter=raw["organ_geometry"]["center_jitter"],
            margin=raw["organ_geometry"]["margin"],
        )
        tg = raw["tumor_geometry"]
        raw["tumor_geometry"] = TumorGeometry(
            radius_range=tuple(tg["radius_range"]),
            aspect_range=tuple(tg["aspect_range"]),
            wobble=tg["wobble"],
            max_inlier_lesions=tg["max_inlier_lesions"],
        )
        return cls(**raw)


@dataclass
class LabeledVolume:
    """One phantom: image, exhaustive one-hot masks, and class metadata."""

    image: np.ndarray  # (H, W, D) float32
    masks: np.ndarray  # (K_total, H, W, D) uint8, mutually exclusive, exhaustive
    class_roles: tuple[str, ...]
    case_id: str
    is_ood_case: bool

    @property
    def label_map(self) -> np.ndarray:
        return np.argmax(self.masks, axis=0).astype(np.uint8)

    def masks_flat(self) -> np.ndarray:
        return self.masks.reshape(self.masks.shape[0], -1)


def _case_rng(spec_seed: int, case_seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec_seed, case_seed]))


def _coordinate_grids(shape: tuple[int, int, int]) -> tuple[np.ndarray, ...]:
    axes = [np.arange(s, dtype=np.float64) for s in shape]
    return tuple(np.meshgrid(*axes, indexing="ij"))


def _sample_organ(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Random rotated ellipse (ellipsoid in 3-D) with its center jitter
    clamped per axis so the organ always clears the border margin."""
    h, w, d = spec.shape
    geom = spec.organ_geometry
    xx, yy, zz = _coordinate_grids(spec.shape)
    for _ in range(PLACEMENT_RETRIES):
        a, b = rng.uniform(*geom.semiaxis_range, size=2)
        reach = max(a, b)  # rotation-safe in-plane extent
        slack_x = h / 2.0 - reach - geom.margin
        slack_y = w / 2.0 - reach - geom.margin
        if slack_x < 0 or slack_y < 0:
            continue
        cx = h / 2.0 + rng.uniform(-1.0, 1.0) * min(geom.center_jitter, slack_x)
        cy = w / 2.0 + rng.uniform(-1.0, 1.0) * min(geom.center_jitter, slack_y)
        theta = rng.uniform(0.0, np.pi)
        if d > 1:
            c = min(rng.uniform(*geom.semiaxis_range), d / 2.0 - geom.margin)
            if c < 1.0:
                continue
            slack_z = d / 2.0 - c - geom.margin
            cz = d / 2.0 + rng.uniform(-1.0, 1.0) * min(geom.center_jitter, max(slack_z, 0.0))
        else:
            c, cz = 1.0, 0.0
        dx, dy = xx - cx, yy - cy
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        q = (u / a) ** 2 + (v / b) ** 2
        if d > 1:
            q = q + ((zz - cz) / c) ** 2
        return q <= 1.0
    raise GeometryError("organ ellipse cannot fit in the grid")


def _sample_lesion(
    spec: PhantomSpec,
    rng: np.random.Generator,
    organ: np.ndarray,
    interior_depth: np.ndarray,
) -> np.ndarray:
    """A wobbly-boundary blob fully inside the organ, or GeometryError."""
    geom = spec.tumor_geometry
    h, w, d = spec.shape
    xx, yy, zz = _coordinate_grids(spec.shape)
    available = float(interior_depth.max()) - 1.0
    if available < 2.0:
        raise GeometryError("organ interior too thin for any lesion")
    for _ in range(PLACEMENT_RETRIES):
        radius = rng.uniform(*geom.radius_range)
        aspect = rng.uniform(*geom.aspect_range)
        angle = rng.uniform(0.0, np.pi)
        harmonics = rng.uniform(0.0, geom.wobble, size=3)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
        max_reach = (radius / min(aspect, 1.0)) * (1.0 + harmonics.sum())
        if max_reach > available:  # shrink to what the organ interior admits
            radius *= available / max_reach
            max_reach = available
        depth_z = min(radius, d / 2.0 - 1.0) if d > 1 else 1.0

        ok = interior_depth >= max_reach + 1.0
        candidates = np.argwhere(ok)
        if candidates.size == 0:
            continue
        cx, cy, cz = candidates[rng.integers(len(candidates))]

        du = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
        dv = (-(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)) / aspect
        rho = np.hypot(du, dv)
        phi = np.arctan2(dv, du)
        boundary = radius * (
            1.0
            + harmonics[0] * np.cos(phi + phases[0])
            + harmonics[1] * np.cos(2 * phi + phases[1])
            + harmonics[2] * np.cos(3 * phi + phases[2])
        )
        q = (rho / np.maximum(boundary, 1e-6)) ** 2
        if d > 1:
            q = q + ((zz - cz) / depth_z) ** 2
        mask = q <= 1.0
        if mask.any() and bool(organ[mask].all()):
            return mask
    raise GeometryError("lesion placement failed after bounded retries")


def _render_image(
    spec: PhantomSpec, rng: np.random.Generator, label_map: np.ndarray
) -> np.ndarray:
    h, w, d = spec.shape
    xx, yy, _ = _coordinate_grids(spec.shape)
    u = xx / max(h, 1)
    v = yy / max(w, 1)
    image = np.zeros(spec.shape, dtype=np.float64)
    for class_id, tex in enumerate(spec.textures):
        free_angle = rng.uniform(0.0, np.pi)  # drawn unconditionally: keeps the
        phase = rng.uniform(0.0, 2.0 * np.pi)  # rng stream stable across specs
        orientation = (
            np.deg2rad(tex.orientation_deg) if tex.orientation_deg is not None else free_angle
        )
        along = np.cos(orientation) * u + np.sin(orientation) * v
        wave = np.sin(2.0 * np.pi * tex.frequency * along + phase)
        if tex.pattern == "crosshatch":
            across = -np.sin(orientation) * u + np.cos(orientation) * v
            second = np.sin(2.0 * np.pi * tex.frequency * across + phase)
            wave = (wave + second) / np.sqrt(2.0)  # keep per-voxel variance matched
        noise = rng.standard_normal(spec.shape)
        region = label_map == class_id
        image[region] = tex.mean + tex.amplitude * wave[region] + tex.noise_std * noise[region]
    image += spec.noise_sigma * rng.standard_normal(spec.shape)
    return image.astype(np.float32)


def generate_volume(
    spec: PhantomSpec, case_seed: int, allow_ood: bool, case_id: str | None = None
) -> LabeledVolume:
    """Generate one phantom; with `allow_ood` it contains exactly one
    held-out-class lesion (painted last) plus the usual inlier lesions."""
    if case_seed < 0:
        raise ConfigError("case_seed must be non-negative")
    rng = _case_rng(spec.seed, case_seed)

    organ = _sample_organ(spec, rng)
    # Depth to the organ boundary steers lesion centers so blobs stay inside.
    if spec.shape[2] == 1:
        interior_depth = distance_transform_edt(organ[:, :, 0])[:, :, None]
    else:
        interior_depth = distance_transform_edt(organ)

    label_map = np.zeros(spec.shape, dtype=np.uint8)
    label_map[organ] = 1

    n_lesions = int(rng.integers(1, spec.tumor_geometry.max_inlier_lesions + 1))
    for _ in range(n_lesions):
        class_id = int(rng.choice(spec.inlier_class_ids))
        blob = _sample_lesion(spec, rng, organ, interior_depth)
        label_map[blob] = class_id
    if allow_ood:
        class_id = int(rng.choice(spec.ood_class_ids))
        blob = _sample_lesion(spec, rng, organ, interior_depth)
        label_map[blob] = class_id

    image = _render_image(spec, rng, label_map)
    masks = np.zeros((spec.num_classes_total, *spec.shape), dtype=np.uint8)
    for class_id in range(spec.num_classes_total):
        masks[class_id] = label_map == class_id

    has_ood = bool(np.isin(label_map, spec.ood_class_ids).any())
    return LabeledVolume(
        image=image,
        masks=masks,
        class_roles=spec.class_roles,
        case_id=case_id or f"case_{case_seed:05d}",
        is_ood_case=has_ood,
    )


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    case_seed: int
    allow_ood: bool
    is_ood_case: bool
    partition: str


@dataclass
class DatasetManifest:
    spec: PhantomSpec
    partitions: dict[str, list[CaseRecord]]
    format_version: int = MANIFEST_VERSION

    def all_cases(self) -> list[CaseRecord]:
        return [rec for part in PARTITIONS for rec in self.partitions[part]]

    def cases(self, partition: str) -> list[CaseRecord]:
        if partition not in self.partitions:
            raise DataError(f"manifest has no partition {partition!r}")
        return self.partitions[partition]


def generate_split(
    spec: PhantomSpec,
    n_train: int,
    n_val: int,
    n_test_inlier: int,
    n_test_ood: int,
) -> DatasetManifest:
    """Lay out case ids and seeds per partition; held-out-class lesions
    appear only in the test_ood partition."""
    counts = {
        "train": n_train,
        "val": n_val,
        "test_inlier": n_test_inlier,
        "test_ood": n_test_ood,
    }
    if min(counts.values()) < 0:
        raise ConfigError("partition counts must be non-negative")
    partitions: dict[str, list[CaseRecord]] = {}
    next_seed = 0
    for part in PARTITIONS:
        records = []
        for _ in range(counts[part]):
            ood = part == "test_ood"
            records.append(
                CaseRecord(
                    case_id=f"{part}_{next_seed:05d}",
                    case_seed=next_seed,
                    allow_ood=ood,
                    is_ood_case=ood,
                    partition=part,
                )
            )
            next_seed += 1
        partitions[part] = records
    return DatasetManifest(spec=spec, partitions=partitions)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": manifest.format_version,
        "spec": manifest.spec.to_dict(),
        "counts": {p: len(recs) for p, recs in manifest.partitions.items()},
        "partitions": {
            p: [asdict(rec) for rec in recs] for p, recs in manifest.partitions.items()
        },
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    raw = json.loads(path.read_text())
    if raw.get("format_version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {raw.get('format_version')}")
    return DatasetManifest(
        spec=PhantomSpec.from_dict(raw["spec"]),
        partitions={
            p: [CaseRecord(**rec) for rec in recs] for p, recs in raw["partitions"].items()
        },
        format_version=raw["format_version"],
    )


def save_volume(volume: LabeledVolume, cases_dir: str | Path) -> tuple[Path, Path]:
    """One `.image.npy` (float32 voxels) and one `.labels.npy` (uint8 class
    indices) per case; masks are reconstructed from the label map on load."""
    cases_dir = Path(cases_dir)
    cases_dir.mkdir(parents=True, exist_ok=True)
    image_path = cases_dir / f"{volume.case_id}.image.npy"
    labels_path = cases_dir / f"{volume.case_id}.labels.npy"
    np.save(image_path, volume.image)
    np.save(labels_path, volume.label_map)
    return image_path, labels_path


def load_volume(spec: PhantomSpec, record: CaseRecord, cases_dir: str | Path) -> LabeledVolume:
    cases_dir = Path(cases_dir)
    image_path = cases_dir / f"{record.case_id}.image.npy"
    labels_path = cases_dir / f"{record.case_id}.labels.npy"
    if not image_path.exists() or not labels_path.exists():
        raise DataError(f"missing volume files for case {record.case_id} in {cases_dir}")
    image = np.load(image_path)
    label_map = np.load(labels_path)
    masks = np.zeros((spec.num_classes_total, *spec.shape), dtype=np.uint8)
    for class_id in range(spec.num_classes_total):
        masks[class_id] = label_map == class_id
    return LabeledVolume(
        image=image,
        masks=masks,
        class_roles=spec.class_roles,
        case_id=record.case_id,
        is_ood_case=record.is_ood_case,
    )


def materialize_dataset(manifest: DatasetManifest, out_dir: str | Path) -> Path:
    """Write manifest.json plus every case's image/label files under
    `<out_dir>/cases/`; regeneration is deterministic, so rerunning
    overwrites byte-identical files."""
    out_dir = Path(out_dir)
    cases_dir = out_dir / "cases"
    for record in manifest.all_cases():
        volume = generate_volume(
            manifest.spec, record.case_seed, record.allow_ood, case_id=record.case_id
        )
        save_volume(volume, cases_dir)
    write_manifest(manifest, out_dir / "manifest.json")
    return out_dir
