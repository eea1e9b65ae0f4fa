"""Deterministic multi-modal 3D phantoms with nested 4-class tumor labels.

Each subject is a smooth low-frequency background plus three nested
ellipsoidal shells (edema > core > enhancing core) drawn from one quadratic
form, so containment holds by construction. Class intensity signatures are
chosen so the classes separate linearly given all four modalities but not
from any single one; per-client signature perturbations, tumor geometry,
prevalence, and noise levels make the cohort non-IID. Everything is a pure
function of (cohort spec, global seed).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.ndimage import affine_transform, gaussian_filter, map_coordinates

LABEL_BACKGROUND, LABEL_EDEMA, LABEL_CORE, LABEL_ENHANCING = 0, 1, 2, 3
MODALITIES = ("t1", "t1ce", "t2", "flair")

# rows: modality, cols: class. Every single row leaves at least two classes
# indistinguishable; jointly the four class columns are distinct points in R^4.
BASE_SIGNATURES = np.array(
    [
        [0.30, 0.30, 0.55, 0.55],  # t1: bg==edema, core==enhancing
        [0.30, 0.50, 0.50, 0.75],  # t1ce: edema==core
        [0.35, 0.60, 0.35, 0.60],  # t2: bg==core, edema==enhancing
        [0.25, 0.65, 0.65, 0.25],  # flair: bg==enhancing, edema==core
    ]
)
_RAW_SCALE = 80.0
_RAW_OFFSET = 12.0
_FIELD_AMPLITUDE = 0.06

# per-client sample counts of the reference 9-hospital cohort
REFERENCE_COHORT_SIZES = (1251, 1000, 165, 99, 60, 1251, 369, 259, 76)


@dataclass
class Volume:
    image: np.ndarray  # [4, S, S, S] float64
    label: np.ndarray  # [S, S, S] int64, values in {0,1,2,3}
    subject_id: str
    preprocessed: bool = False

    def copy(self) -> "Volume":
        return Volume(self.image.copy(), self.label.copy(), self.subject_id,
                      self.preprocessed)


@dataclass(frozen=True)
class ClientSpec:
    client_id: int
    name: str
    sample_count: int
    prevalence: tuple[float, float, float]  # P(edema), P(core|edema), P(enh|core)
    mean_radius: float  # voxels, edema shell
    signature_shift: float  # magnitude of the per-client signature perturbation
    noise: float
    seed: int

    def validate(self):
        if self.sample_count <= 0:
            raise ValueError(f"client {self.client_id}: sample_count must be > 0")
        if any(p < 0 for p in self.prevalence):
            raise ValueError(f"client {self.client_id}: negative prevalence entry")


@dataclass(frozen=True)
class CohortSpec:
    extent: int
    clients: tuple[ClientSpec, ...]

    def validate(self):
        if self.extent <= 0:
            raise ValueError("cohort extent must be positive")
        for c in self.clients:
            c.validate()


@dataclass
class ClientDataset:
    client_id: int
    name: str
    train: list[Volume]
    val: list[Volume]
    test: list[Volume]

    @property
    def n_k(self) -> int:
        return len(self.train)


def client_signatures(spec: ClientSpec) -> np.ndarray:
    """Per-client class signature matrix: base plus a client-specific
    perturbation of the foreground columns (survives per-volume z-norm)."""
    rng = np.random.default_rng([spec.seed, spec.client_id, 0x51])
    pattern = rng.choice((-1.0, 1.0), size=(4, 3))
    sig = BASE_SIGNATURES.copy()
    sig[:, 1:] += spec.signature_shift * pattern
    return sig


def generate_phantom(
    spec: ClientSpec, index: int, extent: int, global_seed: int = 0
) -> Volume:
    """One raw (unpreprocessed) subject, bit-determined by
    (global_seed, spec.seed, client_id, index)."""
    if spec.mean_radius > 0 and spec.mean_radius * 1.3 >= extent / 2 - 1:
        raise ValueError(
            f"mean_radius {spec.mean_radius} too large for extent {extent}"
        )
    rng = np.random.default_rng([global_seed, spec.seed, spec.client_id, index])

    # all draws happen unconditionally, in fixed order
    u = rng.random(3)
    center_frac = rng.uniform(0.35, 0.65, 3)
    axis_scales = rng.uniform(0.75, 1.25, 3)
    radius_jitter = rng.uniform(0.85, 1.15)
    shell_jitter = rng.uniform(0.9, 1.1, 2)
    field_coefs = rng.normal(0.0, 1.0, (4, 7))
    noise = rng.standard_normal((4, extent, extent, extent))

    present = [False, False, False]
    present[0] = spec.mean_radius > 0 and spec.prevalence[0] > 0 and u[0] < spec.prevalence[0]
    present[1] = present[0] and u[1] < spec.prevalence[1]
    present[2] = present[1] and u[2] < spec.prevalence[2]

    label = np.zeros((extent, extent, extent), dtype=np.int64)
    if present[0]:
        radius = spec.mean_radius * radius_jitter
        axes = np.clip(radius * axis_scales, 1.5, extent / 2 - 1)
        center = center_frac * extent
        grids = np.ogrid[0:extent, 0:extent, 0:extent]
        q = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, axes))
        f2 = (0.65 * shell_jitter[0]) ** 2
        f3 = (0.35 * shell_jitter[1]) ** 2
        label[q <= 1.0] = LABEL_EDEMA
        if present[1]:
            label[q <= f2] = LABEL_CORE
        if present[2]:
            label[q <= f3] = LABEL_ENHANCING

    coords = np.linspace(0.0, 1.0, extent)
    cx = np.cos(np.pi * coords)[:, None, None]
    cy = np.cos(np.pi * coords)[None, :, None]
    cz = np.cos(np.pi * coords)[None, None, :]
    basis = (cx, cy, cz, cx * cy, cx * cz, cy * cz, cx * cy * cz)

    sig = client_signatures(spec)
    image = np.empty((4, extent, extent, extent))
    for m in range(4):
        bg = sum(c * b for c, b in zip(field_coefs[m], basis)) * _FIELD_AMPLITUDE
        image[m] = (sig[m][label] + bg + spec.noise * noise[m]) * _RAW_SCALE
    image += _RAW_OFFSET
    return Volume(image, label, subject_id=f"c{spec.client_id}s{index:04d}")


# ---------------------------------------------------------------------------
# preprocessing: rescale -> z-normalize -> resize, exactly once per sample


def rescale_intensity(image: np.ndarray) -> np.ndarray:
    """Per-modality min-max map to [0,1]; constant modalities become zeros."""
    out = np.empty_like(image)
    for m in range(image.shape[0]):
        lo, hi = image[m].min(), image[m].max()
        out[m] = np.zeros_like(image[m]) if hi == lo else (image[m] - lo) / (hi - lo)
    return out


def z_normalize(image: np.ndarray) -> np.ndarray:
    """Per-modality zero mean, unit population variance; constant -> zeros."""
    out = np.empty_like(image)
    for m in range(image.shape[0]):
        std = image[m].std()
        out[m] = np.zeros_like(image[m]) if std == 0 else (image[m] - image[m].mean()) / std
    return out


def _resize_coords(src: int, dst: int) -> np.ndarray:
    if dst == 1:
        return np.array([(src - 1) / 2.0])
    return np.arange(dst) * ((src - 1) / (dst - 1))


def resize(volume: Volume, target_extent: int) -> Volume:
    """Trilinear image / nearest-neighbor label resampling (corner-aligned)."""
    if target_extent <= 0:
        raise ValueError(f"target extent must be positive, got {target_extent}")
    src = volume.label.shape[0]
    if src == target_extent:
        return volume.copy()
    axes = [_resize_coords(src, target_extent) for _ in range(3)]
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.ravel() for g in grid])
    shape = (target_extent,) * 3
    image = np.stack(
        [
            map_coordinates(volume.image[m], coords, order=1).reshape(shape)
            for m in range(volume.image.shape[0])
        ]
    )
    label = map_coordinates(volume.label, coords, order=0).reshape(shape)
    return Volume(image, label, volume.subject_id, volume.preprocessed)


def preprocess(volume: Volume, target_extent: int) -> Volume:
    """Full pipeline; refuses to run twice on the same sample."""
    if volume.preprocessed:
        raise ValueError(f"subject {volume.subject_id} already preprocessed")
    staged = Volume(
        z_normalize(rescale_intensity(volume.image)),
        volume.label,
        volume.subject_id,
    )
    out = resize(staged, target_extent)
    out.preprocessed = True
    return out


# ---------------------------------------------------------------------------
# training-time augmentation


@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    affine_p: float = 0.5
    max_rotation_deg: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    noise_p: float = 0.5
    max_noise_sigma: float = 0.1
    bias_p: float = 0.5
    bias_coef: float = 0.1
    elastic: bool = False  # off by default: costly, not needed for acceptance
    elastic_alpha: float = 2.0
    elastic_sigma: float = 4.0


def _rotation_scale_matrix(angle_deg: float, plane: int, scale: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    rot = np.eye(3)
    i, j = [(0, 1), (0, 2), (1, 2)][plane]
    rot[i, i] = rot[j, j] = np.cos(a)
    rot[i, j] = -np.sin(a)
    rot[j, i] = np.sin(a)
    return rot * scale


def augment(volume: Volume, rng, config: Optional[AugmentConfig] = None) -> Volume:
    """Random flips, small affine, noise, multiplicative bias field.

    Spatial transforms hit image (trilinear) and label (nearest) identically.
    All random draws happen in a fixed order independent of which transforms
    fire, so streams stay aligned.
    """
    cfg = config or AugmentConfig()
    flips = rng.random(3) < cfg.flip_p
    do_affine = rng.random() < cfg.affine_p
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    plane = int(rng.integers(0, 3))
    scale = rng.uniform(*cfg.scale_range)
    do_noise = rng.random() < cfg.noise_p
    sigma = rng.uniform(0.0, cfg.max_noise_sigma)
    noise = rng.standard_normal(volume.image.shape)
    do_bias = rng.random() < cfg.bias_p
    bias_coefs = rng.uniform(-cfg.bias_coef, cfg.bias_coef, 3)
    if cfg.elastic:
        disp = rng.standard_normal((3,) + volume.label.shape)

    image = volume.image
    label = volume.label
    for axis, f in enumerate(flips):
        if f:
            image = np.flip(image, axis=axis + 1)
            label = np.flip(label, axis=axis)
    image = np.ascontiguousarray(image)
    label = np.ascontiguousarray(label)

    if do_affine:
        m = _rotation_scale_matrix(angle, plane, scale)
        m_inv = np.linalg.inv(m)
        c = (np.array(label.shape) - 1) / 2.0
        offset = c - m_inv @ c
        image = np.stack(
            [
                affine_transform(image[ch], m_inv, offset=offset, order=1, mode="nearest")
                for ch in range(image.shape[0])
            ]
        )
        label = affine_transform(label, m_inv, offset=offset, order=0, mode="nearest")

    if cfg.elastic:
        field = np.stack(
            [gaussian_filter(disp[i], cfg.elastic_sigma) for i in range(3)]
        ) * cfg.elastic_alpha
        base = np.indices(label.shape).astype(np.float64)
        coords = (base + field).reshape(3, -1)
        image = np.stack(
            [
                map_coordinates(image[ch], coords, order=1, mode="nearest").reshape(label.shape)
                for ch in range(image.shape[0])
            ]
        )
        label = map_coordinates(label, coords, order=0, mode="nearest").reshape(label.shape)

    if do_noise:
        image = image + sigma * noise

    if do_bias:
        s = label.shape[0]
        ramp = np.linspace(-0.5, 0.5, s)
        field = (
            1.0
            + bias_coefs[0] * ramp[:, None, None]
            + bias_coefs[1] * ramp[None, :, None]
            + bias_coefs[2] * ramp[None, None, :]
        )
        image = image * field

    return Volume(np.ascontiguousarray(image), np.ascontiguousarray(label),
                  volume.subject_id, volume.preprocessed)


# ---------------------------------------------------------------------------
# cohort assembly


def split_counts(n: int) -> tuple[int, int, int]:
    """70/15/15 by subject with at least one val and one test subject."""
    n_val = max(1, int(np.floor(0.15 * n)))
    n_test = max(1, int(np.floor(0.15 * n)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"client too small to split: {n} subjects")
    return n_train, n_val, n_test


def partition_noniid(cohort: CohortSpec, global_seed: int) -> list[ClientDataset]:
    """Generate, preprocess, and split every client's subjects."""
    cohort.validate()
    out = []
    for spec in cohort.clients:
        vols = [
            preprocess(
                generate_phantom(spec, i, cohort.extent, global_seed), cohort.extent
            )
            for i in range(spec.sample_count)
        ]
        n_train, n_val, _ = split_counts(spec.sample_count)
        out.append(
            ClientDataset(
                client_id=spec.client_id,
                name=spec.name,
                train=vols[:n_train],
                val=vols[n_train : n_train + n_val],
                test=vols[n_train + n_val :],
            )
        )
    return out


def scaled_client_counts(scale: float = 1 / 25, floor: int = 4):
    """Reference cohort sizes scaled down; returns (counts, clamped ids)."""
    counts, clamped = [], []
    for i, n in enumerate(REFERENCE_COHORT_SIZES):
        c = round(n * scale)
        if c < floor:
            clamped.append(i)
            c = floor
        counts.append(c)
    return counts, clamped


_DESK_PREVALENCE = (
    (1.0, 0.90, 0.80),
    (1.0, 0.55, 0.35),  # core/enhancing often missing, like the small-lesion site
    (1.0, 0.85, 0.70),
    (1.0, 0.80, 0.60),
    (1.0, 0.70, 0.40),
    (1.0, 0.95, 0.85),
    (1.0, 0.85, 0.65),
    (1.0, 0.90, 0.75),
    (1.0, 0.75, 0.50),
)
_DESK_RADII = (9.0, 7.0, 8.0, 6.0, 10.0, 9.0, 7.0, 8.0, 6.0)
_DESK_NOISE = (0.03, 0.05, 0.04, 0.06, 0.08, 0.03, 0.05, 0.04, 0.06)


def desk_cohort(extent: int = 32, signature_shift: float = 0.12) -> CohortSpec:
    """Nine heterogeneous clients, sizes scaled from the reference cohort.

    Signature perturbations are disjoint per client (seeded patterns), which
    makes the cohort strongly non-IID in class contrast, not just geometry.
    """
    counts, clamped = scaled_client_counts()
    if clamped:
        warnings.warn(f"scaled counts clamped to 4 for clients {clamped}")
    clients = tuple(
        ClientSpec(
            client_id=i,
            name=f"hospital{i + 1}",
            sample_count=counts[i],
            prevalence=_DESK_PREVALENCE[i],
            mean_radius=_DESK_RADII[i],
            signature_shift=signature_shift,
            noise=_DESK_NOISE[i],
            seed=100 + i,
        )
        for i in range(9)
    )
    return CohortSpec(extent=extent, clients=clients)


def tiny_cohort(extent: int = 16, clients: int = 3, samples: int = 4) -> CohortSpec:
    """Small cohort for demos and fast tests."""
    return CohortSpec(
        extent=extent,
        clients=tuple(
            ClientSpec(
                client_id=i,
                name=f"site{i}",
                sample_count=samples,
                prevalence=(1.0, 0.8, 0.6),
                mean_radius=4.0,
                signature_shift=0.1,
                noise=0.04,
                seed=200 + i,
            )
            for i in range(clients)
        ),
    )
