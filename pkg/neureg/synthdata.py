"""Synthetic multi-subject, multi-domain brain-like phantoms.

A base phantom holds nested smooth regions: a thin dark outer shell, a
cortex-like body, an inner core and a small ventricle-like blob. Subjects are
band-limited deformations of one base phantom, so inter-subject registration
has a known answer. Domains re-map intensities the way different scanners or
contrasts would.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter
from tqdm import tqdm

from neureg.config import DomainSpec
from neureg.errors import FormatError, InvalidInputError
from neureg.fourierdecoder import DeformationField, decode
from neureg.volume import Dims, LabelVolume, Volume3, load_raw, save_raw
from neureg.warp import jacobian_stats, warp_labels, warp_trilinear

DEFAULT_DIMS: Dims = (32, 40, 48)
MIN_PHANTOM_EXTENT = 16
MANIFEST_FILE = "manifest.json"

# Subject deformations: band extents and peak displacement scale in voxels.
SUBJECT_BAND: Dims = (4, 4, 4)
DEFAULT_AMPLITUDE = 1.5
MAX_AMPLITUDE_HALVINGS = 8

LABEL_SHELL = 1
LABEL_BODY = 2
LABEL_CORE = 3
LABEL_VENTRICLE = 4

BASE_INTENSITY = {
    LABEL_SHELL: 0.25,
    LABEL_BODY: 0.55,
    LABEL_CORE: 0.80,
    LABEL_VENTRICLE: 0.15,
}
TEXTURE_AMPLITUDE = 0.03


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _smooth_unit_field(rng: np.random.Generator, dims: Dims, sigma: float) -> np.ndarray:
    """Smooth random field scaled to max |value| = 1."""
    s = gaussian_filter(rng.normal(size=dims), sigma=sigma, mode="wrap")
    peak = np.abs(s).max()
    return s / peak if peak > 0 else s


def make_phantom(seed: int, dims: Dims = DEFAULT_DIMS) -> tuple[Volume3, LabelVolume]:
    """Build a base phantom with four labelled regions.

    Args:
        seed: Controls radii jitter, boundary wobble and texture.
        dims: Grid extents, each at least 16.

    Returns:
        Intensities in [0, 1] and the matching labels (0 is background).
    """
    dims = tuple(dims)  # type: ignore[assignment]
    if len(dims) != 3 or min(dims) < MIN_PHANTOM_EXTENT:
        raise InvalidInputError(f"phantom dims must be >= {MIN_PHANTOM_EXTENT} per axis, got {dims}")
    rng = np.random.default_rng(seed)
    n = np.asarray(dims, dtype=np.float64)
    center = (n - 1) / 2.0
    grid = np.indices(dims, dtype=np.float64)

    def radius(scale: np.ndarray, offset: np.ndarray) -> np.ndarray:
        u = (grid - (center + offset).reshape(3, 1, 1, 1)) / scale.reshape(3, 1, 1, 1)
        return np.sqrt((u * u).sum(axis=0))

    def jitter() -> np.ndarray:
        return 1.0 + rng.uniform(-0.05, 0.05, size=3)

    wobble = 1.0 + 0.06 * _smooth_unit_field(rng, dims, sigma=min(dims) / 4.0)

    body_radii = 0.38 * n * jitter()
    rho_body = radius(body_radii, np.zeros(3)) / wobble
    rho_core = radius(0.6 * body_radii * jitter(), np.zeros(3)) / wobble
    ventricle_offset = rng.uniform(-0.04, 0.04, size=3) * n
    rho_ventricle = radius(0.12 * n * jitter(), ventricle_offset)

    labels = np.zeros(dims, dtype=np.uint16)
    labels[rho_body <= 1.15] = LABEL_SHELL
    labels[rho_body <= 1.0] = LABEL_BODY
    labels[rho_core <= 1.0] = LABEL_CORE
    labels[rho_ventricle <= 1.0] = LABEL_VENTRICLE

    image = np.zeros(dims)
    for label, value in BASE_INTENSITY.items():
        image[labels == label] = value
    texture = TEXTURE_AMPLITUDE * _smooth_unit_field(rng, dims, sigma=1.5)
    image = np.where(labels > 0, np.clip(image + texture, 0.0, 1.0), 0.0)
    logging.debug(f"Phantom seed={seed} dims={dims} label counts={np.bincount(labels.ravel())}")
    return Volume3(image), LabelVolume(labels)


def subject_field(
    seed: int, dims: Dims, amplitude: float = DEFAULT_AMPLITUDE, band: Dims = SUBJECT_BAND
) -> DeformationField:
    """Random band-limited displacement field without folding.

    The low-resolution coefficients are N(0, amplitude); when the decoded
    field folds anywhere the amplitude is halved and the same draw reused.
    """
    if amplitude == 0:
        return DeformationField.zeros(dims)
    rng = np.random.default_rng(seed)
    band = tuple(min(b, d) for b, d in zip(band, dims))  # type: ignore[assignment]
    coeffs = rng.normal(size=(3,) + band)
    scale = float(amplitude)
    for _ in range(MAX_AMPLITUDE_HALVINGS):
        candidate = decode(coeffs * scale, dims)
        if jacobian_stats(candidate).nonpos_fraction == 0.0:
            return candidate
        logging.debug(f"subject field seed={seed} folds at amplitude {scale}, halving")
        scale /= 2.0
    return decode(coeffs * scale, dims)


def make_subject(
    seed: int,
    base_phantom: tuple[Volume3, LabelVolume],
    amplitude: float = DEFAULT_AMPLITUDE,
) -> tuple[Volume3, LabelVolume]:
    """Deform the base phantom's intensities and labels with one shared field."""
    image, labels = base_phantom
    if amplitude == 0:
        return image, labels
    field = subject_field(seed, image.dims, amplitude)
    return warp_trilinear(image, field), warp_labels(labels, field)


def apply_domain(volume: Volume3, spec: DomainSpec, seed: int) -> Volume3:
    """Emulate an imaging domain on a [0, 1] volume.

    ``gain * v**gamma + offset``, times a smooth bias field
    ``1 + bias_amplitude * s`` with |s| <= 1, plus Gaussian noise, clipped
    to [0, 1]. A negative gain flips contrast.
    """
    lo, hi = volume.value_range
    if lo < 0.0 or hi > 1.0:
        raise InvalidInputError(f"apply_domain expects values in [0, 1], got [{lo}, {hi}]")
    rng = np.random.default_rng(seed)
    v = np.asarray(volume.data, dtype=np.float64)
    mapped = v if spec.gamma == 1.0 else np.power(v, spec.gamma)
    mapped = spec.gain * mapped + spec.offset
    if spec.bias_amplitude > 0:
        bias = _smooth_unit_field(rng, volume.dims, sigma=min(volume.dims) / 3.0)
        mapped = mapped * (1.0 + spec.bias_amplitude * bias)
    if spec.noise_sd > 0:
        mapped = mapped + rng.normal(0.0, spec.noise_sd, size=volume.dims)
    return Volume3(np.clip(mapped, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Sample:
    subject: int
    domain: str
    image: Volume3
    labels: LabelVolume


@dataclass
class Dataset:
    """Subjects rendered in one or more domains, all on one grid."""

    samples: list[Sample]

    def __post_init__(self) -> None:
        if self.samples:
            dims = self.samples[0].image.dims
            if any(s.image.dims != dims or s.labels.dims != dims for s in self.samples):
                raise InvalidInputError("all samples of a dataset must share one grid")

    @property
    def dims(self) -> Dims:
        return self.samples[0].image.dims

    @property
    def domains(self) -> list[str]:
        return sorted({s.domain for s in self.samples})

    def subjects(self, domain: str) -> list[Sample]:
        """Samples of one domain ordered by subject id."""
        return sorted((s for s in self.samples if s.domain == domain), key=lambda s: s.subject)

    def get(self, subject: int, domain: str) -> Sample:
        for s in self.samples:
            if s.subject == subject and s.domain == domain:
                return s
        raise InvalidInputError(f"no sample for subject {subject} in domain {domain}")


def generate_dataset(
    n_subjects: int,
    domains: list[DomainSpec],
    seed: int,
    dims: Dims = DEFAULT_DIMS,
    amplitude: float = DEFAULT_AMPLITUDE,
    show_progress: bool = False,
) -> Dataset:
    """Render ``n_subjects`` deformed copies of one phantom in every domain."""
    if n_subjects < 1 or not domains:
        raise InvalidInputError("need at least one subject and one domain")
    base = make_phantom(seed, dims)
    samples: list[Sample] = []
    for s in tqdm(range(n_subjects), desc="Subjects", unit="subject", disable=not show_progress):
        image, labels = make_subject(derive_seed(seed, s, 0), base, amplitude)
        for d, spec in enumerate(domains):
            rendered = apply_domain(image, spec, derive_seed(seed, s, d + 1))
            samples.append(Sample(s, spec.name, rendered, labels))
    logging.info(
        f"Generated {n_subjects} subjects x {len(domains)} domains at {tuple(dims)}, seed={seed}"
    )
    return Dataset(samples)


def save_dataset(dataset: Dataset, out_dir: str | Path, seed: Optional[int] = None) -> Path:
    """Write every sample as raw-container files plus a JSON manifest.

    Returns:
        Path of the manifest.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset.samples:
        stem = f"sub{s.subject:03d}_{s.domain}"
        save_raw(s.image, out / f"{stem}_image.nrv")
        save_raw(s.labels, out / f"{stem}_labels.nrv")
        entries.append(
            {
                "subject": s.subject,
                "domain": s.domain,
                "image": f"{stem}_image.nrv",
                "labels": f"{stem}_labels.nrv",
            }
        )
    manifest = {"dims": list(dataset.dims), "seed": seed, "samples": entries}
    path = out / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2))
    logging.info(f"Saved {len(entries)} samples to {out}")
    return path


def load_dataset(data_dir: str | Path) -> Dataset:
    """Read a dataset written by :func:`save_dataset`."""
    root = Path(data_dir)
    manifest = json.loads((root / MANIFEST_FILE).read_text())
    samples = []
    for entry in manifest["samples"]:
        image = load_raw(root / entry["image"])
        labels = load_raw(root / entry["labels"])
        if not isinstance(image, Volume3) or not isinstance(labels, LabelVolume):
            raise FormatError(f"{root}: sample {entry} does not hold an image and a label volume")
        samples.append(Sample(int(entry["subject"]), str(entry["domain"]), image, labels))
    logging.info(f"Loaded {len(samples)} samples from {root}")
    return Dataset(samples)
