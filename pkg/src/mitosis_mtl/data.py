"""Samples, manifests, point-to-mask extraction and the synthetic
domain-shift generator.

Manifest text format (UTF-8, one record per line, ``#`` comments allowed)::

    domain <id>
    counts <domain> <typical> <atypical>
    generator key=value ...            # only needed for seed descriptors
    sample <id> <domain> <label> <patch-ref> <mask-ref>

``<label>`` is ``typical`` or ``atypical``. A ref is either a path (relative
to the manifest's directory) or ``seed:<int>``, meaning the sample is
regenerated from the ``generator`` header. Patch files are 8-bit RGB PNGs,
mask files 8-bit grayscale PNGs holding the pixel class map (0/1/2).
"""

from __future__ import annotations

import dataclasses
import enum
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import (
    CountMismatch,
    InvalidSpec,
    MissingFile,
    PointOutOfBounds,
    SchemaViolation,
)


class Label(enum.IntEnum):
    TYPICAL = 0
    ATYPICAL = 1

    @classmethod
    def parse(cls, text: str) -> "Label":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown label {text!r}") from None

    def __str__(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class PointAnnotation:
    center_x: int  # column
    center_y: int  # row


@dataclass
class Sample:
    """One patch with its label, dense targets and domain.

    ``patch`` is float32 (3, H, W) in [0, 1]; ``binary_mask`` is uint8
    (1, H, W); ``pixel_class_map`` is uint8 (H, W) with 0/1/2.
    """

    sample_id: str
    domain: str
    label: Label
    patch: np.ndarray
    binary_mask: np.ndarray
    pixel_class_map: np.ndarray

    def validate(self) -> None:
        c, h, w = self.patch.shape
        if c != 3 or h != w or h % 8:
            raise SchemaViolation("patch", f"expected (3, S, S) with S divisible by 8, got {self.patch.shape}")
        if not np.all(np.isfinite(self.patch)) or self.patch.min() < 0 or self.patch.max() > 1:
            raise SchemaViolation("patch", "pixel values must be finite and within [0, 1]")
        if self.binary_mask.shape != (1, h, w) or self.pixel_class_map.shape != (h, w):
            raise SchemaViolation("masks", "mask dimensions differ from patch dimensions")
        expected = derive_pixel_class_map(self.binary_mask[0], self.label)
        if not np.array_equal(expected, self.pixel_class_map):
            raise SchemaViolation("masks", "pixel class map disagrees with binary mask and label")
        if not self.domain:
            raise SchemaViolation("domain", "empty domain id")


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    domain: str
    label: Label
    patch_ref: str
    mask_ref: str


@dataclass
class DatasetManifest:
    samples: list[SampleRecord]
    domains: list[str]
    class_counts: dict[str, dict[Label, int]]
    generator: dict[str, str] = field(default_factory=dict)
    root: Path | None = field(default=None, compare=False)

    def samples_in(self, domains: Iterable[str]) -> list[SampleRecord]:
        wanted = set(domains)
        return [s for s in self.samples if s.domain in wanted]

    def counts_for(self, domains: Iterable[str]) -> dict[Label, int]:
        total = {Label.TYPICAL: 0, Label.ATYPICAL: 0}
        for d in domains:
            for lab, n in self.class_counts[d].items():
                total[lab] += n
        return total


def _recount(samples: Sequence[SampleRecord], domains: Sequence[str]) -> dict[str, dict[Label, int]]:
    counts = {d: {Label.TYPICAL: 0, Label.ATYPICAL: 0} for d in domains}
    for s in samples:
        counts[s.domain][s.label] += 1
    return counts


def validate_manifest(m: DatasetManifest) -> None:
    if len(set(m.domains)) != len(m.domains):
        raise SchemaViolation("domain", "duplicate domain ids")
    known = set(m.domains)
    seen_ids = set()
    for s in m.samples:
        if s.domain not in known:
            raise SchemaViolation("sample.domain", f"sample {s.sample_id} references undeclared domain {s.domain!r}")
        if s.sample_id in seen_ids:
            raise SchemaViolation("sample.id", f"duplicate sample id {s.sample_id!r}")
        seen_ids.add(s.sample_id)
    missing = known - set(m.class_counts)
    if missing:
        raise SchemaViolation("counts", f"no counts line for domain(s) {sorted(missing)}")
    actual = _recount(m.samples, m.domains)
    for d in m.domains:
        for lab in Label:
            declared = m.class_counts[d].get(lab, 0)
            if declared != actual[d][lab]:
                raise CountMismatch(
                    f"domain {d}: declared {lab}={declared} but manifest lists {actual[d][lab]}"
                )


def save_manifest(m: DatasetManifest, path: str | Path) -> None:
    lines = [f"domain {d}" for d in m.domains]
    for d in m.domains:
        c = m.class_counts[d]
        lines.append(f"counts {d} {c[Label.TYPICAL]} {c[Label.ATYPICAL]}")
    if m.generator:
        lines.append("generator " + " ".join(f"{k}={v}" for k, v in m.generator.items()))
    for s in m.samples:
        lines.append(f"sample {s.sample_id} {s.domain} {s.label} {s.patch_ref} {s.mask_ref}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    domains: list[str] = []
    counts: dict[str, dict[Label, int]] = {}
    generator: dict[str, str] = {}
    samples: list[SampleRecord] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        kind, *parts = line.split()
        if kind == "domain":
            if len(parts) != 1:
                raise SchemaViolation("domain", "expected 'domain <id>'", lineno)
            domains.append(parts[0])
        elif kind == "counts":
            if len(parts) != 3:
                raise SchemaViolation("counts", "expected 'counts <domain> <typical> <atypical>'", lineno)
            try:
                n_t, n_a = int(parts[1]), int(parts[2])
            except ValueError:
                raise SchemaViolation("counts", "counts must be integers", lineno) from None
            if n_t < 0 or n_a < 0:
                raise SchemaViolation("counts", "counts must be nonnegative", lineno)
            counts[parts[0]] = {Label.TYPICAL: n_t, Label.ATYPICAL: n_a}
        elif kind == "generator":
            for kv in parts:
                key, sep, value = kv.partition("=")
                if not sep:
                    raise SchemaViolation("generator", f"expected key=value, got {kv!r}", lineno)
                generator[key] = value
        elif kind == "sample":
            if len(parts) != 5:
                raise SchemaViolation(
                    "sample", "expected 'sample <id> <domain> <label> <patch> <mask>'", lineno
                )
            try:
                label = Label.parse(parts[2])
            except ValueError as exc:
                raise SchemaViolation("sample.label", str(exc), lineno) from None
            samples.append(SampleRecord(parts[0], parts[1], label, parts[3], parts[4]))
        else:
            raise SchemaViolation("record", f"unknown record type {kind!r}", lineno)
    extra = set(counts) - set(domains)
    if extra:
        raise SchemaViolation("counts", f"counts given for undeclared domain(s) {sorted(extra)}")
    m = DatasetManifest(samples, domains, counts, generator, root=path.parent)
    validate_manifest(m)
    return m


# -- masks ---------------------------------------------------------------------


def derive_pixel_class_map(binary_mask: np.ndarray, label: Label) -> np.ndarray:
    mask = np.asarray(binary_mask)
    return (mask.astype(np.uint8) * (1 if label == Label.TYPICAL else 2)).astype(np.uint8)


def mask_from_point(
    image: np.ndarray,
    point: PointAnnotation,
    radius_hint: float,
    tolerance: float = 0.1,
) -> np.ndarray:
    """Region-grow a {0,1} mask (1, H, W) from a point annotation.

    Pixels join the region through 4-neighbours when their gray level is
    within ``tolerance`` of the seed pixel and they lie inside the disk of
    radius ``2 * radius_hint`` around the point. Any callable with the same
    signature and output contract can replace this one (see ``MaskProvider``).
    """
    img = np.asarray(image, dtype=np.float64)
    gray = img.mean(axis=0) if img.ndim == 3 else img
    h, w = gray.shape
    r, c = point.center_y, point.center_x
    if not (0 <= r < h and 0 <= c < w):
        raise PointOutOfBounds(f"point (x={c}, y={r}) outside {w}x{h} image")
    limit = (2.0 * radius_hint) ** 2
    seed_value = gray[r, c]
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[r, c] = 1
    queue = deque([(r, c)])
    while queue:
        y, x = queue.popleft()
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= ny < h and 0 <= nx < w and not mask[ny, nx]:
                if (ny - r) ** 2 + (nx - c) ** 2 <= limit and abs(gray[ny, nx] - seed_value) <= tolerance:
                    mask[ny, nx] = 1
                    queue.append((ny, nx))
    return mask[None]


MaskProvider = Callable[[np.ndarray, PointAnnotation, float], np.ndarray]


# -- synthetic generator ---------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    n_domains: int = 7
    per_domain: int = 40
    atypical_ratio: float = 0.25
    patch_size: int = 64

    def validate(self) -> None:
        if self.n_domains < 3:
            raise InvalidSpec(f"need at least 3 domains, got {self.n_domains}")
        if self.per_domain <= 0:
            raise InvalidSpec(f"per-domain sample count must be positive, got {self.per_domain}")
        if not 0.0 <= self.atypical_ratio <= 1.0:
            raise InvalidSpec(f"atypical ratio must lie in [0, 1], got {self.atypical_ratio}")
        if self.patch_size < 16 or self.patch_size % 8:
            raise InvalidSpec(f"patch size must be a multiple of 8 and >= 16, got {self.patch_size}")

    def to_header(self, seed: int) -> dict[str, str]:
        d = {k: str(v) for k, v in dataclasses.asdict(self).items()}
        d["seed"] = str(seed)
        return d

    @classmethod
    def from_header(cls, header: dict[str, str]) -> tuple["SynthSpec", int]:
        try:
            spec = cls(
                n_domains=int(header["n_domains"]),
                per_domain=int(header["per_domain"]),
                atypical_ratio=float(header["atypical_ratio"]),
                patch_size=int(header["patch_size"]),
            )
            return spec, int(header["seed"])
        except (KeyError, ValueError) as exc:
            raise SchemaViolation("generator", f"incomplete or malformed generator header: {exc}") from None


def class_split(n: int, atypical_ratio: float) -> tuple[int, int]:
    """(typical, atypical) counts: floor(ratio * n) atypical, the rest typical."""
    n_a = int(math.floor(atypical_ratio * n + 1e-9))
    return n - n_a, n_a


@dataclass(frozen=True)
class DomainStyle:
    background: np.ndarray  # RGB base colour
    texture_freq: float  # cycles per patch
    texture_angle: float
    texture_amp: float
    nucleus: np.ndarray  # RGB colour of stained chromatin
    noise: float
    clutter: int  # number of out-of-focus background nuclei


def _domain_style(seed: int, index: int) -> DomainStyle:
    rng = np.random.default_rng([seed, 1, index])
    # pinkish eosin background with per-domain hue / brightness drift
    background = np.array([0.90, 0.72, 0.82]) + rng.uniform(-0.12, 0.08, 3)
    nucleus = np.array([0.32, 0.18, 0.50]) + rng.uniform(-0.10, 0.10, 3)
    return DomainStyle(
        background=np.clip(background, 0.3, 1.0),
        texture_freq=float(rng.uniform(2.0, 9.0)),
        texture_angle=float(rng.uniform(0, math.pi)),
        texture_amp=float(rng.uniform(0.03, 0.12)),
        nucleus=np.clip(nucleus, 0.05, 0.7),
        noise=float(rng.uniform(0.01, 0.04)),
        clutter=int(rng.integers(0, 4)),
    )


def _ellipse(yy, xx, cy, cx, a, b, theta):
    ct, st = math.cos(theta), math.sin(theta)
    u = (xx - cx) * ct + (yy - cy) * st
    v = -(xx - cx) * st + (yy - cy) * ct
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _figure_mask(rng: np.random.Generator, size: int, label: Label) -> np.ndarray:
    scale = size / 64.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + rng.uniform(-4, 4) * scale
    cx = size / 2 + rng.uniform(-4, 4) * scale
    theta = rng.uniform(0, math.pi)
    a = rng.uniform(7.0, 10.0) * scale
    b = rng.uniform(4.5, 6.5) * scale
    mask = _ellipse(yy, xx, cy, cx, a, b, theta)
    if label == Label.ATYPICAL:
        # second lobe off the minor axis -> concave, irregular outline
        phi = theta + math.pi / 2 + rng.uniform(-0.6, 0.6)
        dist = rng.uniform(0.9, 1.3) * b + 3.0 * scale
        ly, lx = cy + dist * math.sin(phi), cx + dist * math.cos(phi)
        lobe = _ellipse(yy, xx, ly, lx, rng.uniform(3.5, 5.5) * scale, rng.uniform(2.5, 4.0) * scale, rng.uniform(0, math.pi))
        mask |= lobe
    return mask.astype(np.uint8)


def _render(rng: np.random.Generator, style: DomainStyle, mask: np.ndarray) -> np.ndarray:
    size = mask.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    phase = rng.uniform(0, 2 * math.pi)
    wave = np.sin(2 * math.pi * style.texture_freq * (xx * math.cos(style.texture_angle) + yy * math.sin(style.texture_angle)) + phase)
    img = style.background[:, None, None] * (1.0 + style.texture_amp * wave[None])
    # faint background nuclei; they are not part of the ground truth
    for _ in range(style.clutter):
        # keep clear of the central figure so clutter never reads as a lobe
        ang = rng.uniform(0, 2 * math.pi)
        dist = rng.uniform(0.3, 0.48) * size
        cy, cx = size / 2 + dist * math.sin(ang), size / 2 + dist * math.cos(ang)
        r = rng.uniform(2.0, 4.0) * size / 64
        blob = ((yy * size - cy) ** 2 + (xx * size - cx) ** 2 <= r * r) & (mask == 0)
        img = np.where(blob[None], 0.5 * img + 0.5 * style.nucleus[:, None, None], img)
    inside = mask.astype(bool)[None]
    chromatin = style.nucleus[:, None, None] * (1.0 + 0.15 * rng.standard_normal((1, size, size)))
    img = np.where(inside, chromatin, img)
    img = img + style.noise * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0)
    # quantise to 8-bit levels so that disk round-trips are exact
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def generate_sample(spec: SynthSpec, seed: int, domain_index: int, index: int, label: Label) -> Sample:
    style = _domain_style(seed, domain_index)
    rng = np.random.default_rng([seed, 2, domain_index, index])
    mask = _figure_mask(rng, spec.patch_size, label)
    patch = _render(rng, style, mask)
    return Sample(
        sample_id=f"d{domain_index}-{index:04d}",
        domain=f"d{domain_index}",
        label=label,
        patch=patch,
        binary_mask=mask[None],
        pixel_class_map=derive_pixel_class_map(mask, label),
    )


def _domain_labels(spec: SynthSpec, seed: int, domain_index: int) -> list[Label]:
    n_t, n_a = class_split(spec.per_domain, spec.atypical_ratio)
    labels = np.array([Label.ATYPICAL] * n_a + [Label.TYPICAL] * n_t)
    np.random.default_rng([seed, 3, domain_index]).shuffle(labels)
    return [Label(int(v)) for v in labels]


def generate_synthetic(spec: SynthSpec, seed: int) -> tuple[DatasetManifest, dict[str, Sample]]:
    """Build a deterministic synthetic dataset.

    Each domain gets its own background colour, texture frequency, noise and
    clutter; the label only changes the figure's shape (one smooth ellipse for
    typical, an ellipse with a second lobe for atypical).
    """
    spec.validate()
    records: list[SampleRecord] = []
    samples: dict[str, Sample] = {}
    domains = [f"d{i}" for i in range(spec.n_domains)]
    for di in range(spec.n_domains):
        for idx, label in enumerate(_domain_labels(spec, seed, di)):
            s = generate_sample(spec, seed, di, idx, label)
            samples[s.sample_id] = s
            ref = f"seed:{idx}"
            records.append(SampleRecord(s.sample_id, s.domain, label, ref, ref))
    manifest = DatasetManifest(records, domains, _recount(records, domains), spec.to_header(seed))
    validate_manifest(manifest)
    return manifest, samples


# -- sample storage --------------------------------------------------------------


def write_sample_files(sample: Sample, patch_path: Path, mask_path: Path) -> None:
    rgb = np.round(np.transpose(sample.patch, (1, 2, 0)) * 255.0).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(patch_path, optimize=False)
    Image.fromarray(sample.pixel_class_map.astype(np.uint8), mode="L").save(mask_path, optimize=False)


def materialize(
    manifest: DatasetManifest, samples: dict[str, Sample], out_dir: str | Path, jobs: int = 1
) -> DatasetManifest:
    """Write every sample as PNG files and return a path-based manifest.

    The manifest itself is written to ``out_dir/manifest.txt``.
    """
    out_dir = Path(out_dir)
    (out_dir / "patches").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for r in manifest.samples:
        records.append(
            dataclasses.replace(r, patch_ref=f"patches/{r.sample_id}.png", mask_ref=f"masks/{r.sample_id}.png")
        )

    def write(rec: SampleRecord) -> None:
        write_sample_files(samples[rec.sample_id], out_dir / rec.patch_ref, out_dir / rec.mask_ref)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        list(pool.map(write, records))
    written = DatasetManifest(records, list(manifest.domains), manifest.class_counts, dict(manifest.generator), root=out_dir)
    save_manifest(written, out_dir / "manifest.txt")
    return written


class SampleStore:
    """Loads samples described by a manifest, with an access log.

    Every sample read goes through :meth:`get`, which appends the sample id to
    ``access_log`` so callers can check which data a procedure touched.
    """

    def __init__(self, manifest: DatasetManifest, preloaded: dict[str, Sample] | None = None):
        self.manifest = manifest
        self._records = {r.sample_id: r for r in manifest.samples}
        self._cache: dict[str, Sample] = dict(preloaded or {})
        self._domain_index = {d: i for i, d in enumerate(manifest.domains)}
        self.access_log: list[str] = []
        self._synth = None
        if manifest.generator:
            self._synth = SynthSpec.from_header(manifest.generator)

    def get(self, sample_id: str) -> Sample:
        self.access_log.append(sample_id)
        if sample_id not in self._cache:
            self._cache[sample_id] = self._load(self._records[sample_id])
        return self._cache[sample_id]

    def get_many(self, records: Sequence[SampleRecord]) -> list[Sample]:
        return [self.get(r.sample_id) for r in records]

    def _load(self, rec: SampleRecord) -> Sample:
        if rec.patch_ref.startswith("seed:"):
            if self._synth is None:
                raise SchemaViolation("generator", f"sample {rec.sample_id} uses a seed ref but no generator header exists")
            spec, seed = self._synth
            index = int(rec.patch_ref.split(":", 1)[1])
            s = generate_sample(spec, seed, self._domain_index[rec.domain], index, rec.label)
            if s.sample_id != rec.sample_id:
                s = dataclasses.replace(s, sample_id=rec.sample_id)
            return s
        root = self.manifest.root or Path(".")
        patch_path, mask_path = root / rec.patch_ref, root / rec.mask_ref
        for p in (patch_path, mask_path):
            if not p.is_file():
                raise MissingFile(f"sample file not found: {p}")
        rgb = np.asarray(Image.open(patch_path).convert("RGB"), dtype=np.float32) / 255.0
        class_map = np.asarray(Image.open(mask_path).convert("L"), dtype=np.uint8)
        binary = (class_map > 0).astype(np.uint8)
        s = Sample(rec.sample_id, rec.domain, rec.label, np.ascontiguousarray(rgb.transpose(2, 0, 1)), binary[None], class_map)
        s.validate()
        return s
