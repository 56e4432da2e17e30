"""Synthetic shearogram generator.

Forward model: out-of-plane displacement -> sheared difference scaled by the
interferometer sensitivity -> wrapping into [-pi, pi) -> speckle-like phase
noise -> optional sine/cosine window filtering. Defect ground truth is the
tight box around the pixels where a bump reaches 5 % of its amplitude.
"""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from shearad import phz
from shearad.datamodel import MANIFEST_VERSION, BoundingBox, DatasetManifest, SampleRecord, save_manifest
from shearad.errors import ValidationError

TWO_PI = 2.0 * math.pi
ANNOTATION_CUTOFF = 0.05
MAX_DEFECTS = 2
# Basis order for global deformation: 1, x, y, x^2, x*y, y^2 (pixel coordinates).
N_MODES = 6
# Composition of the reference acquisition campaign: defective, fixed, deformed.
CORPUS_COMPOSITION = (4311, 2537, 3650)

_SUPPORT_FACTOR = {
    # gaussian: exp(-r^2 / (2 R^2)) = cutoff
    "gaussian": math.sqrt(2.0 * math.log(1.0 / ANNOTATION_CUTOFF)),
    # plateau: exp(-(r / R)^4 / 2) = cutoff
    "plateau": (2.0 * math.log(1.0 / ANNOTATION_CUTOFF)) ** 0.25,
}


@dataclass(frozen=True)
class SpecimenSpec:
    width_px: int = 192
    height_px: int = 105
    physical_width_mm: float = 50.0 * 192 / 105
    physical_height_mm: float = 50.0

    def __post_init__(self) -> None:
        if self.width_px < 16 or self.height_px < 16:
            raise ValidationError(f"image grid must be at least 16x16, got {self.width_px}x{self.height_px}")
        if self.physical_width_mm <= 0 or self.physical_height_mm <= 0:
            raise ValidationError("physical dimensions must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.height_px, self.width_px

    @property
    def mm_per_px(self) -> tuple[float, float]:
        return self.physical_width_mm / self.width_px, self.physical_height_mm / self.height_px


@dataclass(frozen=True)
class DefectSpec:
    center: tuple[float, float]
    radius_px: float
    bump_height: float
    profile: str = "gaussian"

    def __post_init__(self) -> None:
        if self.profile not in _SUPPORT_FACTOR:
            raise ValidationError(f"unknown defect profile {self.profile!r}")
        if not self.radius_px > 0:
            raise ValidationError(f"radius must be positive, got {self.radius_px}")

    @property
    def support_radius(self) -> float:
        return _SUPPORT_FACTOR[self.profile] * self.radius_px

    def bump(self, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
        rho2 = ((xx - self.center[0]) ** 2 + (yy - self.center[1]) ** 2) / self.radius_px**2
        if self.profile == "gaussian":
            return self.bump_height * np.exp(-0.5 * rho2)
        return self.bump_height * np.exp(-0.5 * rho2**2)

    def check_inside(self, spec: SpecimenSpec) -> None:
        cx, cy = self.center
        r = self.support_radius
        if cx - r < 0 or cy - r < 0 or cx + r > spec.width_px - 1 or cy + r > spec.height_px - 1:
            raise ValidationError(
                f"defect at {self.center} with support radius {r:.2f} px leaves the "
                f"{spec.width_px}x{spec.height_px} image"
            )

    def support_mask(self, spec: SpecimenSpec) -> np.ndarray:
        yy, xx = np.mgrid[0 : spec.height_px, 0 : spec.width_px].astype(np.float64)
        return np.abs(self.bump(xx, yy)) >= ANNOTATION_CUTOFF * abs(self.bump_height)

    def ground_truth_box(self, spec: SpecimenSpec) -> BoundingBox:
        return BoundingBox.from_mask(self.support_mask(spec))


@dataclass(frozen=True)
class GlobalDeformationSpec:
    mode_coefficients: tuple[float, ...] = (0.0,) * N_MODES
    enabled: bool = False

    def __post_init__(self) -> None:
        if len(self.mode_coefficients) != N_MODES:
            raise ValidationError(f"expected {N_MODES} mode coefficients, got {len(self.mode_coefficients)}")
        if not self.enabled and any(c != 0.0 for c in self.mode_coefficients):
            raise ValidationError("disabled global deformation must have zero coefficients")

    def check_bounds(self, max_abs: Sequence[float]) -> None:
        for c, m in zip(self.mode_coefficients, max_abs):
            if abs(c) > m:
                raise ValidationError(f"mode coefficient {c} exceeds bound {m}")


@dataclass(frozen=True)
class ShearConfig:
    shear_vector: tuple[int, int] = (5, 0)
    sensitivity: float = 15.0

    def __post_init__(self) -> None:
        dx, dy = self.shear_vector
        if int(dx) != dx or int(dy) != dy:
            raise ValidationError(f"shear vector must be integer, got {self.shear_vector}")
        if dx == 0 and dy == 0:
            raise ValidationError("shear vector must be nonzero")
        if not self.sensitivity > 0:
            raise ValidationError("sensitivity must be positive")

    def check_against(self, shape: tuple[int, int]) -> None:
        dx, dy = self.shear_vector
        height, width = shape
        if abs(dx) >= 0.1 * width or abs(dy) >= 0.1 * height:
            raise ValidationError(f"shear {self.shear_vector} must stay below 10% of the image size {shape}")


@dataclass(frozen=True)
class NoiseSpec:
    speckle_sigma: float = 0.3
    decorrelation_fraction: float = 0.02

    def __post_init__(self) -> None:
        if self.speckle_sigma < 0:
            raise ValidationError("speckle_sigma must be non-negative")
        if not 0.0 <= self.decorrelation_fraction <= 1.0:
            raise ValidationError("decorrelation_fraction must lie in [0, 1]")


@dataclass
class PhaseImage:
    pixels: np.ndarray
    condition: str
    defective: bool
    seed: int


@dataclass(frozen=True)
class GeneratorConfig:
    """Everything ``generate_dataset`` needs besides the seed."""

    specimen: SpecimenSpec = field(default_factory=SpecimenSpec)
    shear: ShearConfig = field(default_factory=ShearConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    # defective, defect-free fixed, defect-free deformed
    counts: tuple[int, int, int] = (100, 59, 85)
    filter_window: int = 3
    radius_range: tuple[float, float] = (4.0, 7.0)
    height_range: tuple[float, float] = (0.8, 1.6)
    profiles: tuple[str, ...] = ("gaussian", "plateau")
    two_defect_fraction: float = 0.3
    defective_deformed_fraction: float = 0.5
    global_coeff_max: tuple[float, ...] = (0.0, 0.05, 0.05, 8e-4, 2e-3, 1e-3)
    write_previews: bool = False

    def __post_init__(self) -> None:
        if len(self.counts) != 3 or any(c < 0 for c in self.counts):
            raise ValidationError(f"counts must be three non-negative integers, got {self.counts}")
        if len(self.global_coeff_max) != N_MODES or any(m < 0 for m in self.global_coeff_max):
            raise ValidationError("global_coeff_max needs six non-negative bounds")
        if self.filter_window < 1 or self.filter_window % 2 == 0:
            raise ValidationError(f"filter_window must be odd and >= 1, got {self.filter_window}")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValidationError(f"bad radius_range {self.radius_range}")
        self.shear.check_against(self.specimen.shape)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "GeneratorConfig":
        obj = dict(obj)
        nested = {
            "specimen": SpecimenSpec,
            "shear": ShearConfig,
            "noise": NoiseSpec,
        }
        for key, typ in nested.items():
            if key in obj and isinstance(obj[key], dict):
                sub = dict(obj[key])
                if "shear_vector" in sub:
                    sub["shear_vector"] = tuple(sub["shear_vector"])
                obj[key] = typ(**sub)
        for key in ("counts", "radius_range", "height_range", "profiles", "global_coeff_max"):
            if key in obj:
                obj[key] = tuple(obj[key])
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ValidationError(f"bad generator config: {exc}") from exc

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def pixel_grid(spec: SpecimenSpec) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0 : spec.height_px, 0 : spec.width_px].astype(np.float64)
    return xx, yy


def polynomial_field(coeffs: Sequence[float], xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    basis = (np.ones_like(xx), xx, yy, xx * xx, xx * yy, yy * yy)
    return sum(c * b for c, b in zip(coeffs, basis))


def displacement_field(
    spec: SpecimenSpec,
    defects: Sequence[DefectSpec] = (),
    global_deformation: GlobalDeformationSpec | None = None,
) -> np.ndarray:
    """Out-of-plane displacement: global polynomial plus one bump per defect."""
    if len(defects) > MAX_DEFECTS:
        raise ValidationError(f"at most {MAX_DEFECTS} defects per frame, got {len(defects)}")
    for d in defects:
        d.check_inside(spec)
    xx, yy = pixel_grid(spec)
    w = np.zeros(spec.shape)
    if global_deformation is not None and global_deformation.enabled:
        w = w + polynomial_field(global_deformation.mode_coefficients, xx, yy)
    for d in defects:
        w = w + d.bump(xx, yy)
    return w


def shear_phase(w: np.ndarray, cfg: ShearConfig) -> np.ndarray:
    """Sheared difference ``s * (w(x + dx, y + dy) - w(x, y))`` with clamped borders."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValidationError("displacement field must be finite")
    dx, dy = (int(v) for v in cfg.shear_vector)
    height, width = w.shape
    cols = np.clip(np.arange(width) + dx, 0, width - 1)
    rows = np.clip(np.arange(height) + dy, 0, height - 1)
    shifted = w[np.ix_(rows, cols)]
    return cfg.sensitivity * (shifted - w)


def wrap_phase(phi: np.ndarray) -> np.ndarray:
    """Reduce phases modulo 2*pi into [-pi, pi). Values already inside are untouched."""
    phi = np.asarray(phi, dtype=np.float64)
    out = phi.copy()
    outside = (phi < -math.pi) | (phi >= math.pi)
    if np.any(outside):
        r = np.mod(phi[outside] + math.pi, TWO_PI) - math.pi
        r[r >= math.pi] -= TWO_PI
        r[r < -math.pi] += TWO_PI
        out[outside] = r
    return out


def add_noise(pixels: np.ndarray, noise: NoiseSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    out = np.asarray(pixels, dtype=np.float64).copy()
    if noise.speckle_sigma > 0:
        out = wrap_phase(out + rng.normal(0.0, noise.speckle_sigma, size=out.shape))
    n_replace = int(round(noise.decorrelation_fraction * out.size))
    if n_replace:
        idx = rng.choice(out.size, size=n_replace, replace=False)
        flat = out.reshape(-1)
        flat[idx] = wrap_phase(rng.uniform(-math.pi, math.pi, size=n_replace))
    return out


def filter_phase(pixels: np.ndarray, window: int) -> np.ndarray:
    """Windowed circular mean: atan2 of box-averaged sine and cosine."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if window < 1 or window % 2 == 0:
        raise ValidationError(f"filter window must be odd and >= 1, got {window}")
    if window >= min(pixels.shape):
        raise ValidationError(f"filter window {window} too large for image {pixels.shape}")
    if window == 1:
        return pixels.copy()
    s = ndimage.uniform_filter(np.sin(pixels), size=window, mode="reflect")
    c = ndimage.uniform_filter(np.cos(pixels), size=window, mode="reflect")
    return wrap_phase(np.arctan2(s, c))


def render(
    spec: SpecimenSpec,
    shear: ShearConfig,
    defects: Sequence[DefectSpec],
    global_deformation: GlobalDeformationSpec,
    noise: NoiseSpec,
    noise_seed: int,
    filter_window: int = 1,
) -> np.ndarray:
    """Run the full forward model for one frame."""
    w = displacement_field(spec, defects, global_deformation)
    pixels = add_noise(wrap_phase(shear_phase(w, shear)), noise, noise_seed)
    return filter_phase(pixels, filter_window)


def sample_seed(master_seed: int, sample_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), zlib.crc32(sample_id.encode())])


def random_global(config: GeneratorConfig, rng: np.random.Generator) -> GlobalDeformationSpec:
    bounds = np.asarray(config.global_coeff_max, dtype=np.float64)
    coeffs = rng.uniform(-1.0, 1.0, size=N_MODES) * bounds
    return GlobalDeformationSpec(tuple(float(c) for c in coeffs), enabled=True)


def random_defects(config: GeneratorConfig, rng: np.random.Generator, max_tries: int = 200) -> list[DefectSpec]:
    spec = config.specimen
    n = 2 if rng.random() < config.two_defect_fraction else 1
    defects: list[DefectSpec] = []
    for _ in range(max_tries):
        if len(defects) == n:
            break
        profile = config.profiles[int(rng.integers(len(config.profiles)))]
        radius = float(rng.uniform(*config.radius_range))
        height = float(rng.uniform(*config.height_range))
        r_sup = _SUPPORT_FACTOR[profile] * radius
        lo_x, hi_x = r_sup, spec.width_px - 1 - r_sup
        lo_y, hi_y = r_sup, spec.height_px - 1 - r_sup
        if lo_x > hi_x or lo_y > hi_y:
            raise ValidationError(f"defect radius {radius} does not fit the image")
        cand = DefectSpec((float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y))), radius, height, profile)
        if all(math.dist(cand.center, d.center) > cand.support_radius + d.support_radius for d in defects):
            defects.append(cand)
    return defects


def synthesize(config: GeneratorConfig, category: str, sample_id: str, seed: int) -> tuple[PhaseImage, dict]:
    """Generate one frame of ``category`` (defective / fixed / deformed).

    Returns the image and a truth record with the defect and global
    deformation parameters that produced it.
    """
    seq = sample_seed(seed, sample_id)
    rng = np.random.default_rng(seq)
    noise_seed = int(seq.generate_state(1)[0])
    if category == "fixed":
        condition, defects = "fixed", []
    elif category == "deformed":
        condition, defects = "deformed", []
    elif category == "defective":
        condition = "deformed" if rng.random() < config.defective_deformed_fraction else "fixed"
        defects = random_defects(config, rng)
    else:
        raise ValidationError(f"unknown sample category {category!r}")
    glob = random_global(config, rng) if condition == "deformed" else GlobalDeformationSpec()
    pixels = render(config.specimen, config.shear, defects, glob, config.noise, noise_seed, config.filter_window)
    image = PhaseImage(pixels, condition, bool(defects), noise_seed)
    truth = {
        "defects": [asdict(d) for d in defects],
        "global": asdict(glob),
        "noise_seed": noise_seed,
    }
    return image, truth


def scaled_counts(total: int, composition: Sequence[int] = CORPUS_COMPOSITION) -> tuple[int, ...]:
    """Largest-remainder apportionment of ``total`` samples across categories."""
    weights = np.asarray(composition, dtype=np.float64)
    exact = total * weights / weights.sum()
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return tuple(int(c) for c in counts)


def generate_dataset(config: GeneratorConfig, seed: int, output_dir: str | Path) -> DatasetManifest:
    """Write phase images, ``truth.json`` and ``manifest.json`` under ``output_dir``."""
    if sum(config.counts) == 0:
        raise ValidationError("generator counts sum to zero")
    out = Path(output_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        if config.write_previews:
            (out / "previews").mkdir(exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot write dataset to {out}: {exc}") from exc

    records: list[SampleRecord] = []
    truth: dict[str, dict] = {}
    for category, count in zip(("defective", "fixed", "deformed"), config.counts):
        for i in range(count):
            sid = f"{category}-{i:05d}"
            image, info = synthesize(config, category, sid, seed)
            rel = f"images/{sid}.phz"
            phz.write_tensor(out / rel, image.pixels)
            if config.write_previews:
                phz.write_preview(out / "previews" / f"{sid}.png", image.pixels)
            boxes = [DefectSpec(**{**d, "center": tuple(d["center"])}).ground_truth_box(config.specimen)
                     for d in info["defects"]]
            records.append(SampleRecord(sid, rel, image.condition, image.defective, boxes))
            truth[sid] = info

    manifest = DatasetManifest(MANIFEST_VERSION, records, config.digest(), root=out)
    save_manifest(manifest, out / "manifest.json")
    (out / "truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    (out / "generator_config.json").write_text(json.dumps(config.to_json(), indent=1, sort_keys=True) + "\n")
    return manifest


def load_truth(dataset_dir: str | Path) -> dict[str, dict]:
    return json.loads((Path(dataset_dir) / "truth.json").read_text())
