"""Synthetic two-domain hyperspectral scenes.

Both domains draw from one set of class prototypes (smooth spectra built from
Gaussian bumps over wavelength). The target domain then passes through the
shift operators in this order: abundance mixing, band resampling onto the
target grid, per-band gain/offset, noise, clipping.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from core.cube import RADIANCE, REFLECTANCE, DomainPair, HyperCube, LabelMap
from core.errors import ArgumentError

logger = logging.getLogger(__name__)

PROTOTYPE_FLOOR = 0.05
PROTOTYPE_CEIL = 0.8
SEEDS_PER_CLASS = 2


@dataclass
class BandGrid:
    """Evenly spaced band centers from start_nm to stop_nm inclusive."""

    start_nm: float = 400.0
    stop_nm: float = 1000.0
    bands: int = 64

    def wavelengths(self) -> np.ndarray:
        if self.bands < 1 or self.stop_nm < self.start_nm:
            raise ArgumentError(f"Invalid band grid {self}")
        if self.bands == 1:
            return np.array([self.start_nm], dtype=np.float64)
        return np.linspace(self.start_nm, self.stop_nm, self.bands)


@dataclass
class SynthConfig:
    """Generator settings. ``None`` disables noise or mixing."""

    n_classes: int = 6
    height: int = 40
    width: int = 40
    source_grid: BandGrid = field(default_factory=BandGrid)
    target_grid: BandGrid = field(default_factory=lambda: BandGrid(420.0, 980.0, 48))
    source_kind: str = REFLECTANCE
    target_kind: str = REFLECTANCE
    noise_snr_db: Optional[float] = 30.0
    gain: float = 1.15
    offset: float = 0.03
    gain_jitter: float = 0.1
    mixing_concentration: Optional[float] = 20.0

    @classmethod
    def identity(cls, **overrides) -> "SynthConfig":
        """Same grid, unit gain, no offset, no mixing, no noise."""
        grid = overrides.pop("source_grid", BandGrid())
        settings = dict(
            source_grid=grid,
            target_grid=BandGrid(grid.start_nm, grid.stop_nm, grid.bands),
            noise_snr_db=None,
            gain=1.0,
            offset=0.0,
            gain_jitter=0.0,
            mixing_concentration=None,
        )
        settings.update(overrides)
        return cls(**settings)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        data = dict(data)
        for key in ("source_grid", "target_grid"):
            if isinstance(data.get(key), dict):
                data[key] = BandGrid(**data[key])
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ArgumentError(f"Need at least 2 classes, got {self.n_classes}")
        if self.height * self.width < self.n_classes * SEEDS_PER_CLASS:
            raise ArgumentError(
                f"{self.height}x{self.width} image is too small for {self.n_classes} classes"
            )
        src, tgt = self.source_grid, self.target_grid
        if tgt.start_nm < src.start_nm or tgt.stop_nm > src.stop_nm:
            raise ArgumentError(
                f"Target grid {tgt.start_nm}-{tgt.stop_nm} nm lies outside the source span "
                f"{src.start_nm}-{src.stop_nm} nm"
            )
        for kind in (self.source_kind, self.target_kind):
            if kind not in (REFLECTANCE, RADIANCE):
                raise ArgumentError(f"Unknown cube kind '{kind}'")
        if self.mixing_concentration is not None and self.mixing_concentration <= 0:
            raise ArgumentError("mixing_concentration must be > 0")
        if self.gain <= 0:
            raise ArgumentError("gain must be > 0")


def class_prototypes(n_classes: int, wavelengths: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """C x B smooth spectra from 2-4 Gaussian bumps, scaled into [0.05, 0.8]."""
    lo, hi = float(wavelengths[0]), float(wavelengths[-1])
    span = max(hi - lo, 1.0)
    prototypes = np.empty((n_classes, len(wavelengths)))

    for c in range(n_classes):
        n_bumps = rng.integers(2, 5)
        centers = rng.uniform(lo, hi, n_bumps)
        widths = rng.uniform(0.05, 0.25, n_bumps) * span
        heights = rng.uniform(0.2, 1.0, n_bumps)
        curve = np.sum(
            heights[:, None] * np.exp(-0.5 * ((wavelengths[None, :] - centers[:, None]) / widths[:, None]) ** 2),
            axis=0,
        )
        cmin, cmax = curve.min(), curve.max()
        if cmax - cmin < 1e-12:
            prototypes[c] = PROTOTYPE_FLOOR
        else:
            prototypes[c] = PROTOTYPE_FLOOR + (PROTOTYPE_CEIL - PROTOTYPE_FLOOR) * (curve - cmin) / (cmax - cmin)
    return prototypes


def voronoi_layout(n_classes: int, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Class map (ids 1..C) from Voronoi cells around two seed pixels per class."""
    n_seeds = n_classes * SEEDS_PER_CLASS
    seed_pixels = rng.choice(height * width, size=n_seeds, replace=False)
    seed_coords = np.stack(np.divmod(seed_pixels, width), axis=1)
    seed_classes = np.repeat(np.arange(1, n_classes + 1), SEEDS_PER_CLASS)

    rr, cc = np.mgrid[0:height, 0:width]
    _, nearest = cKDTree(seed_coords).query(np.stack([rr.ravel(), cc.ravel()], axis=1))
    return seed_classes[nearest].reshape(height, width)


def _add_noise(spectra: np.ndarray, snr_db: Optional[float], rng: np.random.Generator) -> np.ndarray:
    if snr_db is None:
        return spectra
    power = np.mean(spectra ** 2, axis=-1, keepdims=True)
    sigma = np.sqrt(power / (10.0 ** (snr_db / 10.0)))
    return spectra + sigma * rng.standard_normal(spectra.shape)


def _clip(spectra: np.ndarray, kind: str) -> np.ndarray:
    if kind == REFLECTANCE:
        return np.clip(spectra, 0.0, 1.0)
    return np.maximum(spectra, 0.0)


def band_gains(cfg: SynthConfig, wavelengths: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """gain * (1 + jitter * smooth sinusoid over the target grid)."""
    lo, hi = wavelengths[0], wavelengths[-1]
    position = (wavelengths - lo) / max(hi - lo, 1.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    return cfg.gain * (1.0 + cfg.gain_jitter * np.sin(phase + 3.0 * np.pi * position))


def synth_domain_pair(cfg: SynthConfig, seed: int) -> DomainPair:
    """Generate a fully labeled source/target scene pair."""
    cfg.validate()

    # independent streams keep each component stable when another changes
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(6)]
    proto_rng, src_layout_rng, tgt_layout_rng, src_noise_rng, mix_rng, tgt_rng = streams

    src_wl = cfg.source_grid.wavelengths()
    tgt_wl = cfg.target_grid.wavelengths()
    prototypes = class_prototypes(cfg.n_classes, src_wl, proto_rng)

    src_map = voronoi_layout(cfg.n_classes, cfg.height, cfg.width, src_layout_rng)
    tgt_map = voronoi_layout(cfg.n_classes, cfg.height, cfg.width, tgt_layout_rng)

    source = prototypes[src_map - 1]
    source = _clip(_add_noise(source, cfg.noise_snr_db, src_noise_rng), cfg.source_kind)

    tgt_flat = tgt_map.reshape(-1) - 1
    if cfg.mixing_concentration is None:
        mixed = prototypes[tgt_flat]
    else:
        alpha = np.ones((len(tgt_flat), cfg.n_classes))
        alpha[np.arange(len(tgt_flat)), tgt_flat] = cfg.mixing_concentration
        # Dirichlet via normalized gammas so each pixel has its own concentration vector
        draws = mix_rng.standard_gamma(alpha)
        abundances = draws / draws.sum(axis=1, keepdims=True)
        mixed = abundances @ prototypes

    resampled = np.stack([np.interp(tgt_wl, src_wl, row) for row in mixed])
    gains = band_gains(cfg, tgt_wl, tgt_rng)
    target = resampled * gains[None, :] + cfg.offset
    target = _add_noise(target, cfg.noise_snr_db, tgt_rng)
    target = _clip(target, cfg.target_kind).reshape(cfg.height, cfg.width, -1)

    class_names = {c: f"class_{c}" for c in range(1, cfg.n_classes + 1)}
    metadata = {
        "seed": seed,
        **cfg.to_dict(),
        "band_gains": gains.tolist(),
    }
    logger.info(
        "Generated domain pair: %d classes, %dx%d, %d -> %d bands",
        cfg.n_classes, cfg.height, cfg.width, len(src_wl), len(tgt_wl),
    )

    return DomainPair(
        source=(
            HyperCube(values=source, wavelengths_nm=src_wl, kind=cfg.source_kind),
            LabelMap(classes=src_map, class_names=class_names),
        ),
        target=(
            HyperCube(values=target, wavelengths_nm=tgt_wl, kind=cfg.target_kind),
            LabelMap(classes=tgt_map, class_names=class_names),
        ),
        shift_metadata=metadata,
    )
