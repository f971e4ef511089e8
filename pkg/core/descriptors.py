"""Sensor/dataset descriptors.

Benchmark scenes this toolkit is calibrated against. The data itself is not
shipped; descriptors validate ingested cubes and size synthetic stand-ins.

Looking up an unknown key raises UnknownDatasetError.
"""

from dataclasses import dataclass
from typing import Optional

from core.cube import RADIANCE, REFLECTANCE, HyperCube
from core.errors import CubeFormatError, UnknownDatasetError


@dataclass(frozen=True)
class DatasetDescriptor:
    """Band layout and label space of a known scene."""
    key: str             # Lookup key used in configs
    name: str            # Human-readable name
    bands: int           # Spectral channel count
    start_nm: float      # First band center
    stop_nm: float       # Last band center
    kind: str            # reflectance or radiance
    n_classes: int       # Labeled classes (excluding 0)
    classes_inferred: bool = False  # Class count read off a network head, not stated

    def check_against(self, cube: HyperCube, tolerance_nm: float = 15.0) -> None:
        """Raise CubeFormatError if an ingested cube does not fit this sensor."""
        if cube.bands != self.bands:
            raise CubeFormatError(f"{self.name} has {self.bands} bands, cube has {cube.bands}")
        lo, hi = float(cube.wavelengths_nm[0]), float(cube.wavelengths_nm[-1])
        if abs(lo - self.start_nm) > tolerance_nm or abs(hi - self.stop_nm) > tolerance_nm:
            raise CubeFormatError(
                f"{self.name} spans {self.start_nm:g}-{self.stop_nm:g} nm, cube spans {lo:g}-{hi:g} nm"
            )


# === Descriptors ===

PAVIA = DatasetDescriptor(
    key="pavia",
    name="University of Pavia",
    bands=103,
    start_nm=430.0,
    stop_nm=860.0,
    kind=REFLECTANCE,
    n_classes=9,
)

HOUSTON = DatasetDescriptor(
    key="houston",
    name="University of Houston",
    bands=144,
    start_nm=380.0,
    stop_nm=1050.0,
    kind=REFLECTANCE,
    n_classes=15,
)

# Airborne wetland survey - the label-rich side in transfer experiments
AERIAL_WETLAND = DatasetDescriptor(
    key="aerial_wetland",
    name="Aerial-view wetland",
    bands=360,
    start_nm=400.0,
    stop_nm=2450.0,
    kind=REFLECTANCE,
    n_classes=12,
    classes_inferred=True,
)

# Ground-level scanner of the same site, radiance units
STREET_WETLAND = DatasetDescriptor(
    key="street_wetland",
    name="Street-view wetland",
    bands=274,
    start_nm=400.0,
    stop_nm=1000.0,
    kind=RADIANCE,
    n_classes=12,
    classes_inferred=True,
)

ALL_DESCRIPTORS = [PAVIA, HOUSTON, AERIAL_WETLAND, STREET_WETLAND]

_BY_KEY = {d.key: d for d in ALL_DESCRIPTORS}


def get_descriptor(key: str) -> Optional[DatasetDescriptor]:
    """Get descriptor by key, or None."""
    return _BY_KEY.get(key)


def require_descriptor(key: str) -> DatasetDescriptor:
    """Get descriptor by key or raise UnknownDatasetError."""
    descriptor = get_descriptor(key)
    if descriptor is None:
        raise UnknownDatasetError(key, list(_BY_KEY))
    return descriptor
