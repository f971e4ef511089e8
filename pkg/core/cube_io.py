"""Cube, label map and split file formats.

Cube header: UTF-8 key=value lines, '#' starts a comment.

    height=2
    width=2
    bands=3
    kind=reflectance
    payload=scene.bsq
    wavelengths=430,640,860

The payload is band-sequential 32-bit little-endian floats, path relative to
the header's directory. Standard ENVI images (header starting with "ENVI")
are read through the spectral package instead.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Union

import numpy as np
from spectral.io import envi

from core.cube import CUBE_KINDS, REFLECTANCE, HyperCube, LabelMap, SplitSpec
from core.errors import CubeFormatError, CubeIngestError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PAYLOAD_DTYPE = np.dtype("<f4")
PAYLOAD_SUFFIX = ".bsq"
REQUIRED_KEYS = ("height", "width", "bands", "kind", "payload", "wavelengths")


def read_header(header_path: PathLike) -> dict[str, str]:
    """Parse a header into raw string fields."""
    path = Path(header_path)
    if not path.is_file():
        raise CubeIngestError(f"Header not found: {path}")

    fields: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CubeFormatError(f"{path.name}:{lineno}: expected key=value, got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        fields[key.lower()] = value

    missing = [k for k in REQUIRED_KEYS if k not in fields]
    if missing:
        raise CubeFormatError(f"{path.name}: missing header keys: {', '.join(missing)}")
    return fields


def _positive_int(fields: dict[str, str], key: str) -> int:
    try:
        value = int(fields[key])
    except ValueError:
        raise CubeFormatError(f"Header key '{key}' must be an integer, got '{fields[key]}'") from None
    if value < 1:
        raise CubeFormatError(f"Header key '{key}' must be >= 1, got {value}")
    return value


def load_cube(header_path: PathLike, kind: str = REFLECTANCE) -> HyperCube:
    """Load and validate a cube from its header and band-sequential payload.

    Standard ENVI headers are handed to :func:`load_envi_cube`; ``kind``
    applies to those only, since ENVI does not record it.
    """
    path = Path(header_path)
    if path.is_file() and is_envi_header(path):
        return load_envi_cube(path, kind)
    fields = read_header(path)

    height = _positive_int(fields, "height")
    width = _positive_int(fields, "width")
    bands = _positive_int(fields, "bands")
    kind = fields["kind"].lower()
    if kind not in CUBE_KINDS:
        raise CubeFormatError(f"Unknown cube kind '{kind}'. Supported: {', '.join(CUBE_KINDS)}")

    try:
        wavelengths = [float(w) for w in fields["wavelengths"].split(",") if w.strip()]
    except ValueError:
        raise CubeFormatError("Wavelengths must be a comma-separated list of numbers") from None
    if len(wavelengths) != bands:
        raise CubeFormatError(f"Header declares {bands} bands but lists {len(wavelengths)} wavelengths")

    payload_path = path.parent / fields["payload"]
    if not payload_path.is_file():
        raise CubeIngestError(f"Payload not found: {payload_path}")

    raw = payload_path.read_bytes()
    expected = height * width * bands * PAYLOAD_DTYPE.itemsize
    if len(raw) != expected:
        raise CubeFormatError(
            f"Payload {payload_path.name} has {len(raw)} bytes, expected {expected} "
            f"for {height}x{width}x{bands}"
        )

    bsq = np.frombuffer(raw, dtype=PAYLOAD_DTYPE).reshape(bands, height, width)
    values = bsq.transpose(1, 2, 0).astype(np.float32)

    cube = HyperCube(values=values, wavelengths_nm=np.array(wavelengths), kind=kind)
    logger.debug("Loaded %s: %dx%dx%d %s", path.name, height, width, bands, kind)
    return cube


# === ENVI ===

ENVI_MAGIC = "ENVI"
MICROMETER_UNITS = ("micrometers", "micrometer", "um", "µm", "microns")


def is_envi_header(header_path: PathLike) -> bool:
    """True if the header starts with the ENVI magic line."""
    with open(header_path, encoding="utf-8", errors="replace") as f:
        return f.readline().strip() == ENVI_MAGIC


def load_envi_cube(header_path: PathLike, kind: str = REFLECTANCE) -> HyperCube:
    """Load a standard ENVI image (any interleave and data type) as a cube.

    Wavelengths in micrometers are converted to nm. A ``reflectance scale
    factor`` in the header is divided out.
    """
    path = Path(header_path)
    try:
        image = envi.open(str(path))
        values = np.asarray(image.load(), dtype=np.float32)
    except envi.EnviException as e:
        raise CubeFormatError(f"{path.name}: {e}") from e
    except (OSError, ValueError) as e:
        raise CubeIngestError(f"{path.name}: {e}") from e

    centers = image.bands.centers
    if not centers:
        raise CubeFormatError(f"{path.name}: ENVI header has no wavelength list")
    wavelengths = np.asarray(centers, dtype=np.float64)
    units = str(image.metadata.get("wavelength units", "nm")).strip().lower()
    if units in MICROMETER_UNITS:
        wavelengths = wavelengths * 1000.0

    scale = image.metadata.get("reflectance scale factor")
    if scale is not None:
        values = values / np.float32(float(scale))

    cube = HyperCube(values=values, wavelengths_nm=wavelengths, kind=kind)
    logger.debug("Loaded ENVI %s: %dx%dx%d %s", path.name, cube.height, cube.width, cube.bands, kind)
    return cube


def _format_wavelength(w: float) -> str:
    return repr(float(w)) if not float(w).is_integer() else str(int(w))


def write_cube(cube: HyperCube, header_path: PathLike) -> Path:
    """Write a cube as header + payload. Returns the payload path."""
    path = Path(header_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload_path = path.with_suffix(PAYLOAD_SUFFIX)

    lines = [
        f"height={cube.height}",
        f"width={cube.width}",
        f"bands={cube.bands}",
        f"kind={cube.kind}",
        f"payload={payload_path.name}",
        "wavelengths=" + ",".join(_format_wavelength(w) for w in cube.wavelengths_nm),
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    bsq = np.ascontiguousarray(cube.values.transpose(2, 0, 1), dtype=PAYLOAD_DTYPE)
    payload_path.write_bytes(bsq.tobytes())
    return payload_path


def names_path(labels_path: PathLike) -> Path:
    path = Path(labels_path)
    return path.with_name(path.stem + ".names.json")


def write_labels(labels: LabelMap, csv_path: PathLike) -> None:
    """Write labeled pixels as row,col,class_id plus a class-name sidecar.

    The sidecar also stores the map dimensions, since the CSV lists labeled
    pixels only.
    """
    path = Path(csv_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows, cols = np.nonzero(labels.classes)

    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["row", "col", "class_id"])
        for r, c in zip(rows.tolist(), cols.tolist()):
            writer.writerow([r, c, int(labels.classes[r, c])])

    sidecar = {
        "height": labels.height,
        "width": labels.width,
        "class_names": {str(k): v for k, v in sorted(labels.class_names.items())},
    }
    names_path(path).write_text(json.dumps(sidecar, indent=2, ensure_ascii=False), encoding="utf-8")


def load_labels(csv_path: PathLike) -> LabelMap:
    path = Path(csv_path)
    sidecar_path = names_path(path)
    for p in (path, sidecar_path):
        if not p.is_file():
            raise CubeIngestError(f"Label file not found: {p}")

    try:
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
        height, width = int(sidecar["height"]), int(sidecar["width"])
        class_names = {int(k): v for k, v in sidecar["class_names"].items()}
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CubeFormatError(f"Invalid class-name sidecar {sidecar_path.name}: {e}") from None

    classes = np.zeros((height, width), dtype=np.int64)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["row", "col", "class_id"]:
            raise CubeFormatError(f"{path.name}: expected header row,col,class_id, got {header}")
        for lineno, record in enumerate(reader, 2):
            try:
                r, c, k = (int(v) for v in record)
            except ValueError:
                raise CubeFormatError(f"{path.name}:{lineno}: malformed record {record}") from None
            if not (0 <= r < height and 0 <= c < width):
                raise CubeFormatError(f"{path.name}:{lineno}: pixel ({r}, {c}) outside {height}x{width}")
            classes[r, c] = k

    return LabelMap(classes=classes, class_names=class_names)


def write_split(split: SplitSpec, json_path: PathLike) -> None:
    path = Path(json_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {
        "per_class_train": split.per_class_train,
        "seed": split.seed,
        "train_indices": list(split.train_indices),
        "test_indices": list(split.test_indices),
    }
    path.write_text(json.dumps(data), encoding="utf-8")


def load_split(json_path: PathLike) -> SplitSpec:
    path = Path(json_path)
    if not path.is_file():
        raise CubeIngestError(f"Split file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        return SplitSpec(
            per_class_train=int(data["per_class_train"]),
            seed=int(data["seed"]),
            train_indices=tuple(data["train_indices"]),
            test_indices=tuple(data["test_indices"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise CubeFormatError(f"Invalid split file {path.name}: {e}") from None
