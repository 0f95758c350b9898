"""Synthetic marker-based tactile sensor.

Pin layouts, a radial-Gaussian membrane deformation model standing in for the
physical skin, and an optional rasterize -> blob-detect path that mimics the
camera preprocessing (threshold, connected components, weighted centroids).

All geometry is in millimetres in the sensor frame, origin at the dome apex.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

PX_PER_MM = 10.0
DEFAULT_LENS_K = 0.02
DEFAULT_TAP_DEPTH = 2.0

# training envelope of the collection protocol
Y_OFFSET_RANGE = (-2.0, 2.0)
THETA_RANGE = (-30.0, 30.0)
SHEAR_X_RANGE = (-5.0, 5.0)
SHEAR_ROLL_RANGE = (-5.0, 5.0)


class ConfigurationError(ValueError):
    pass


class BlobCountError(RuntimeError):
    def __init__(self, expected: int, found: int):
        super().__init__(f"blob detection found {found} blobs, expected {expected} "
                         "(overlapping or clipped dots)")
        self.expected = expected
        self.found = found


class LayoutKind(str, enum.Enum):
    HEXAGONAL127 = "hexagonal127"
    ROUND331 = "round331"
    CUSTOM = "custom"

    @classmethod
    def parse(cls, value: "str | LayoutKind") -> "LayoutKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("_", ""))
        except ValueError:
            raise ConfigurationError(f"unknown layout kind {value!r}") from None


@dataclass
class SensorLayout:
    kind: LayoutKind
    pitch: float
    markers: np.ndarray                 # (N, 2) rest positions, mm
    boundary_radius: float
    rings: np.ndarray | None = None     # ring index per marker, 0 = centre pin

    def __len__(self) -> int:
        return len(self.markers)

    @property
    def outer_ring(self) -> np.ndarray | None:
        """Indices of the outermost ring, or None for layouts without ring structure."""
        if self.rings is None:
            return None
        return np.flatnonzero(self.rings == self.rings.max())

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "pitch": round(self.pitch, 6),
            "markers": np.round(self.markers, 6).tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "SensorLayout":
        markers = np.asarray(data["markers"], dtype=float).reshape(-1, 2)
        kind = LayoutKind.parse(data["kind"])
        pitch = float(data["pitch"])
        if kind is not LayoutKind.CUSTOM:
            ref = build_layout(kind, pitch)
            if len(ref) == len(markers) and np.allclose(ref.markers, markers, atol=1e-6):
                return ref
        return custom_layout(markers, pitch)


def _hexagonal_lattice(rings: int) -> tuple[np.ndarray, np.ndarray]:
    dirs = [np.array([math.cos(math.pi / 3 * i), math.sin(math.pi / 3 * i)]) for i in range(6)]
    pts = [np.zeros(2)]
    ring_of = [0]
    for r in range(1, rings + 1):
        # walking each side from its corner keeps the ring sorted by angle from 0
        for side in range(6):
            start, step = dirs[side] * r, dirs[(side + 2) % 6]
            for j in range(r):
                pts.append(start + step * j)
                ring_of.append(r)
    return np.array(pts), np.array(ring_of)


def _round_rings(rings: int) -> tuple[np.ndarray, np.ndarray]:
    pts = [np.zeros(2)]
    ring_of = [0]
    for r in range(1, rings + 1):
        n = 6 * r
        for j in range(n):
            a = 2 * math.pi * j / n
            pts.append(np.array([r * math.cos(a), r * math.sin(a)]))
            ring_of.append(r)
    return np.array(pts), np.array(ring_of)


def _lens(points: np.ndarray, k: float) -> np.ndarray:
    # radial pincushion term of the camera optics; k=0 gives the ideal lattice
    r = np.linalg.norm(points, axis=1)
    rmax = r.max()
    if k == 0 or rmax == 0:
        return points.copy()
    return points * (1 + k * (r / rmax) ** 2)[:, None]


def build_layout(kind: "LayoutKind | str", pitch: float = 1.0, rings: int | None = None,
                 lens_k: float = DEFAULT_LENS_K) -> SensorLayout:
    """Rest pin positions for a sensor morphology.

    Hexagonal127 is a centred hexagonal grid of 6 rings, Round331 is 10
    concentric rings of 6*i pins plus the centre. Ordering is ring-major,
    angle-minor. Passing ``rings`` builds the same family with a different
    ring count and marks the layout as custom.
    """
    kind = LayoutKind.parse(kind)
    if pitch <= 0:
        raise ConfigurationError("pitch must be positive")
    if kind is LayoutKind.HEXAGONAL127:
        pts, ring_of = _hexagonal_lattice(6 if rings is None else rings)
    elif kind is LayoutKind.ROUND331:
        pts, ring_of = _round_rings(10 if rings is None else rings)
    else:
        raise ConfigurationError("custom layouts are built with custom_layout()")
    if rings is not None:
        kind = LayoutKind.CUSTOM
    markers = _lens(pts * pitch, lens_k)
    radius = float(np.linalg.norm(markers, axis=1).max()) + pitch / 2
    return SensorLayout(kind, float(pitch), markers, radius, ring_of)


def custom_layout(markers, pitch: float = 1.0) -> SensorLayout:
    markers = np.asarray(markers, dtype=float).reshape(-1, 2)
    radius = float(np.linalg.norm(markers, axis=1).max()) + pitch / 2 if len(markers) else 0.0
    return SensorLayout(LayoutKind.CUSTOM, float(pitch), markers, radius, None)


@dataclass(frozen=True)
class ContactPose:
    """Contact label. ``y_depth`` is the net indentation of the dome in mm."""

    y_depth: float = 0.0
    theta_roll: float = 0.0     # deg
    shear_x: float = 0.0        # mm
    shear_roll: float = 0.0     # deg

    def validate(self, tap_depth: float = DEFAULT_TAP_DEPTH) -> None:
        """Raise if the pose lies outside the collection envelope."""
        checks = [
            ("y_depth offset", self.y_depth - tap_depth, Y_OFFSET_RANGE),
            ("theta_roll", self.theta_roll, THETA_RANGE),
            ("shear_x", self.shear_x, SHEAR_X_RANGE),
            ("shear_roll", self.shear_roll, SHEAR_ROLL_RANGE),
        ]
        for name, value, (lo, hi) in checks:
            if not (lo - 1e-12 <= value <= hi + 1e-12):
                raise ConfigurationError(f"{name}={value:g} outside [{lo:g}, {hi:g}]")

    def label(self) -> tuple[float, float]:
        return (self.y_depth, self.theta_roll)


@dataclass
class MarkerFrame:
    positions: np.ndarray                   # (N, 2) mm, same order as the layout
    source_pose: ContactPose | None = None
    layout: SensorLayout | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.positions)

    def to_json(self) -> dict:
        return {
            "positions": np.round(self.positions, 6).tolist(),
            "source_pose": None if self.source_pose is None else asdict(self.source_pose),
        }

    @classmethod
    def from_json(cls, data: dict, layout: SensorLayout | None = None) -> "MarkerFrame":
        pose = data.get("source_pose")
        return cls(np.asarray(data["positions"], dtype=float).reshape(-1, 2),
                   ContactPose(**pose) if pose else None, layout)


def rest_frame(layout: SensorLayout) -> MarkerFrame:
    return MarkerFrame(layout.markers.copy(), ContactPose(), layout)


@dataclass(frozen=True)
class DeformationParams:
    dome_radius: float = 12.0
    push_gain: float = 0.25         # alpha, radial push per mm of depth
    contact_sigma: float = 3.0      # mm
    roll_offset_gain: float = 8.0   # contact-centre shift, mm per rad of roll
    noise_std: float = 0.01         # mm
    compliance_gain: float = 1.0    # 1 = rigid object
    shear_gain: float = 0.05        # skin drag, mm of marker motion per mm of shear
    eps: float = 1e-9

    def validate(self, layout: SensorLayout | None = None) -> None:
        if self.contact_sigma <= 0:
            raise ConfigurationError("contact_sigma must be positive")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be non-negative")
        if not 0 <= self.compliance_gain <= 1:
            raise ConfigurationError("compliance_gain must lie in [0, 1]")
        if layout is not None and self.dome_radius <= layout.boundary_radius:
            raise ConfigurationError(
                f"dome_radius {self.dome_radius} must exceed boundary radius {layout.boundary_radius:.3f}")

    def injective_depth_bound(self) -> float:
        """Largest effective depth for which the radial push stays injective.

        The radial map r -> r + a*exp(-r^2/2s^2) is monotone iff a < s*sqrt(e).
        """
        return self.contact_sigma * math.sqrt(math.e) / self.push_gain


def deform(layout: SensorLayout, pose: ContactPose, params: DeformationParams = DeformationParams(),
           seed: int = 0) -> MarkerFrame:
    """Displace the rest markers for a contact.

    The contact centre sits at ``roll_offset_gain * theta`` along x. Markers are
    pushed radially away from it with a Gaussian falloff scaled by the
    effective depth. Shear is a nuisance: ``shear_x`` drags the stuck skin along
    x and ``shear_roll`` twists it about the contact centre, both inside the
    contact patch only.
    """
    params.validate(layout)
    vals = (pose.y_depth, pose.theta_roll, pose.shear_x, pose.shear_roll)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("pose must be finite")
    p = layout.markers
    c = np.array([params.roll_offset_gain * math.radians(pose.theta_roll), 0.0])
    d = max(0.0, pose.y_depth) * params.compliance_gain
    rel = p - c
    dist = np.linalg.norm(rel, axis=1)
    w = np.exp(-dist ** 2 / (2 * params.contact_sigma ** 2))
    push = (params.push_gain * d * w / np.maximum(dist, params.eps))[:, None] * rel
    stick = min(d, 1.0) * w
    drag = np.zeros_like(p)
    drag[:, 0] = params.shear_gain * pose.shear_x * stick
    phi = math.radians(pose.shear_roll) * stick
    cos, sin = np.cos(phi), np.sin(phi)
    twist = np.stack([cos * rel[:, 0] - sin * rel[:, 1], sin * rel[:, 0] + cos * rel[:, 1]], axis=1) - rel
    out = p + push + drag + twist
    if params.noise_std > 0:
        out = out + np.random.default_rng(seed).normal(0.0, params.noise_std, size=p.shape)
    return MarkerFrame(out, pose, layout)


def mm_to_px(points: np.ndarray, width: int, height: int) -> np.ndarray:
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    cx, cy = (width - 1) / 2, (height - 1) / 2
    return np.stack([cx + points[:, 0] * PX_PER_MM, cy - points[:, 1] * PX_PER_MM], axis=1)


def px_to_mm(points: np.ndarray, width: int, height: int) -> np.ndarray:
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    cx, cy = (width - 1) / 2, (height - 1) / 2
    return np.stack([(points[:, 0] - cx) / PX_PER_MM, (cy - points[:, 1]) / PX_PER_MM], axis=1)


def rasterize(frame: MarkerFrame, width: int = 640, height: int = 640, dot_radius: float = 3.0) -> np.ndarray:
    """Render markers as anti-aliased bright discs on black, uint8 (height, width)."""
    img = np.zeros((height, width), dtype=float)
    centres = mm_to_px(frame.positions, width, height)
    reach = int(math.ceil(dot_radius + 1))
    for x, y in centres:
        if not (reach <= x < width - reach and reach <= y < height - reach):
            raise ValueError(f"marker at px ({x:.1f}, {y:.1f}) falls outside the {width}x{height} image")
        x0, y0 = int(round(x)), int(round(y))
        ys, xs = np.mgrid[y0 - reach:y0 + reach + 1, x0 - reach:x0 + reach + 1]
        cover = np.clip(dot_radius + 0.5 - np.hypot(xs - x, ys - y), 0.0, 1.0)
        patch = img[y0 - reach:y0 + reach + 1, x0 - reach:x0 + reach + 1]
        np.maximum(patch, cover, out=patch)
    return np.round(img * 255).astype(np.uint8)


def blob_detect(image: np.ndarray, threshold: int = 64, expected: int | None = None) -> np.ndarray:
    """Intensity-weighted centroids (x_px, y_px) of bright connected components.

    Components are taken over pixels at or above ``threshold`` with
    8-connectivity. If ``expected`` is given a count mismatch raises
    BlobCountError.
    """
    image = np.asarray(image)
    mask = image >= threshold
    labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
    if expected is not None and n != expected:
        raise BlobCountError(expected, n)
    if n == 0:
        return np.zeros((0, 2))
    weights = np.where(mask, image.astype(float), 0.0)
    rc = np.array(ndimage.center_of_mass(weights, labels, np.arange(1, n + 1))).reshape(-1, 2)
    return rc[:, ::-1].copy()


def frame_from_image(image: np.ndarray, layout: SensorLayout, pose: ContactPose | None = None,
                     threshold: int = 64) -> MarkerFrame:
    """Detect blobs and put them back into layout order.

    Assignment is the minimum-cost matching against the rest layout, which is
    unambiguous while markers move less than half a pitch.
    """
    from scipy.optimize import linear_sum_assignment

    h, w = image.shape
    found = px_to_mm(blob_detect(image, threshold, expected=len(layout)), w, h)
    cost = np.linalg.norm(layout.markers[:, None, :] - found[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    positions = np.empty_like(layout.markers)
    positions[rows] = found[cols]
    return MarkerFrame(positions, pose, layout)


def write_pgm(path: "str | Path", image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path, format="PPM")


def read_pgm(path: "str | Path") -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.array(im.convert("L"))


def save_layout(path: "str | Path", layout: SensorLayout) -> None:
    Path(path).write_text(json.dumps(layout.to_json()))


def load_layout(path: "str | Path") -> SensorLayout:
    return SensorLayout.from_json(json.loads(Path(path).read_text()))


def save_frame(path: "str | Path", frame: MarkerFrame) -> None:
    Path(path).write_text(json.dumps(frame.to_json()))


def load_frame(path: "str | Path", layout: SensorLayout | None = None) -> MarkerFrame:
    return MarkerFrame.from_json(json.loads(Path(path).read_text()), layout)
