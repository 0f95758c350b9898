"""Closed-loop 2D surface following.

The sensor is a dome of radius R whose apex is the logged position. Contact
depth is how far the dome sphere overlaps the object: R minus the distance
from the sphere centre to the contour. The roll angle is measured between
the sensor axis and the inward surface normal at the contact point. Each
cycle the controller rotates the sensor about its sphere centre, moves it
radially along the axis, then steps tangentially so the sensor travels
counter-clockwise around the object.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import sensor_sim as ss
from .graph import GraphKind, build_graph

DIVERGENCE_DEPTH = 8.0      # mm of true contact depth
LOST_CONTACT_STEPS = 10


def _unit(deg: float) -> np.ndarray:
    r = math.radians(deg)
    return np.array([math.cos(r), math.sin(r)])


def wrap_deg(angle: float) -> float:
    """Map to (-180, 180]."""
    a = math.fmod(angle, 360.0)
    if a <= -180:
        a += 360
    elif a > 180:
        a -= 360
    return a


class ContourKind(str, enum.Enum):
    CIRCLE = "circle"
    TEXTURED_CIRCLE = "textured_circle"
    SQUARE = "square"
    BEVELED_PRISM = "beveled_prism"
    COMPLIANT_CIRCLE = "compliant_circle"

    @classmethod
    def parse(cls, value) -> "ContourKind":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "_")
        aliases = {"textured": "textured_circle", "prism": "beveled_prism", "compliant": "compliant_circle"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown contour {value!r}") from None


@dataclass
class Contour:
    kind: ContourKind
    radius: float = 30.0
    side: float = 50.0
    chamfer: float = 8.0
    texture_amplitude: float = 0.3
    texture_frequency: int = 40
    compliance_gain: float = 1.0
    vertices: np.ndarray | None = field(default=None, repr=False)   # ccw polygon, None for circles

    @property
    def analytic(self) -> bool:
        return self.vertices is None

    @property
    def centroid(self) -> np.ndarray:
        return np.zeros(2)

    @property
    def perimeter(self) -> float:
        if self.analytic:
            return 2 * math.pi * self.radius
        seg = np.roll(self.vertices, -1, axis=0) - self.vertices
        return float(np.linalg.norm(seg, axis=1).sum())

    def nearest(self, p) -> tuple[float, np.ndarray, np.ndarray]:
        """Signed distance (positive outside), nearest surface point, outward normal."""
        p = np.asarray(p, dtype=float)
        if self.analytic:
            r = float(np.linalg.norm(p))
            u = p / r if r > 0 else np.array([1.0, 0.0])
            return r - self.radius, u * self.radius, u
        a = self.vertices
        b = np.roll(a, -1, axis=0)
        ab = b - a
        t = np.clip(((p - a) * ab).sum(1) / (ab * ab).sum(1), 0.0, 1.0)
        q = a + t[:, None] * ab
        d = np.linalg.norm(p - q, axis=1)
        i = int(np.argmin(d))
        inside = _inside(self.vertices, p)
        dist = float(d[i])
        if dist > 1e-12:
            n = (p - q[i]) / dist
            if inside:
                n = -n
        else:
            n = np.array([ab[i, 1], -ab[i, 0]]) / np.linalg.norm(ab[i])
        return (-dist if inside else dist), q[i], n

    def signed_distance(self, p) -> float:
        return self.nearest(p)[0]

    def start(self) -> tuple[np.ndarray, np.ndarray]:
        """Surface point on the +x axis and its outward normal."""
        if self.analytic:
            return np.array([self.radius, 0.0]), np.array([1.0, 0.0])
        far = np.array([10.0 * self.side + 10 * self.radius, 0.0])
        # walk in from far away along the axis until the boundary
        lo, hi = 0.0, float(far[0])
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if _inside(self.vertices, np.array([mid, 0.0])):
                lo = mid
            else:
                hi = mid
        q = np.array([hi, 0.0])
        _, qq, n = self.nearest(q + np.array([1e-3, 0.0]))
        return qq, n

    def outline(self, samples: int = 720) -> np.ndarray:
        if self.analytic:
            a = np.linspace(0, 2 * math.pi, samples, endpoint=False)
            return self.radius * np.stack([np.cos(a), np.sin(a)], axis=1)
        return self.vertices


def _inside(poly: np.ndarray, p: np.ndarray) -> bool:
    x, y = p
    xi, yi = poly[:, 0], poly[:, 1]
    xj, yj = np.roll(xi, 1), np.roll(yi, 1)
    crosses = ((yi > y) != (yj > y)) & (x < (xj - xi) * (y - yi) / np.where(yj != yi, yj - yi, 1.0) + xi)
    return bool(np.count_nonzero(crosses) % 2)


def make_contour(kind, radius: float = 30.0, side: float = 50.0, chamfer: float = 8.0,
                 texture_amplitude: float = 0.3, texture_frequency: int = 40,
                 compliance_gain: float = 0.6) -> Contour:
    """Build one of the five test objects. ``compliance_gain`` only applies to the compliant circle."""
    kind = ContourKind.parse(kind)
    c = Contour(kind, radius, side, chamfer, texture_amplitude, texture_frequency)
    if kind is ContourKind.COMPLIANT_CIRCLE:
        c.compliance_gain = compliance_gain
    elif kind is ContourKind.TEXTURED_CIRCLE:
        a = np.linspace(0, 2 * math.pi, 4000, endpoint=False)
        r = radius + texture_amplitude * np.sin(texture_frequency * a)
        c.vertices = np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
    elif kind is ContourKind.SQUARE:
        h = side / 2
        c.vertices = np.array([[h, -h], [h, h], [-h, h], [-h, -h]])
    elif kind is ContourKind.BEVELED_PRISM:
        h, k = side / 2, chamfer
        c.vertices = np.array([[h, -h + k], [h, h - k], [h - k, h], [-h + k, h],
                               [-h, h - k], [-h, -h + k], [-h + k, -h], [h - k, -h]])
    return c


@dataclass
class SensorPose2D:
    position: np.ndarray    # dome apex, world frame, mm
    heading: float          # deg, direction of the sensor axis

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.heading = wrap_deg(float(self.heading))

    @property
    def axis(self) -> np.ndarray:
        return _unit(self.heading)


@dataclass
class Contact:
    pose: ss.ContactPose
    in_contact: bool
    penetration: float      # geometric overlap of the dome with the object, mm


def true_contact(contour: Contour, sensor: SensorPose2D, dome_radius: float = 12.0) -> Contact:
    """Ground-truth contact pose for a sensor pose.

    ``y_depth`` is the dome indentation the sensor membrane feels, which for a
    compliant object is the geometric overlap scaled by its compliance gain.
    """
    axis = sensor.axis
    centre = sensor.position - dome_radius * axis
    sd, _, normal = contour.nearest(centre)
    pen = dome_radius - sd
    inward = -normal
    theta = math.degrees(math.atan2(inward[0] * axis[1] - inward[1] * axis[0], inward @ axis))
    if pen < -1e-9:
        return Contact(ss.ContactPose(0.0, theta), False, pen)
    return Contact(ss.ContactPose(max(pen, 0.0) * contour.compliance_gain, theta), True, pen)


@dataclass
class PiController:
    kp_r: float = 0.5
    ki_r: float = 0.05
    kp_t: float = 0.4
    ki_t: float = 0.02
    clamp_r: float = 20.0       # limit on the depth integrator, mm*step
    clamp_t: float = 200.0      # limit on the angle integrator, deg*step
    step_length: float = 1.0
    y_ref: float = 2.0
    theta_ref: float = 0.0
    integral_r: float = 0.0
    integral_t: float = 0.0

    def __post_init__(self):
        if min(self.kp_r, self.ki_r, self.kp_t, self.ki_t) < 0:
            raise ValueError("controller gains must be non-negative")

    def reset(self) -> None:
        self.integral_r = self.integral_t = 0.0


def pi_step(controller: PiController, estimate: tuple[float, float], dt: float = 1.0) -> tuple[float, float]:
    """Radial move (mm, positive = deeper) and rotation (deg) from a pose estimate."""
    y, theta = estimate
    e_y = controller.y_ref - y
    e_t = controller.theta_ref - theta
    controller.integral_r = float(np.clip(controller.integral_r + e_y * dt, -controller.clamp_r, controller.clamp_r))
    controller.integral_t = float(np.clip(controller.integral_t + e_t * dt, -controller.clamp_t, controller.clamp_t))
    delta_r = controller.kp_r * e_y + controller.ki_r * controller.integral_r
    delta_t = controller.kp_t * e_t + controller.ki_t * controller.integral_t
    return delta_r, delta_t


# -- estimators ----------------------------------------------------------------

class OracleEstimator:
    """Feeds the true contact pose straight to the controller."""

    graph_kind = None

    def __call__(self, graph, truth: ss.ContactPose) -> tuple[float, float]:
        return truth.y_depth, truth.theta_roll


class ModelEstimator:
    def __init__(self, model, graph_kind="voronoi", k: int = 6, l_scale: float = 1.3):
        from .nn import gcn_forward

        self.model = model
        self.graph_kind = GraphKind.parse(graph_kind)
        self.k, self.l_scale = k, l_scale
        self._forward = gcn_forward

    def __call__(self, graph, truth) -> tuple[float, float]:
        return self._forward(self.model, graph)


class NoisyEstimator:
    """Adds zero-mean Gaussian noise to another estimator's output."""

    def __init__(self, base, std_y: float = 0.0, std_theta: float = 0.0, seed: int = 0):
        self.base = base
        self.graph_kind = getattr(base, "graph_kind", None)
        self.k, self.l_scale = getattr(base, "k", 6), getattr(base, "l_scale", 1.3)
        self.std_y, self.std_theta = std_y, std_theta
        self.rng = np.random.default_rng(seed)

    def __call__(self, graph, truth):
        y, t = self.base(graph, truth)
        return y + self.rng.normal(0, self.std_y) if self.std_y else y, \
            t + self.rng.normal(0, self.std_theta) if self.std_theta else t


# -- trajectory ----------------------------------------------------------------

class Termination(str, enum.Enum):
    COMPLETED = "completed"
    DIVERGED = "diverged"
    MAX_STEPS = "max_steps"


@dataclass
class TrajectoryStep:
    step: int
    pose: SensorPose2D
    estimate: tuple[float, float]
    truth: ss.ContactPose
    commands: tuple[float, float]
    penetration: float
    in_contact: bool


@dataclass
class Trajectory:
    steps: list[TrajectoryStep] = field(default_factory=list)
    termination: Termination = Termination.MAX_STEPS
    contour: str = ""
    estimator: str = ""

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.pose.position for s in self.steps]).reshape(-1, 2)

    @property
    def headings(self) -> np.ndarray:
        return np.array([s.pose.heading for s in self.steps])

    def errors(self, y_ref: float = 2.0, theta_ref: float = 0.0) -> np.ndarray:
        """(n, 2) true depth and roll errors against the reference."""
        return np.array([(s.truth.y_depth - y_ref, s.truth.theta_roll - theta_ref) for s in self.steps]).reshape(-1, 2)

    def to_json(self) -> dict:
        return {
            "termination": self.termination.value, "contour": self.contour, "estimator": self.estimator,
            "steps": [{
                "step": s.step, "position": s.pose.position.tolist(), "heading": s.pose.heading,
                "estimate": list(s.estimate), "truth": [s.truth.y_depth, s.truth.theta_roll],
                "commands": list(s.commands), "penetration": s.penetration, "in_contact": s.in_contact,
            } for s in self.steps],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Trajectory":
        steps = [TrajectoryStep(int(s["step"]), SensorPose2D(np.array(s["position"], dtype=float), s["heading"]),
                                tuple(s["estimate"]), ss.ContactPose(*s["truth"]), tuple(s["commands"]),
                                float(s["penetration"]), bool(s["in_contact"]))
                 for s in data["steps"]]
        return cls(steps, Termination(data["termination"]), data.get("contour", ""), data.get("estimator", ""))


def run_servo(contour: Contour, estimator, controller: PiController | None = None,
              deform_params: ss.DeformationParams = ss.DeformationParams(),
              layout: ss.SensorLayout | None = None, max_steps: int = 600, seed: int = 0) -> Trajectory:
    """Follow ``contour`` until the loop closes, the contact diverges or steps run out."""
    controller = controller or PiController()
    controller.reset()
    layout = layout or ss.build_layout(ss.LayoutKind.ROUND331)
    R = deform_params.dome_radius
    step_len = controller.step_length

    q0, n0 = contour.start()
    centre = q0 + n0 * (R - controller.y_ref / contour.compliance_gain)
    heading = math.degrees(math.atan2(-n0[1], -n0[0]))
    pose = SensorPose2D(centre + R * _unit(heading), heading)
    start_tip = pose.position.copy()
    origin = contour.centroid
    last_angle = math.atan2(*(centre - origin)[::-1])
    wound = 0.0
    lost = 0
    traj = Trajectory(contour=contour.kind.value, estimator=type(estimator).__name__)
    kind = getattr(estimator, "graph_kind", None)

    for k in range(max_steps):
        contact = true_contact(contour, pose, R)
        graph = None
        if kind is not None:
            frame = ss.deform(layout, contact.pose, deform_params, seed=seed * 1_000_003 + k)
            graph = build_graph(frame, kind, getattr(estimator, "k", 6), getattr(estimator, "l_scale", 1.3))
        est = estimator(graph, contact.pose)
        cmd = pi_step(controller, est)
        traj.steps.append(TrajectoryStep(k, SensorPose2D(pose.position.copy(), pose.heading),
                                         (float(est[0]), float(est[1])), contact.pose,
                                         (float(cmd[0]), float(cmd[1])), float(contact.penetration),
                                         contact.in_contact))
        lost = 0 if contact.in_contact else lost + 1
        if abs(contact.pose.y_depth) > DIVERGENCE_DEPTH or lost >= LOST_CONTACT_STEPS:
            traj.termination = Termination.DIVERGED
            return traj

        centre = pose.position - R * pose.axis
        heading = pose.heading + cmd[1]
        axis = _unit(heading)
        centre = centre + cmd[0] * axis + step_len * np.array([axis[1], -axis[0]])
        pose = SensorPose2D(centre + R * axis, heading)

        angle = math.atan2(*(centre - origin)[::-1])
        wound += wrap_deg(math.degrees(angle - last_angle))
        last_angle = angle
        if abs(wound) >= 0.9 * 360 and np.linalg.norm(pose.position - start_tip) <= 2 * step_len:
            traj.termination = Termination.COMPLETED
            return traj
    traj.termination = Termination.MAX_STEPS
    return traj


def smoothness(trajectory) -> tuple[float, float]:
    """(s_turn in deg/mm, s_slope dimensionless); lower is smoother for both.

    ``s_slope`` is the mean absolute slope |dy/dx| between consecutive points
    (|dx| floored at 1e-6 mm). ``s_turn`` is the mean heading change between
    consecutive segments divided by their mean length, which does not depend
    on the world frame.
    """
    pts = trajectory.positions if isinstance(trajectory, Trajectory) else np.asarray(trajectory, dtype=float)
    if len(pts) < 3:
        raise ValueError("smoothness needs at least three points")
    seg = np.diff(pts, axis=0)
    s_slope = float(np.mean(np.abs(seg[:, 1]) / np.maximum(np.abs(seg[:, 0]), 1e-6)))
    length = np.linalg.norm(seg, axis=1)
    keep = length > 1e-12
    seg, length = seg[keep], length[keep]
    if len(seg) < 2:
        raise ValueError("smoothness needs at least two non-degenerate segments")
    ang = np.degrees(np.arctan2(seg[:, 1], seg[:, 0]))
    turn = np.abs((np.diff(ang) + 180.0) % 360.0 - 180.0)
    s_turn = float(np.mean(turn / (0.5 * (length[:-1] + length[1:]))))
    return s_turn, s_slope
