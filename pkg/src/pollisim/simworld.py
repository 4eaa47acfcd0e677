"""Synthetic ground-truth world and stochastic measurement oracle.

This stands in for the camera + neural perception stack: it samples viewpoints
around a scene, projects ground-truth flowers, and emits noisy single-shot
pose measurements whose error statistics are calibrated against reference
single-shot accuracy targets (see NoiseModel). No rendering is performed,
only geometry.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import CameraPose, Intrinsics, PixelObs, look_at, project, to_world, uplift
from .so3 import (
    Pose,
    from_axis_angle,
    random_rotation,
    random_unit_vector,
    rot_z,
    rotation_from_list,
    rotation_to_list,
    zaxis_angle,
)


class ParseError(ValueError):
    """Scene or model file could not be parsed."""


class InvariantViolation(ValueError):
    """Scene data violates a declared invariant (names the offending flower)."""


class SingularCovariance(ValueError):
    """Covariance is not invertible (or not positive definite) within tolerance."""


@dataclass(eq=False)
class FlowerGT:
    """Ground-truth flower: unique id, world pose, pollination state."""

    id: int
    pose: Pose
    pollinated: bool = False


@dataclass(frozen=True)
class NoiseModel:
    """Stochastic observation model for single-shot flower measurements.

    Defaults reproduce the reference single-shot perception statistics
    (mean translational error 3.03 cm, mean facing-axis error 29.88 deg,
    detection success rate 93.01%) over the standard survey viewpoint
    distribution; they were produced by the `calibrate-noise` CLI command,
    not chosen by hand. Depth noise is range-dependent: `depth_sigma_near`
    applies inside `reliable_range`, `depth_sigma_far` outside it, modelling
    a depth camera that degrades sharply beyond its optimal band.
    """

    detect_prob: float = 0.9375
    pixel_sigma: float = 5.6
    depth_sigma_near: float = 0.0046875
    depth_sigma_far: float = 0.09375
    reliable_range: tuple[float, float] = (0.07, 0.50)
    rot_sigma: float = 48.75
    clutter_rate: float = 0.1
    flip_prob: float = 0.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.detect_prob <= 1.0):
            raise ValueError("detect_prob must be in [0, 1]")
        for name in ("pixel_sigma", "depth_sigma_near", "depth_sigma_far", "rot_sigma", "clutter_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        lo, hi = self.reliable_range
        if not lo < hi:
            raise ValueError("reliable_range must satisfy min < max")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ValueError("flip_prob must be in [0, 1]")

    @classmethod
    def noiseless(cls) -> "NoiseModel":
        return cls(
            detect_prob=1.0,
            pixel_sigma=0.0,
            depth_sigma_near=0.0,
            depth_sigma_far=0.0,
            rot_sigma=0.0,
            clutter_rate=0.0,
            flip_prob=0.0,
        )

    def to_json(self) -> dict:
        return {
            "detect_prob": self.detect_prob,
            "pixel_sigma": self.pixel_sigma,
            "depth_sigma_near": self.depth_sigma_near,
            "depth_sigma_far": self.depth_sigma_far,
            "reliable_range": list(self.reliable_range),
            "rot_sigma": self.rot_sigma,
            "clutter_rate": self.clutter_rate,
            "flip_prob": self.flip_prob,
        }

    @classmethod
    def from_json(cls, d: dict) -> "NoiseModel":
        kwargs = dict(d)
        if "reliable_range" in kwargs:
            rr = kwargs["reliable_range"]
            kwargs["reliable_range"] = (float(rr[0]), float(rr[1]))
        return cls(**kwargs)


@dataclass(eq=False)
class GaussianBlob:
    """Anisotropic 3D Gaussian with a sigmoid-activated amplitude.

    The activation is fixed to the logistic sigmoid.
    """

    x_i: np.ndarray
    sigma_i: np.ndarray
    alpha_i: float

    def __post_init__(self) -> None:
        self.x_i = np.asarray(self.x_i, dtype=float).reshape(3)
        self.sigma_i = np.asarray(self.sigma_i, dtype=float).reshape(3, 3)


@dataclass(eq=False)
class Measurement:
    """One single-shot flower observation from one camera at one tick."""

    pixel: PixelObs
    position_world: np.ndarray
    rotation: np.ndarray
    camera_id: int
    tick: int


@dataclass(eq=False)
class ShotRecord:
    """Per-visible-flower oracle bookkeeping (ground-truth linked).

    flower_id is -1 for clutter (false positive) measurements; error fields
    are NaN when not applicable.
    """

    flower_id: int
    detected: bool
    px_err: float
    trans_err: float
    rot_err_deg: float
    measurement: Measurement | None = None


def sample_viewpoint(
    rng: np.random.Generator,
    center: np.ndarray,
    radius_range: tuple[float, float],
    elevation_range: tuple[float, float],
) -> CameraPose:
    """Random camera pose on a spherical shell sector, looking at `center`.

    Radius is uniform in [min, max], elevation uniform in degrees, azimuth
    uniform in [0, 360). The camera optical axis passes through `center` and
    the image up direction is regularized to world z.
    """
    rmin, rmax = radius_range
    if not (0 < rmin <= rmax):
        raise ValueError("radius_range must satisfy 0 < min <= max")
    center = np.asarray(center, dtype=float)
    r = rng.uniform(rmin, rmax)
    elev = math.radians(rng.uniform(*elevation_range))
    azim = rng.uniform(0.0, 2.0 * math.pi)
    offset = r * np.array(
        [math.cos(elev) * math.cos(azim), math.cos(elev) * math.sin(azim), math.sin(elev)]
    )
    return look_at(center + offset, center)


def _in_band(depth: float, band: tuple[float, float]) -> bool:
    return band[0] <= depth <= band[1]


def observe_with_truth(
    scene: list[FlowerGT],
    cam: CameraPose,
    k: Intrinsics,
    noise: NoiseModel,
    rng: np.random.Generator,
    camera_id: int = 0,
    tick: int = 0,
) -> tuple[list[Measurement], list[ShotRecord]]:
    """Noisy measurements plus ground-truth-linked shot records.

    For each flower whose projection is visible: detect with probability
    detect_prob; perturb the pixel isotropically, the ray depth with the
    range-dependent sigma, and the rotation by a random axis-angle whose
    angle is folded Gaussian. The world position is recomputed from the noisy
    pixel/depth through uplift + to_world. Clutter measurements (Poisson) are
    appended at uniform image positions. Draw order is fixed, so identical
    (scene, camera, rng state) gives identical streams.
    """
    measurements: list[Measurement] = []
    records: list[ShotRecord] = []
    for flower in scene:
        obs = project(flower.pose.position, cam, k)
        if obs is None:
            continue
        if rng.random() >= noise.detect_prob:
            records.append(
                ShotRecord(flower.id, False, float("nan"), float("nan"), float("nan"))
            )
            continue
        u = obs.u + rng.normal(0.0, noise.pixel_sigma)
        v = obs.v + rng.normal(0.0, noise.pixel_sigma)
        sigma_d = noise.depth_sigma_near if _in_band(obs.ray_depth, noise.reliable_range) else noise.depth_sigma_far
        depth = obs.ray_depth + rng.normal(0.0, sigma_d)
        depth = max(depth, 1e-6)  # keeps the uplift precondition under extreme draws
        axis = random_unit_vector(rng)
        angle = abs(rng.normal(0.0, math.radians(noise.rot_sigma)))
        rot = from_axis_angle(axis, angle) @ flower.pose.rotation
        if noise.flip_prob > 0.0 and rng.random() < noise.flip_prob:
            # Ambiguous-appearance failure mode: facing direction flips about
            # a random axis orthogonal to it.
            z = rot[:, 2]
            perp = np.cross(z, random_unit_vector(rng))
            while np.linalg.norm(perp) <= 1e-9:
                perp = np.cross(z, random_unit_vector(rng))
            rot = from_axis_angle(perp, math.pi) @ rot
        noisy_pixel = PixelObs(u=float(u), v=float(v), ray_depth=float(depth))
        pos_world = to_world(uplift(noisy_pixel, k), cam)
        m = Measurement(noisy_pixel, pos_world, rot, camera_id, tick)
        measurements.append(m)
        records.append(
            ShotRecord(
                flower_id=flower.id,
                detected=True,
                px_err=float(math.hypot(u - obs.u, v - obs.v)),
                trans_err=float(np.linalg.norm(pos_world - flower.pose.position)),
                rot_err_deg=zaxis_angle(rot, flower.pose.rotation),
                measurement=m,
            )
        )
    n_clutter = int(rng.poisson(noise.clutter_rate)) if noise.clutter_rate > 0 else 0
    for _ in range(n_clutter):
        u = rng.uniform(0.0, k.width)
        v = rng.uniform(0.0, k.height)
        depth = rng.uniform(*noise.reliable_range)
        pix = PixelObs(u=float(u), v=float(v), ray_depth=float(depth))
        m = Measurement(pix, to_world(uplift(pix, k), cam), random_rotation(rng), camera_id, tick)
        measurements.append(m)
        records.append(
            ShotRecord(-1, True, float("nan"), float("nan"), float("nan"), measurement=m)
        )
    return measurements, records


def observe(
    scene: list[FlowerGT],
    cam: CameraPose,
    k: Intrinsics,
    noise: NoiseModel,
    rng: np.random.Generator,
    camera_id: int = 0,
    tick: int = 0,
) -> list[Measurement]:
    """Noisy single-shot measurements of all visible flowers (plus clutter)."""
    return observe_with_truth(scene, cam, k, noise, rng, camera_id, tick)[0]


def evaluate_gaussian(blob: GaussianBlob, xi: np.ndarray) -> float:
    """Sigmoid-amplitude Gaussian density sigma(alpha) * exp(-0.5 d^T S^-1 d)."""
    xi = np.asarray(xi, dtype=float).reshape(3)
    sigma = blob.sigma_i
    if np.abs(sigma - sigma.T).max() > 1e-9:
        raise SingularCovariance("covariance must be symmetric")
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("covariance is not positive definite") from exc
    if np.diag(chol).min() <= 1e-12:
        raise SingularCovariance("covariance is singular within tolerance")
    d = xi - blob.x_i
    y = np.linalg.solve(chol, d)
    amp = 1.0 / (1.0 + math.exp(-blob.alpha_i))
    return float(amp * math.exp(-0.5 * float(y @ y)))


def _flower_from_json(entry: dict, index: int) -> FlowerGT:
    try:
        fid = int(entry["id"])
        position = np.asarray(entry["position"], dtype=float).reshape(3)
        rot_values = entry["rotation"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"flowers[{index}]: missing or malformed field ({exc})") from exc
    try:
        rotation = rotation_from_list(rot_values)
    except ValueError as exc:
        raise InvariantViolation(f"flower id {fid}: {exc}") from exc
    if not np.isfinite(position).all():
        raise InvariantViolation(f"flower id {fid}: non-finite position")
    return FlowerGT(id=fid, pose=Pose(position, rotation), pollinated=bool(entry.get("pollinated", False)))


def load_scene(path: str) -> list[FlowerGT]:
    """Load and validate a scene JSON file; flowers returned sorted by id."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read scene file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(data, dict) or "flowers" not in data:
        raise ParseError(f"{path}: expected object with a 'flowers' list")
    entries = data["flowers"]
    if not isinstance(entries, list):
        raise ParseError(f"{path}: 'flowers' must be a list")
    flowers = [_flower_from_json(e, i) for i, e in enumerate(entries)]
    seen: set[int] = set()
    for f in flowers:
        if f.id in seen:
            raise InvariantViolation(f"flower id {f.id}: duplicate id")
        seen.add(f.id)
    return sorted(flowers, key=lambda f: f.id)


def save_scene(path: str, flowers: list[FlowerGT]) -> None:
    """Write a scene JSON file (deterministic key order)."""
    data = {
        "flowers": [
            {
                "id": f.id,
                "position": [float(x) for x in f.pose.position],
                "rotation": rotation_to_list(f.pose.rotation),
                "pollinated": f.pollinated,
            }
            for f in sorted(flowers, key=lambda f: f.id)
        ]
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def generate_scene(
    rng: np.random.Generator,
    count: int,
    center: np.ndarray = (0.0, 0.0, 0.0),
    spread: float = 0.12,
    min_sep: float = 0.10,
    max_tilt_deg: float = 45.0,
) -> list[FlowerGT]:
    """Random scene: clustered positions with a minimum separation, facing
    directions within a cone of world-up, random twist about the facing axis.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    center = np.asarray(center, dtype=float)
    positions: list[np.ndarray] = []
    attempts = 0
    while len(positions) < count:
        p = center + rng.normal(0.0, spread, size=3)
        if all(np.linalg.norm(p - q) >= min_sep for q in positions):
            positions.append(p)
        attempts += 1
        if attempts > 10000 * max(count, 1):
            raise ValueError("cannot satisfy min_sep; reduce it or increase spread")
    flowers = []
    for i, p in enumerate(positions):
        tilt = math.radians(rng.uniform(0.0, max_tilt_deg))
        azim = rng.uniform(0.0, 2.0 * math.pi)
        tilt_axis = np.array([-math.sin(azim), math.cos(azim), 0.0])
        rot = from_axis_angle(tilt_axis, tilt) @ rot_z(rng.uniform(0.0, 2.0 * math.pi))
        flowers.append(FlowerGT(id=i, pose=Pose(p, rot)))
    return flowers


# Viewpoint distribution used for single-shot calibration and the filter
# convergence survey. It deliberately straddles the depth reliable band so the
# reference single-shot error mixes accurate in-band and degraded out-of-band
# depth readings.
SURVEY_RADIUS_RANGE = (0.15, 0.70)
SURVEY_ELEVATION_RANGE = (10.0, 70.0)


@dataclass
class SingleShotStats:
    """Empirical single-shot oracle statistics over independent viewpoints."""

    opportunities: int
    trans_errors: list[float] = field(default_factory=list)
    rot_errors: list[float] = field(default_factory=list)
    px_errors: list[float] = field(default_factory=list)
    detections_within_px: int = 0

    @property
    def mean_trans(self) -> float:
        return float(np.mean(self.trans_errors)) if self.trans_errors else float("nan")

    @property
    def mean_rot(self) -> float:
        return float(np.mean(self.rot_errors)) if self.rot_errors else float("nan")

    @property
    def mean_px(self) -> float:
        return float(np.mean(self.px_errors)) if self.px_errors else float("nan")

    @property
    def detection_rate(self) -> float:
        return self.detections_within_px / self.opportunities if self.opportunities else float("nan")


def single_shot_stats(
    noise: NoiseModel,
    k: Intrinsics,
    n_samples: int,
    rng: np.random.Generator,
    radius_range: tuple[float, float] = SURVEY_RADIUS_RANGE,
    elevation_range: tuple[float, float] = SURVEY_ELEVATION_RANGE,
    detect_px_threshold: float = 20.0,
) -> SingleShotStats:
    """Sample one flower from n_samples independent viewpoints and collect
    the oracle's single-shot error statistics (clutter excluded).
    """
    stats = SingleShotStats(opportunities=0)
    quiet = replace(noise, clutter_rate=0.0)
    flower = FlowerGT(id=0, pose=Pose(np.zeros(3), np.eye(3)))
    for _ in range(n_samples):
        flower.pose = Pose(np.zeros(3), random_rotation(rng))
        cam = sample_viewpoint(rng, flower.pose.position, radius_range, elevation_range)
        _, records = observe_with_truth([flower], cam, k, quiet, rng)
        for rec in records:
            stats.opportunities += 1
            if not rec.detected:
                continue
            stats.trans_errors.append(rec.trans_err)
            stats.rot_errors.append(rec.rot_err_deg)
            stats.px_errors.append(rec.px_err)
            if rec.px_err <= detect_px_threshold:
                stats.detections_within_px += 1
    return stats
