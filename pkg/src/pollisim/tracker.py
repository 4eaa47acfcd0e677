"""Global flower state: per-flower Kalman filtering of position (R3) and
rotation (R9 with SVD re-projection), plus greedy nearest-neighbor association
of incoming measurements to tracks.

Flowers are quasi-static, so the filter uses a static process model (means
unchanged under prediction, covariance inflated by per-tick process noise)
and direct observations of position and of the flattened rotation matrix.
The update is therefore linear even though the surrounding pipeline calls it
a Kalman filter in the extended tradition.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .simworld import Measurement, NoiseModel
from .so3 import flatten, rotation_from_list, rotation_to_list, svd_project


@dataclass(frozen=True)
class TrackerParams:
    """Association, initialization, process and measurement noise settings.

    Position measurement variance is per-axis and band-dependent: `r_pos_near`
    applies to measurements whose ray depth fell inside `reliable_range`,
    `r_pos_far` outside it, mirroring the oracle's range-dependent depth
    noise so degraded readings are down-weighted rather than poisoning the
    fused estimate.
    """

    assoc_threshold: float = 0.05
    init_pos_cov: float = 0.03**2
    init_rot_cov: float = 0.16
    q_pos: float = 1e-6
    q_rot: float = 1e-4
    r_pos_near: float = 1.2e-5
    r_pos_far: float = 2.9e-3
    r_rot: float = 0.16
    reliable_range: tuple[float, float] = (0.07, 0.50)
    stale_ticks: int = 500
    stale_min_hits: int = 3
    confident_trace: float = 1e-4
    confident_hits: int = 3

    @classmethod
    def for_noise(cls, noise: NoiseModel, reference_range: float = 0.30, focal: float = 640.0) -> "TrackerParams":
        """Derive measurement variances from a (calibrated) noise model.

        Per-axis position variance mixes the depth sigma with the lateral
        pixel sigma expressed in meters at the reference range; the rotation
        variance is the expected per-component R9 residual for an axis-angle
        perturbation of scale rot_sigma.
        """
        lat = noise.pixel_sigma / focal * reference_range
        r_near = (noise.depth_sigma_near**2 + 2.0 * lat**2) / 3.0
        r_far = (noise.depth_sigma_far**2 + 2.0 * lat**2) / 3.0
        psi = np.radians(noise.rot_sigma)
        # E||R_meas - R_true||_F^2 = E[8 sin^2(psi/2)] ~= 2 E[psi^2]; spread over 9 components.
        r_rot = max(2.0 * psi**2 / 9.0, 1e-6)
        return cls(
            r_pos_near=max(float(r_near), 1e-12),
            r_pos_far=max(float(r_far), 1e-12),
            r_rot=float(r_rot),
            init_rot_cov=float(r_rot),
            reliable_range=noise.reliable_range,
        )

    def to_json(self) -> dict:
        d = {
            "assoc_threshold": self.assoc_threshold,
            "init_pos_cov": self.init_pos_cov,
            "init_rot_cov": self.init_rot_cov,
            "q_pos": self.q_pos,
            "q_rot": self.q_rot,
            "r_pos_near": self.r_pos_near,
            "r_pos_far": self.r_pos_far,
            "r_rot": self.r_rot,
            "reliable_range": list(self.reliable_range),
            "stale_ticks": self.stale_ticks,
            "stale_min_hits": self.stale_min_hits,
            "confident_trace": self.confident_trace,
            "confident_hits": self.confident_hits,
        }
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrackerParams":
        kwargs = dict(d)
        if "reliable_range" in kwargs:
            rr = kwargs["reliable_range"]
            kwargs["reliable_range"] = (float(rr[0]), float(rr[1]))
        return cls(**kwargs)


@dataclass(eq=False)
class Track:
    """Filtered belief about one flower.

    pos_cov is a full 3x3 SPD matrix; rot_cov is a single isotropic variance
    over the flattened-rotation coordinates. rot_mean is re-projected onto
    SO(3) after every update, so it always satisfies rotation invariants.
    last_meas is the most recent fused raw measurement (used by visual
    servoing, which deliberately bypasses the filtered estimate).
    """

    id: int
    pos_mean: np.ndarray
    pos_cov: np.ndarray
    rot_mean: np.ndarray
    rot_cov: float
    hits: int
    last_tick: int
    pollinated: bool = False
    last_meas: Measurement | None = None


@dataclass(eq=False)
class GlobalState:
    """All tracks plus id allocation, current tick, and arm target claims."""

    tracks: list[Track] = field(default_factory=list)
    next_id: int = 0
    tick: int = 0
    claims: dict[int, int] = field(default_factory=dict)


@dataclass(eq=False)
class Assignment:
    """Result of associating one measurement batch against the tracks.

    Each measurement index appears exactly once across pairs + spawns; each
    track id at most once.
    """

    pairs: list[tuple[int, int]]
    spawns: list[int]


def associate(ms: list[Measurement], gs: GlobalState, threshold: float) -> Assignment:
    """Greedy global-nearest-neighbor association.

    Repeatedly commits the smallest Euclidean (measurement, track) distance
    below `threshold` among still-unassigned pairs; leftover measurements
    spawn. Ties break on lower track id, then lower measurement index, which
    makes the result deterministic and permutation-stable.
    """
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    candidates: list[tuple[float, int, int]] = []
    for mi, m in enumerate(ms):
        for t in gs.tracks:
            d = float(np.linalg.norm(m.position_world - t.pos_mean))
            if d <= threshold:
                candidates.append((d, t.id, mi))
    candidates.sort()
    used_m: set[int] = set()
    used_t: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for d, tid, mi in candidates:
        if mi in used_m or tid in used_t:
            continue
        used_m.add(mi)
        used_t.add(tid)
        pairs.append((mi, tid))
    spawns = [mi for mi in range(len(ms)) if mi not in used_m]
    return Assignment(pairs=pairs, spawns=spawns)


def predict(t: Track, ticks: int, q_pos: float, q_rot: float) -> Track:
    """Static-state prediction: means unchanged, covariance inflated."""
    if ticks < 0:
        raise ValueError("ticks must be >= 0")
    if ticks == 0:
        return t
    return replace(
        t,
        pos_cov=t.pos_cov + ticks * q_pos * np.eye(3),
        rot_cov=t.rot_cov + ticks * q_rot,
    )


def update_position(t: Track, z: np.ndarray, r_meas: float) -> Track:
    """Linear Kalman update with identity observation model on position."""
    if r_meas <= 0:
        raise ValueError("r_meas must be > 0")
    p = t.pos_cov
    kgain = p @ np.linalg.inv(p + r_meas * np.eye(3))
    mean = t.pos_mean + kgain @ (np.asarray(z, dtype=float) - t.pos_mean)
    cov = (np.eye(3) - kgain) @ p
    cov = 0.5 * (cov + cov.T)  # symmetrize against round-off
    return replace(t, pos_mean=mean, pos_cov=cov)


def update_rotation(t: Track, z: np.ndarray, r_meas: float) -> Track:
    """Scalar-gain Kalman update on the flattened rotation, SVD re-projected.

    The state is the 9-vector flatten(rot_mean); the posterior mean is
    projected back to the nearest rotation so the track always stays on the
    manifold.
    """
    if r_meas <= 0:
        raise ValueError("r_meas must be > 0")
    kgain = t.rot_cov / (t.rot_cov + r_meas)
    s = flatten(t.rot_mean)
    s_post = s + kgain * (flatten(z) - s)
    return replace(t, rot_mean=svd_project(s_post), rot_cov=(1.0 - kgain) * t.rot_cov)


def is_confident(t: Track, params: TrackerParams) -> bool:
    """Low-variance, well-supported track: trace(pos_cov) and hits gates."""
    return float(np.trace(t.pos_cov)) < params.confident_trace and t.hits >= params.confident_hits


def get_track(gs: GlobalState, track_id: int) -> Track | None:
    for t in gs.tracks:
        if t.id == track_id:
            return t
    return None


def mark_pollinated(gs: GlobalState, track_id: int) -> None:
    """Record a pollination attempt against a track (at most once per track)."""
    t = get_track(gs, track_id)
    if t is not None:
        t.pollinated = True
    gs.claims.pop(track_id, None)


def claim_target(gs: GlobalState, track_id: int, arm_id: int) -> bool:
    """Try to claim a track for one arm; False if another arm holds it."""
    holder = gs.claims.get(track_id)
    if holder is not None and holder != arm_id:
        return False
    gs.claims[track_id] = arm_id
    return True


def release_target(gs: GlobalState, track_id: int, arm_id: int) -> None:
    if gs.claims.get(track_id) == arm_id:
        gs.claims.pop(track_id, None)


def remove_track(gs: GlobalState, track_id: int) -> None:
    """Drop a track outright (used when direct observation refutes it).

    A real flower re-seeds a fresh track within a few ticks; a clutter-born
    phantom stays gone instead of being re-targeted forever.
    """
    gs.tracks = [t for t in gs.tracks if t.id != track_id]
    gs.claims.pop(track_id, None)


def state_to_json(gs: GlobalState) -> dict:
    """JSON-serializable snapshot of the global state (debugging / replay).

    Raw measurements are not part of the snapshot; a restored state resumes
    filtering but cannot drive visual servoing until fresh measurements land.
    """
    return {
        "next_id": gs.next_id,
        "tick": gs.tick,
        "claims": {str(k): v for k, v in sorted(gs.claims.items())},
        "tracks": [
            {
                "id": t.id,
                "pos_mean": [float(x) for x in t.pos_mean],
                "pos_cov": [float(x) for x in t.pos_cov.reshape(9)],
                "rot_mean": rotation_to_list(t.rot_mean),
                "rot_cov": float(t.rot_cov),
                "hits": t.hits,
                "last_tick": t.last_tick,
                "pollinated": t.pollinated,
            }
            for t in gs.tracks
        ],
    }


def state_from_json(d: dict) -> GlobalState:
    """Rebuild a GlobalState snapshot, re-validating rotation invariants."""
    tracks = [
        Track(
            id=int(e["id"]),
            pos_mean=np.asarray(e["pos_mean"], dtype=float).reshape(3),
            pos_cov=np.asarray(e["pos_cov"], dtype=float).reshape(3, 3),
            rot_mean=rotation_from_list(e["rot_mean"]),
            rot_cov=float(e["rot_cov"]),
            hits=int(e["hits"]),
            last_tick=int(e["last_tick"]),
            pollinated=bool(e["pollinated"]),
        )
        for e in d["tracks"]
    ]
    ids = [t.id for t in tracks]
    if len(ids) != len(set(ids)):
        raise ValueError("snapshot has duplicate track ids")
    return GlobalState(
        tracks=tracks,
        next_id=int(d["next_id"]),
        tick=int(d["tick"]),
        claims={int(k): int(v) for k, v in d.get("claims", {}).items()},
    )


def _spawn(gs: GlobalState, m: Measurement, params: TrackerParams) -> Track:
    t = Track(
        id=gs.next_id,
        pos_mean=np.asarray(m.position_world, dtype=float).copy(),
        pos_cov=params.init_pos_cov * np.eye(3),
        rot_mean=np.asarray(m.rotation, dtype=float).copy(),
        rot_cov=params.init_rot_cov,
        hits=1,
        last_tick=m.tick,
        last_meas=m,
    )
    gs.next_id += 1
    return t


def ingest(gs: GlobalState, ms: list[Measurement], params: TrackerParams) -> GlobalState:
    """Apply one measurement batch from a single camera tick.

    Predicts all tracks to the batch tick, associates, runs the position and
    rotation updates per matched pair, spawns tracks for the rest, and prunes
    stale low-support tracks. Mutates and returns gs; tracks themselves are
    value-like (updates produce fresh Track objects), so snapshots taken
    before ingest stay coherent.
    """
    if not ms:
        return gs
    batch_tick = ms[0].tick
    if any(m.tick != batch_tick for m in ms):
        raise ValueError("measurement batch must come from a single tick")
    dt = max(0, batch_tick - gs.tick)
    gs.tracks = [predict(t, dt, params.q_pos, params.q_rot) for t in gs.tracks]
    gs.tick = max(gs.tick, batch_tick)

    asg = associate(ms, gs, params.assoc_threshold)
    by_id = {t.id: i for i, t in enumerate(gs.tracks)}
    for mi, tid in asg.pairs:
        m = ms[mi]
        lo, hi = params.reliable_range
        r_pos = params.r_pos_near if lo <= m.pixel.ray_depth <= hi else params.r_pos_far
        t = gs.tracks[by_id[tid]]
        t = update_position(t, m.position_world, r_pos)
        t = update_rotation(t, m.rotation, params.r_rot)
        gs.tracks[by_id[tid]] = replace(t, hits=t.hits + 1, last_tick=batch_tick, last_meas=m)
    existing_means = [t.pos_mean for t in gs.tracks]
    for mi in asg.spawns:
        m = ms[mi]
        if existing_means:
            # Duplicate suppression: an unassigned measurement still inside
            # the association gate of some (already taken) track must not
            # seed a twin next to it. Measurements farther than the
            # threshold from every track always spawn.
            nearest = min(float(np.linalg.norm(m.position_world - pm)) for pm in existing_means)
            if nearest <= params.assoc_threshold:
                continue
        gs.tracks.append(_spawn(gs, m, params))

    survivors = []
    for t in gs.tracks:
        stale = gs.tick - t.last_tick > params.stale_ticks and t.hits < params.stale_min_hits
        if stale:
            gs.claims.pop(t.id, None)
        else:
            survivors.append(t)
    gs.tracks = survivors
    return gs
