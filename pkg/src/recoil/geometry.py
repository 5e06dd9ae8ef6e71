"""Rigid-transform algebra for clutch-style teleoperation.

Poses are full 3-D (translation vector + 3x3 rotation matrix) even though the
simulator is planar: the local-frame registration scheme is implemented
faithfully and the UI simply feeds it planar deltas (dR = I).

The clutch works by registering the controller pose at engagement as a local
base frame; subsequent controller poses are expressed relative to that base,
so no global alignment between controller and end effector is ever needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-9
# Long composition chains drift; re-orthonormalize past this error.
_REORTHO_TRIGGER = 1e-12


class DisengagedClutch(RuntimeError):
    """local_pose was asked for while the clutch is not engaged (UI logic bug)."""


def _ortho_error(R: np.ndarray) -> float:
    return float(np.abs(R.T @ R - np.eye(3)).max())


def _nearest_rotation(R: np.ndarray) -> np.ndarray:
    """Polar decomposition: closest rotation matrix in Frobenius norm."""
    u, _, vt = np.linalg.svd(R)
    if np.linalg.det(u @ vt) < 0:
        u = u.copy()
        u[:, -1] *= -1.0
    return u @ vt


# Numerical drift from composition chains is tiny; anything beyond this is a
# caller bug, not drift, and polar-projecting it would mask the bug.
_DRIFT_LIMIT = 1e-6


def _clean_rotation(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    err = _ortho_error(R)
    det = float(np.linalg.det(R))
    if err > _DRIFT_LIMIT or abs(det - 1.0) > _DRIFT_LIMIT:
        raise ValueError(f"not a rotation: |R^T R - I|={err:.3g}, det={det:.12f}")
    if err > _REORTHO_TRIGGER:
        R = _nearest_rotation(R)
        err = _ortho_error(R)
        det = float(np.linalg.det(R))
    if err > ORTHO_TOL or abs(det - 1.0) > ORTHO_TOL:
        raise ValueError(f"not a rotation after cleanup: |R^T R - I|={err:.3g}")
    out = R.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: rotation R followed by translation p."""

    p: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64).reshape(3).copy()
        p.flags.writeable = False
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "R", _clean_rotation(self.R))

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.p, other.p, atol=atol)
            and np.allclose(self.R, other.R, atol=atol)
        )


@dataclass(frozen=True, eq=False)
class PoseDelta:
    """Relative motion between two poses: dp in the fixed frame, dR local."""

    dp: np.ndarray
    dR: np.ndarray

    def __post_init__(self):
        dp = np.asarray(self.dp, dtype=np.float64).reshape(3).copy()
        dp.flags.writeable = False
        object.__setattr__(self, "dp", dp)
        object.__setattr__(self, "dR", _clean_rotation(self.dR))


@dataclass(frozen=True)
class ClutchSession:
    """Local-frame registration state for one clutch engagement."""

    base: Pose
    last_local: Pose
    engaged: bool


def identity() -> Pose:
    return Pose(np.zeros(3), np.eye(3))


def rot_z(angle: float, p=(0.0, 0.0, 0.0)) -> Pose:
    c, s = np.cos(angle), np.sin(angle)
    return Pose(np.asarray(p, dtype=np.float64), np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))


def compose(a: Pose, b: Pose) -> Pose:
    """Pose equivalent to applying b then a."""
    return Pose(a.R @ b.p + a.p, a.R @ b.R)


def invert(a: Pose) -> Pose:
    Rt = a.R.T
    return Pose(-(Rt @ a.p), Rt)


def pose_delta(prev: Pose, curr: Pose) -> PoseDelta:
    """Translational and rotational offsets from prev to curr."""
    return PoseDelta(curr.p - prev.p, prev.R.T @ curr.R)


def apply_delta(pose: Pose, delta: PoseDelta) -> Pose:
    """Fold one delta back onto a pose (inverse of pose_delta)."""
    return Pose(pose.p + delta.dp, pose.R @ delta.dR)


def clutch_engage(controller_in_headset: Pose) -> ClutchSession:
    """Register the controller pose at engagement as the local base frame."""
    return ClutchSession(base=controller_in_headset, last_local=identity(), engaged=True)


def clutch_release(s: ClutchSession) -> ClutchSession:
    return ClutchSession(base=s.base, last_local=s.last_local, engaged=False)


def local_pose(s: ClutchSession, controller_in_headset: Pose) -> Pose:
    """Current controller pose expressed in the engagement base frame."""
    if not s.engaged:
        raise DisengagedClutch("clutch is not engaged")
    return compose(invert(s.base), controller_in_headset)


def clutch_step(s: ClutchSession, controller_in_headset: Pose) -> tuple[PoseDelta, ClutchSession]:
    """Per-tick delta of the local pose since the previous tick.

    Returns the delta and the session with last_local advanced.
    """
    local = local_pose(s, controller_in_headset)
    delta = pose_delta(s.last_local, local)
    return delta, ClutchSession(base=s.base, last_local=local, engaged=True)
