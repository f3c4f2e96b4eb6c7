"""Exception types shared across the tracking and reconstruction pipeline."""


class ObjTrackError(Exception):
    """Base class for all pipeline errors."""


class NonPositiveDepth(ObjTrackError):
    """Point cannot be projected because its depth is <= 0."""


class EmptyMask(ObjTrackError):
    """An operation required masked pixels but the mask selects none."""


class EmptySet(ObjTrackError):
    """A correspondence set is empty."""


class DegenerateTrajectory(ObjTrackError):
    """A scripted pose places the object fully outside the camera frustum."""


class TooFewPoints(ObjTrackError):
    """A point-cloud operation needs more points than were provided."""


class TooFewCorrespondences(ObjTrackError):
    """Fewer correspondences survived filtering than the solver needs."""


class SolverDegenerate(ObjTrackError):
    """Robust registration pruned everything or hit a rank-deficient geometry."""


class NoOverlap(ObjTrackError):
    """ICP initialization leaves source and target clouds without overlap."""


class EmptyScene(ObjTrackError):
    """A splat scene with zero Gaussians cannot be rendered."""


class DimensionMismatch(ObjTrackError):
    """Image-shaped inputs do not agree on their dimensions."""


class NoKeyframes(ObjTrackError):
    """Scene optimization was asked to run without any keyframes."""


class TrackingLost(ObjTrackError):
    """Both the coarse solver and ICP failed on a frame."""


class EdgeUnderconstrained(ObjTrackError):
    """A pose-graph edge carries fewer than four correspondences."""


class SingularSystem(ObjTrackError):
    """The pose-graph normal equations stayed singular despite damping."""


class EmptySurface(ObjTrackError):
    """The TSDF volume contains no zero-crossing to mesh."""


class LengthMismatch(ObjTrackError):
    """Predicted and ground-truth trajectories differ in length."""


class EmptyMesh(ObjTrackError):
    """A mesh operation received a mesh without triangles."""


class DatasetError(ObjTrackError):
    """A dataset directory is missing files or is internally inconsistent."""


class ConfigError(ObjTrackError):
    """A run configuration failed validation."""
