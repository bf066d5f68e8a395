"""
Room Layout Custom Exceptions

All exceptions raised by the reconstruction pipeline, grouped per stage so
callers can handle a whole family (e.g. any GeometryError) at once.
"""

from typing import Optional, Tuple


class LayoutError(Exception):
    """Base exception for all room layout errors."""
    pass


# ----------------------------------------------------------------------------
# Geometry
# ----------------------------------------------------------------------------

class GeometryError(LayoutError):
    """Base exception for camera/plane geometry failures."""
    pass


class NearParallelError(GeometryError):
    """Ray grazes the plane (or would intersect beyond the depth cap)."""
    pass


class BehindCameraError(GeometryError):
    """Point or intersection lies behind the camera."""
    pass


# ----------------------------------------------------------------------------
# Annotations
# ----------------------------------------------------------------------------

class AnnotationError(LayoutError):
    """Base exception for annotation ingestion."""
    pass


class AnnotationParseError(AnnotationError):
    """Annotation file is unreadable or structurally malformed."""
    pass


class AnnotationValidationError(AnnotationError):
    """Annotation content violates an invariant (non-retriable)."""

    def __init__(
        self,
        message: str,
        frame_index: Optional[int] = None,
        local_id: Optional[int] = None,
    ):
        self.frame_index = frame_index
        self.local_id = local_id
        where = []
        if frame_index is not None:
            where.append(f"frame {frame_index}")
        if local_id is not None:
            where.append(f"element {local_id}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(f"{prefix}{message}")


# ----------------------------------------------------------------------------
# Tracking
# ----------------------------------------------------------------------------

class TrackingError(LayoutError):
    """Base exception for point sampling and tracking."""
    pass


class EmptyVisibleError(TrackingError):
    """Frame has no visible area to sample points from."""
    pass


class TrackSourceError(TrackingError):
    """Track source has no data for a required consecutive frame pair."""

    def __init__(self, message: str, frame_pair: Optional[Tuple[int, int]] = None):
        self.frame_pair = frame_pair
        if frame_pair is not None:
            message = f"{message} (frame pair {frame_pair[0]}->{frame_pair[1]})"
        super().__init__(message)


# ----------------------------------------------------------------------------
# Solver
# ----------------------------------------------------------------------------

class SolverError(LayoutError):
    """Base exception for plane optimization."""
    pass


class AllTracksDegenerateError(SolverError):
    """No track has two or more valid unprojections."""
    pass


class DivergedError(SolverError):
    """Loss became non-finite during optimization."""

    def __init__(self, message: str, iteration: int = -1):
        self.iteration = iteration
        super().__init__(f"{message} (iteration {iteration})")


class UnconstrainedPlaneError(SolverError):
    """Element has neither tracks nor edge points; its plane is undetermined."""

    def __init__(self, element_id: int):
        self.element_id = element_id
        super().__init__(f"Element {element_id} has no tracks and no edge points")


# ----------------------------------------------------------------------------
# Extent
# ----------------------------------------------------------------------------

class ExtentError(LayoutError):
    """Base exception for spatial extent computation."""
    pass


class FullyInvalidError(ExtentError):
    """Whole polygon unprojects behind the camera or at grazing angles."""
    pass


class NoHostError(ExtentError):
    """Door/window shares no boundary with any structural element."""

    def __init__(self, element_id: int):
        self.element_id = element_id
        super().__init__(f"Door/window element {element_id} has no host element")


class TriangulationError(ExtentError):
    """Polygon could not be triangulated."""

    def __init__(self, message: str, element_id: Optional[int] = None):
        self.element_id = element_id
        if element_id is not None:
            message = f"[element {element_id}] {message}"
        super().__init__(message)


# ----------------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------------

class EvaluationError(LayoutError):
    """Base exception for rendering and metrics."""
    pass


class NoValidPixelsError(EvaluationError):
    """No pixel qualifies for the depth error."""
    pass


class MeshFormatError(EvaluationError):
    """PLY file is not one this package wrote."""
    pass


# ----------------------------------------------------------------------------
# Pipeline
# ----------------------------------------------------------------------------

class PipelineError(LayoutError):
    """Base exception for scene orchestration."""
    pass


class SceneValidationError(PipelineError):
    """Scene bundle is inconsistent or unreadable (raised before any run)."""
    pass


class AllRunsFailedError(PipelineError):
    """Every run of a scene raised an error."""

    def __init__(self, message: str, errors: Optional[list] = None):
        self.errors = errors or []
        super().__init__(f"{message} ({len(self.errors)} runs failed)")


# ----------------------------------------------------------------------------
# Synthetic scenes
# ----------------------------------------------------------------------------

class SyntheticError(LayoutError):
    """Base exception for synthetic scene generation."""
    pass


class InfeasiblePresetError(SyntheticError):
    """Preset cannot satisfy its noise or trajectory constraints."""
    pass


# ----------------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------------

class ConfigError(LayoutError):
    """Configuration file or value is invalid."""
    pass
