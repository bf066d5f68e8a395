"""
Typed configuration models.

Every section of defaults.json maps onto one frozen pydantic model; unknown
keys are rejected so a typo in a config file fails loudly.
"""

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class _Config(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class SamplerConfig(_Config):
    """Sobol sampling of visible parts."""

    target_spacing: float = Field(30.0, gt=0, description="mean point spacing in pixels")
    seed: int = 0


class EdgeConfig(_Config):
    """Edge-point extraction along shared element boundaries."""

    spacing_px: float = Field(10.0, gt=0)
    occlusion_distance_px: float = Field(3.0, ge=0)
    boundary_tolerance_px: float = Field(1.0, gt=0)
    overlap_tolerance_px: float = Field(3.0, ge=0)
    sample_step_px: float = Field(1.0, gt=0)


class TrackingConfig(_Config):
    """Track building and track-to-element assignment."""

    consistency_threshold: float = Field(0.5, ge=0, lt=1)
    flow_radius_px: float = Field(20.0, gt=0)
    flow_neighbors: int = Field(4, ge=1)


class SolverConfig(_Config):
    """Joint plane optimisation."""

    alpha_edge: float = Field(0.1, gt=0)
    alpha_perp: float = Field(0.1, gt=0)
    learning_rate: float = Field(0.1, gt=0)
    max_iterations: int = Field(100000, ge=0)
    patience: int = Field(500, gt=0)
    # improvement must beat best by max(abs_tolerance, tolerance * best)
    tolerance: float = Field(0.0, ge=0)
    abs_tolerance: float = Field(1e-9, ge=0)
    seed: int = 0
    use_track_loss: bool = True
    use_edge_loss: bool = True
    use_perp_loss: bool = True
    # 1.0 keeps a constant step; below 1 decays it after decay_patience flat iterations
    lr_decay: float = Field(1.0, gt=0, le=1)
    decay_patience: int = Field(100, gt=0)
    min_learning_rate: float = Field(1e-4, gt=0)
    reinit_after: int = Field(1000, gt=0)
    reinit_distance: float = Field(2.0, gt=0)
    log_every: int = Field(500, gt=0)

    @model_validator(mode="after")
    def _check_rates(self) -> "SolverConfig":
        if self.min_learning_rate > self.learning_rate:
            raise ValueError("min_learning_rate must not exceed learning_rate")
        return self


class ExtentConfig(_Config):
    """Extent union, refinement and triangulation."""

    snap_tolerance: float = Field(1e-6, gt=0)
    parallel_cos: float = Field(0.999, gt=0, lt=1)
    max_growth: float = Field(0.10, ge=0)
    max_cut: float = Field(0.10, ge=0)
    band_factor: float = Field(2.0, gt=0)
    # Image-space clip keeps unprojected vertices this far in front of the horizon.
    horizon_margin: float = Field(1e-3, gt=0)
    refine: bool = True


class QCConfig(_Config):
    """Multi-run quality control."""

    runs: int = Field(100, ge=1)
    iou_threshold: float = Field(0.8, ge=0, le=1)
    enforce_threshold: bool = True


class SyntheticConfig(_Config):
    """Synthetic scene generation."""

    preset: Literal["cuboid", "manhattan", "generic", "composite"] = "cuboid"
    track_noise_px: float = Field(0.0, ge=0)
    annotation_jitter_px: float = Field(0.0, ge=0)
    seed: int = 0
    width: int = Field(320, ge=32)
    height: int = Field(240, ge=32)
    focal_px: float = Field(220.0, gt=0)
    frames: int = Field(31, ge=2)
    annotate_every: int = Field(5, ge=1)
    furniture: int = Field(2, ge=0)
    occlusion_dropout: float = Field(0.0, ge=0, lt=1)
