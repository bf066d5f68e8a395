"""Configuration for the layout reconstruction pipeline."""

from roomlayout.config.config_loader import ConfigLoader, PipelineConfig

__all__ = ["ConfigLoader", "PipelineConfig"]
