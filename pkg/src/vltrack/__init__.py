"""Vision-language tracking with a time-evolving multimodal state-space fusion stack."""

__version__ = "0.1.0"
