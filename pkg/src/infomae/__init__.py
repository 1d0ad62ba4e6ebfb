"""Two-stage multimodal pretraining with shared/private information objectives on synthetic worlds."""

__version__ = "0.1.0"
