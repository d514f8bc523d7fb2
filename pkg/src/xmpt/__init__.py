"""Two-stage image-to-point-cloud contrastive pre-training at desk scale."""

__version__ = "0.1.0"
