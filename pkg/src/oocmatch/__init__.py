"""Object-level contrastive image-caption matching for out-of-context caption detection."""

__version__ = "0.1.0"
