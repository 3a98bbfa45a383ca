"""Single-frame visually conditioned sound source separation at desk scale."""

__version__ = "0.1.0"

ARTIFACT_SCHEMA_VERSION = 1
