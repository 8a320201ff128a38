"""Report and manifest models."""
