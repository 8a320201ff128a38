"""Service layer behind the pipeline CLI."""
