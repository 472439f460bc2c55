"""Shared exception base so the CLI can catch pipeline failures uniformly."""


class PipelineError(Exception):
    """Base class for every error raised by a pipeline stage."""
