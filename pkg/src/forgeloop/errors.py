"""Common exception base for the framework.

Each module defines its own error types; everything user-facing derives from
ForgeloopError so the CLI can catch one class at the top level.
"""


class ForgeloopError(Exception):
    """Base class for every error raised by forgeloop."""
