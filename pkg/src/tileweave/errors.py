"""Exception types shared across the package."""


class StitchError(Exception):
    """Base class for pipeline failures."""


class SchemaError(StitchError):
    """A document violates one of the JSON file schemas."""


class RegistrationError(StitchError):
    """Pairwise registration could not be carried out on the given inputs."""
