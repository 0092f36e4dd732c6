"""Exception types shared across the package."""


class SplatsegError(Exception):
    """Base class for all package errors."""


class FormatError(SplatsegError):
    """A container/file failed structural validation (bad magic, size, version)."""


class ConfigError(SplatsegError):
    """An object or configuration violates a documented invariant."""


class BehindCameraError(SplatsegError):
    """A point with non-positive camera-space depth was projected."""


class NoObjectError(SplatsegError):
    """A prompt landed on background / empty space."""


class DegenerateClusteringError(SplatsegError):
    """Density clustering produced no clusters (all points noise)."""


class EmptySceneError(SplatsegError):
    """An edit would leave the scene without any Gaussians."""
