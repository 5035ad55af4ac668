"""Exception hierarchy. Every error raised by the package derives from CavistabError,
and the CLI maps each branch to a documented exit code (see cli.EXIT_CODES)."""


class CavistabError(Exception):
    """Base class for all package errors."""


class ConfigError(CavistabError):
    """Invalid or unparseable run configuration."""


class GeometryError(CavistabError):
    """Atlas / chart / profile contract violations."""


class PointOutsideChartError(GeometryError):
    pass


class AtlasValidationError(GeometryError):
    pass


class DerivativeUnavailableError(GeometryError):
    """A requested profile derivative does not exist or is not implemented."""


class HessianUndefinedError(DerivativeUnavailableError):
    """Profile second derivatives evaluated at a singular point."""


class PiolaError(CavistabError):
    """Piola map construction or evaluation failures."""


class OutOfSubgraphError(PiolaError):
    pass


class TraceFlagMissingError(PiolaError):
    """Pullback requested for a field without the tangential-trace-zero flag."""


class DetNearZeroError(PiolaError):
    pass


class MeshError(CavistabError):
    """Mesh generation / validity failures."""


class InvertedElementError(MeshError):
    """Some tetrahedron has non-positive signed volume; refine the mesh."""


class NonManifoldBoundaryError(MeshError):
    pass


class FemError(CavistabError):
    """Finite element space / assembly failures."""


class SolverError(CavistabError):
    """Eigensolver failures."""


class FactorizationSingularError(SolverError):
    """Shifted operator is numerically singular (shift hits the spectrum)."""


class NoConvergenceError(SolverError):
    pass


class QuadratureError(CavistabError):
    """Numerical quadrature failures."""


class QuadratureNonConvergentError(QuadratureError):
    """Two quadrature refinements disagree beyond tolerance."""


class PointLocationError(CavistabError):
    """Too many quadrature points failed to locate in the reference mesh."""
