"""
Exception hierarchy for the toolkit.
Every error can render itself as a machine-readable record for the CLI.
"""


class HybridGridError(Exception):
    """Base class for all toolkit errors"""

    def __init__(self, message, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_record(self):
        return {
            'error': type(self).__name__,
            'message': self.message,
            'details': {key: _plain(value) for key, value in sorted(self.details.items())},
        }


def _plain(value):
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    try:
        return float(value)
    except (TypeError, ValueError):
        return str(value)


# network
class NetworkError(HybridGridError):
    pass


class DuplicateId(NetworkError):
    pass


class DanglingEdge(NetworkError):
    pass


class KindMismatch(NetworkError):
    pass


class InvalidEdge(NetworkError):
    pass


class Disconnected(NetworkError):
    pass


class SingularInteriorBlock(NetworkError):
    pass


class ClassificationMismatch(NetworkError):
    pass


# devices
class DeviceError(HybridGridError):
    pass


class NoConvergence(DeviceError):
    pass


class UnstableRegion(DeviceError):
    pass


class DomainError(DeviceError):
    pass


# control
class ControlError(HybridGridError):
    pass


class MissingDroop(ControlError):
    pass


class ZeroSensitivity(ControlError):
    pass


class InvalidGain(ControlError):
    pass


# assembly
class AssemblyError(HybridGridError):
    pass


class MissingGains(AssemblyError):
    pass


class DimensionMismatch(AssemblyError):
    pass


class NoSuchTerminal(AssemblyError):
    pass


# analysis
class AnalysisError(HybridGridError):
    pass


class IsolatedDcNode(AnalysisError):
    pass


class CertificateViolated(AnalysisError):
    pass


class CertificateUndefined(AnalysisError):
    pass


class EigenFailure(AnalysisError):
    pass


class SingularA(AnalysisError):
    pass


class ZeroD(AnalysisError):
    pass


class InconsistentDroop(AnalysisError):
    pass


# simulation
class SimulationError(HybridGridError):
    pass


class NonFiniteState(SimulationError):
    pass


class InitializationFailed(SimulationError):
    pass


class WindowTooLong(SimulationError):
    pass


# scenario files
class ScenarioError(HybridGridError):
    pass


class ParseError(ScenarioError):
    pass


class ValidationError(ScenarioError):
    pass
