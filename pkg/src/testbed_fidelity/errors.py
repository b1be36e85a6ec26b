"""Exception and warning types shared across the toolkit."""


class FidelityError(Exception):
    """Base class for every data error raised by the toolkit."""


# trace_model
class MalformedLine(FidelityError, ValueError):
    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class SkipExceedsLength(FidelityError, ValueError):
    pass


class EmptySequenceWarning(UserWarning):
    pass


# markov
class SequenceTooShort(FidelityError, ValueError):
    pass


class OrderMismatch(FidelityError, ValueError):
    pass


class EmptyInput(FidelityError, ValueError):
    pass


class LengthMismatch(FidelityError, ValueError):
    pass


class InvalidWalk(FidelityError, ValueError):
    pass


class InvalidTransition(FidelityError, ValueError):
    pass


class ChainFormatError(FidelityError, ValueError):
    pass


class DeadEndWarning(UserWarning):
    pass


# pcap_flows
class PcapError(FidelityError):
    pass


class BadMagic(PcapError):
    pass


class TruncatedHeader(PcapError):
    pass


class TruncatedPacket(PcapError):
    pass


class UnsupportedLinkType(PcapError):
    pass


class UnknownServerEndpoint(FidelityError, LookupError):
    pass


# workload_metrics
class MissingField(FidelityError, ValueError):
    pass


class DegenerateRun(MissingField):
    """A benchmark run that completed no requests."""


class ZeroRequests(FidelityError, ValueError):
    pass


class CrossCheckWarning(UserWarning):
    pass


# stats_compare
class TooFewSamples(FidelityError, ValueError):
    pass


class ZeroBaselineMean(FidelityError, ZeroDivisionError):
    pass


# report_cli / oracle_synth
class ManifestError(FidelityError):
    pass


class SpecError(FidelityError, ValueError):
    pass
