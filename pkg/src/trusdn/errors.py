"""Exception hierarchy shared by every trusdn module."""


class TrusdnError(Exception):
    pass


# crypto
class CryptoError(TrusdnError):
    pass


class AuthenticationFailure(CryptoError):
    pass


class DecryptionFailure(CryptoError):
    pass


class NonceExhausted(CryptoError):
    pass


class WrongKeyRole(CryptoError):
    pass


class MessageTooLong(CryptoError):
    pass


class InvalidBase(CryptoError):
    pass


class UnverifiedInput(CryptoError):
    pass


# enclave platform
class PlatformError(TrusdnError):
    pass


class DuplicateQuotingEnclave(PlatformError):
    pass


class CrossPlatformReport(PlatformError):
    pass


class ReportRejected(PlatformError):
    pass


class IsolationViolation(PlatformError):
    pass


class UnknownEnclave(PlatformError):
    pass


# attestation
class AttestationError(TrusdnError):
    pass


class UnauthorizedVerifier(AttestationError):
    pass


class AttestationFailed(AttestationError):
    pass


# control / data plane / endpoints
class EnrollmentRejected(TrusdnError):
    def __init__(self, verdict):
        super().__init__(f"enrollment rejected: {verdict.value}")
        self.verdict = verdict


class NoSuchSwitch(TrusdnError):
    pass


class UnknownEndpoint(TrusdnError):
    pass


class UnknownPeer(TrusdnError):
    pass


class BufferOverflow(TrusdnError):
    pass


class BadGrantSignature(TrusdnError):
    pass


class FinishedMismatch(TrusdnError):
    pass


class HandshakeTimeout(TrusdnError):
    pass


class NotEstablished(TrusdnError):
    pass


class TransportError(TrusdnError):
    pass


class WireFormatError(TrusdnError):
    pass


# harness / cli
class TopologyError(TrusdnError):
    pass


class ParseError(TrusdnError):
    def __init__(self, message, line=None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")
        self.line = line
