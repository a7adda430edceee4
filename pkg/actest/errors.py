"""
Exception hierarchy for the access-control change tester
"""


class ACTestError(Exception):
    """Base exception for the toolkit"""
    pass


# ========================
# CONFIGURATION (ACDL)
# ========================
class ConfigError(ACTestError):
    """Raised when an access-control configuration cannot be used"""
    pass


class ConfigSyntaxError(ConfigError):
    """Raised on a malformed directive or block"""

    def __init__(self, line: int, col: int, message: str, source: str = None):
        self.line = line
        self.col = col
        self.message = message
        self.source = source
        where = f"{source}:" if source else "line "
        super().__init__(f"{where}{line}:{col}: {message}")


class PatternError(ConfigError):
    """Raised when a files pattern does not compile"""

    def __init__(self, pattern: str, reason: str, line: int = 0, col: int = 0):
        self.pattern = pattern
        self.line = line
        self.col = col
        super().__init__(f"line {line}:{col}: invalid pattern {pattern!r}: {reason}")


# ========================
# DATA STATE
# ========================
class DataStateError(ACTestError):
    """Raised when production data cannot be loaded or queried"""
    pass


class UnknownTable(DataStateError):
    """Raised when querying a table that exists in neither layer"""
    pass


# ========================
# HANDLER IR
# ========================
class IrError(ACTestError):
    """Base exception for handler IR problems"""
    pass


class IrSyntaxError(IrError):
    """Raised on malformed IR text"""

    def __init__(self, line: int, message: str, source: str = None):
        self.line = line
        self.message = message
        where = f"{source}:" if source else "line "
        super().__init__(f"{where}{line}: {message}")


class IrValidationError(IrError):
    """Raised when a parsed program breaks a structural rule"""
    pass


class StepBudgetExceeded(IrError):
    """Raised when a run does not terminate within the step budget"""
    pass


class PredicateError(IrError):
    """Raised when a predicate has malformed arguments"""
    pass


class NoDecisionLogged(IrError):
    """Raised when a run returns without logging an access decision"""
    pass


# ========================
# TRIMMING
# ========================
class TrimError(ACTestError):
    """Base exception for the trimming pipeline"""
    pass


class InvalidTuple(TrimError):
    """Raised when a trace tuple does not allow under C and deny under C'"""
    pass


class DisjointCfgs(TrimError):
    """Raised when two dynamic CFGs do not share an entry node"""
    pass


class NoCandidates(TrimError):
    """Raised when CFG-diff finds no diverging node"""
    pass


class NoAccFound(TrimError):
    """Raised when the largest divergence is not at an access-control check"""
    pass


class EmptyResult(TrimError):
    """Raised when every final ACC candidate gets deleted"""
    pass


class UnknownAcc(TrimError):
    """Raised when a final ACC does not name a check of the program"""
    pass


# ========================
# REQUEST GENERATION
# ========================
class RequestGenError(ACTestError):
    """Base exception for request generation"""
    pass


class AllRejected(RequestGenError):
    """Raised when no access log line could be parsed"""

    def __init__(self, rejected):
        self.rejected = rejected
        super().__init__(f"All {len(rejected)} access log lines were rejected")


class EmptySource(RequestGenError):
    """Raised when a subject, object or action source resolves to nothing"""
    pass


# ========================
# IMPACT ANALYSIS
# ========================
class ImpactError(ACTestError):
    """Base exception for the impact engine"""
    pass


class RuleParseError(ImpactError):
    """Raised when a triage rule set is malformed"""
    pass


class ManifestError(ACTestError):
    """Raised when an input file fails validation"""
    pass
