"""Exception hierarchy.

Every error raised by the library derives from :class:`TauKitError`; the CLI
maps the three families below onto its exit codes.
"""


class TauKitError(Exception):
    """Base class for all library errors."""

    exit_code = 1
    code = "TauKitError"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


class ConfigError(TauKitError, ValueError):
    """Invalid arguments or inconsistent configuration."""

    exit_code = 2
    code = "ConfigError"


class DataError(TauKitError, ValueError):
    """Input data violates a validation rule.

    ``row`` is the row number as it appears in the CSV form of the data
    (the header is row 1), or ``None`` when the problem is not row-specific.
    """

    exit_code = 3
    code = "DataError"

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row

    def to_dict(self):
        d = super().to_dict()
        d["row"] = self.row
        return d


class DegenerateError(TauKitError, ArithmeticError):
    """A statistic is undefined for the whole dataset."""

    exit_code = 4
    code = "DegenerateError"


def _family(base, name, doc):
    return type(name, (base,), {"__doc__": doc, "code": name})


MissingColumn = _family(DataError, "MissingColumn", "A required CSV column is absent.")
NonFiniteCoordinate = _family(DataError, "NonFiniteCoordinate", "Location is NaN, infinite or out of range.")
NonFiniteTime = _family(DataError, "NonFiniteTime", "Onset time missing or not finite where required.")
DuplicateId = _family(DataError, "DuplicateId", "Two records share an id.")
FewerThanTwoCases = _family(DataError, "FewerThanTwoCases", "Pairwise statistics need at least two cases.")
UnknownPersonId = _family(DataError, "UnknownPersonId", "An episode refers to a person that does not exist.")
EpisodeOutsideEnrollment = _family(DataError, "EpisodeOutsideEnrollment", "Episode lies outside [entry, exit].")
OverlappingEpisodes = _family(DataError, "OverlappingEpisodes", "Two episodes of one person overlap.")
InvalidEpisode = _family(DataError, "InvalidEpisode", "Episode onset is after recovery.")
InvalidPerson = _family(DataError, "InvalidPerson", "Person enrollment or location track is malformed.")
TooFewPairs = _family(DataError, "TooFewPairs", "Not enough distinct pair distances.")

NonPositiveArguments = _family(ConfigError, "NonPositiveArguments", "Band arguments must be positive.")
NonIncreasingCutpoints = _family(ConfigError, "NonIncreasingCutpoints", "Disc cutpoints must increase strictly.")
InvalidRule = _family(ConfigError, "InvalidRule", "Malformed relatedness rule.")
KTooLarge = _family(ConfigError, "KTooLarge", "k must be smaller than the number of individuals.")
TooFewReplicates = _family(ConfigError, "TooFewReplicates", "Too few replicates for the requested summary.")
InsufficientReplicates = _family(ConfigError, "InsufficientReplicates", "Too few null replicates for the test level.")
RuleNotPermutable = _family(ConfigError, "RuleNotPermutable", "Permutation of onset times does not affect this rule.")
NothingToPlot = _family(DegenerateError, "NothingToPlot", "No defined values to draw.")

GlobalOddsUndefined = _family(DegenerateError, "GlobalOddsUndefined", "No related or no unrelated pairs at any distance.")
GlobalPrevalenceUndefined = _family(DegenerateError, "GlobalPrevalenceUndefined", "No related pairs at any distance.")
GlobalRateUndefined = _family(DegenerateError, "GlobalRateUndefined", "Total pair time at risk is zero.")
AllCensored = _family(DegenerateError, "AllCensored", "No bootstrap replicate crosses tau = 1.")
NoCrossing = _family(DegenerateError, "NoCrossing", "Neither legacy range criterion triggers.")
