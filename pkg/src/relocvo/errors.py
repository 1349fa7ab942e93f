"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes, so every failure that can escape a
library call derives from :class:`RelocVOError`.
"""


class RelocVOError(Exception):
    pass


class ConfigurationError(RelocVOError, ValueError):
    """Inconsistent inputs: missing variables, mismatched kinds, bad config keys."""


class BehindCameraError(RelocVOError, ValueError):
    pass


class RankDeficiencyError(RelocVOError):
    """Normal equations are singular; ``blocks`` names the unconstrained variables."""

    def __init__(self, message, blocks=()):
        super().__init__(message)
        self.blocks = tuple(blocks)


class DegenerateMarginalizationError(RelocVOError):
    pass


class TrackingLostError(RelocVOError):
    def __init__(self, message, frame_id=None):
        super().__init__(message)
        self.frame_id = frame_id


class RelocalizationFailed(RelocVOError):
    pass


class VocabularyBuildError(RelocVOError):
    pass


class FusionDeferred(RelocVOError):
    """No fused reference exists yet and bootstrapping is not possible."""


class GenerationError(RelocVOError):
    pass


class ObservationInvalid(RelocVOError):
    """A point does not project into the target image with positive depth."""
