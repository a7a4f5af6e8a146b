class RankpipeError(Exception):
    """
    Base class of all errors raised by rankpipe.
    """


class ConfigError(RankpipeError):
    """
    Raised when a pipeline, service, or parameter-space configuration is malformed.
    """
