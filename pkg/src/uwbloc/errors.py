"""Exception types shared across the package."""


class CorpusFormatError(ValueError):
    """Corpus file is malformed (bad magic, bad header, or truncated record)."""


class CorpusVersionError(CorpusFormatError):
    """Corpus file uses an unsupported container version."""


class DegenerateSignalError(ValueError):
    """A waveform statistic is undefined for this signal (e.g. zero variance)."""


class DegenerateLikelihoodError(RuntimeError):
    """Every grid vertex evaluated to the floor likelihood; the scenario and
    density model are mutually inconsistent."""
