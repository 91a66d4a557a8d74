"""Exception hierarchy shared by every stage of the toolkit."""


class ValidationError(ValueError):
    """Raised when an input violates a geometric or schema invariant."""


class AnnotationParseError(ValidationError):
    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        where = []
        if source is not None:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class ConfigurationError(ValueError):
    """Raised for an unusable pipeline configuration (e.g. missing tariff)."""


class DetectorError(RuntimeError):
    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


class PipelineError(RuntimeError):
    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"pipeline failed at stage '{stage}': {message}")


class EvaluationError(ValueError):
    pass
