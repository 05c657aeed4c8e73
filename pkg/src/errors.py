class ToolsiftError(Exception):
    """Base class for errors the CLI reports as user errors (exit 1)."""


class DatasetError(ToolsiftError, ValueError):
    pass


class ConfigurationError(ToolsiftError, ValueError):
    pass


class ProviderError(ToolsiftError, RuntimeError):
    """Transport failure after all retries were spent."""


class StandardizationError(ToolsiftError, RuntimeError):
    def __init__(self, tool_id: str, message: str):
        self.tool_id = tool_id
        super().__init__(f"Standardization failed for tool '{tool_id}': {message}")


class SchemaValidationError(StandardizationError):
    pass


class RewriteError(ToolsiftError, RuntimeError):
    def __init__(self, query_id: str, message: str):
        self.query_id = query_id
        super().__init__(f"Rewriting failed for query '{query_id}': {message}")


class TrainingError(ToolsiftError, RuntimeError):
    pass


class MissingArtifactError(ToolsiftError, FileNotFoundError):
    def __init__(self, path, command: str):
        self.path = str(path)
        self.command = command
        super().__init__(f"Missing artifact {self.path}; run `{command}` first to produce it.")
