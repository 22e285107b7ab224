class ConfigurationError(ValueError):
    """Bad run configuration or missing modality for the requested mode."""
