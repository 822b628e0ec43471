class ExportError(Exception):
    """Any failure turning a sentence file into an embedding archive."""
