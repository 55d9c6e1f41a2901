from .export import (
    ExportError,
    UnsupportedArchitectureError,
    export_corpus,
    export_model,
    load_reference,
)

__version__ = "0.1.0"
