from .codecs import CODECS, Codec, load_codec
from .options import get_default_run_options, load_run_options
from .pipeline import SignalContext

__version__ = "0.1.0"
__all__ = ["CODECS", "Codec", "SignalContext", "get_default_run_options", "load_codec", "load_run_options"]
