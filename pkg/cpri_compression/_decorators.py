from functools import wraps

from cpri_compression.exceptions import BundleFormatError, UntrainedLayerError


def _requires_trained(index_argument: str = "layer", prefix: bool = True):
    """
    Decorator for stack methods that take a layer (or rate) index, checking that every
    entry up to that index (or, with prefix=False, the entry at that index) has been
    trained before the wrapped method runs. The instance must expose `trained: List[bool]`.
    """

    def decorator(method):
        @wraps(method)
        def _wrapped(self, *args, **kwargs):
            index = kwargs.get(index_argument, args[0] if args else None)
            if index is None:
                index = len(self.trained)
            entries = range(min(index, len(self.trained))) if prefix else [index]
            missing = [i + 1 for i in entries if not self.trained[i]]
            if missing:
                raise UntrainedLayerError(f"{self.__class__.__name__} entries {missing} are not trained")
            return method(self, *args, **kwargs)

        return _wrapped

    return decorator


def _raise_if_missing(kind: str):
    """Turns a getter returning None into a BundleFormatError naming the missing entry"""

    def decorator(getter):
        @wraps(getter)
        def _wrapped(self, name: str, *args, **kwargs):
            result = getter(self, name, *args, **kwargs)
            if result is None:
                raise BundleFormatError(f"Bundle {self.path or '<memory>'} is missing {kind} '{name}'")
            return result

        return _wrapped

    return decorator
