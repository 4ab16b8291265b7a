"""
routines to define a cached class without needing to subclass Cached class
"""
from __future__ import absolute_import

from functools import wraps

__all__ = ["cached", "cached_clear", "gcached"]


def gcached(key=None, prop=True):
    """cached property (``prop=True``) or cached zero-argument method"""

    def wrapper(func):
        wrapped = cached(key)(func)
        if prop:
            wrapped = property(wrapped)
        return wrapped

    return wrapper


def cached(key=None):
    """Decorator to cache a property within a class

    Requires the Class to have a cache dict called ``_cache``, or to allow
    one to be created on demand.

    Notes
    -----
    Usage::

        class SampleSet(object):

            @property
            @cached("features")
            def features(self):
                # runs only if the lookup of "features" fails
                return np.stack([s.features for s in self.samples])

    See Also
    --------
    cached_clear : corresponding decorator to clear cache
    """

    def cached_lookup(func):
        _key = func.__name__ if key is None else key

        @wraps(func)
        def wrapper(self, *args, **kwargs):
            try:
                return self._cache[_key]
            except AttributeError:
                self._cache = dict()
            except KeyError:
                pass

            self._cache[_key] = ret = func(self, *args, **kwargs)
            return ret

        return wrapper

    return cached_lookup


def cached_clear(*keys):
    """
    Decorator to clear self._cache of specified properties

    Parameters
    ----------
    *keys : arguments
        remove these keys from cache.  if len(keys)==0, remove all keys.

    Examples
    --------
    Usage::

        class DifficultyBuffer(object):

            @gcached()
            def stats(self):
                ...

            @cached_clear("stats")
            def push(self, record):
                # deletes self._cache["stats"] before pushing
                ...
    """

    def cached_clear(func):
        @wraps(func)
        def wrapper(self, *args, **kwargs):
            if len(keys) == 0 or not hasattr(self, "_cache"):
                self._cache = dict()
            else:
                for name in keys:
                    self._cache.pop(name, None)

            return func(self, *args, **kwargs)

        return wrapper

    return cached_clear
