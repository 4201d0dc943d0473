import os
import contextlib

from .errors import ChMoEConfigError

__all__ = ('stream_or_path', 'format_shape', 'parse_shape', 'format_float')


@contextlib.contextmanager
def stream_or_path(obj, perms='rb'):
    """
    Yield an open file for `obj`, which may already be a stream or may be a path.
    Streams are rewound for reading, never closed.
    """
    if hasattr(obj, 'read') or hasattr(obj, 'write'):
        if 'r' in perms and hasattr(obj, 'seek'):
            obj.seek(0)
        yield obj
    else:
        if 'r' in perms and not os.path.exists(obj):
            raise FileNotFoundError("%r is not a valid path" % obj)

        with open(obj, perms) as f:
            yield f


def format_shape(shape):
    """
    Render a shape the way manifests store it, e.g. ``(4, 8)`` -> ``4x8`` and ``()`` -> ``scalar``.
    """
    if not shape:
        return 'scalar'
    return 'x'.join(str(x) for x in shape)


def parse_shape(text):
    if text == 'scalar':
        return ()
    try:
        return tuple(int(x) for x in text.split('x'))
    except ValueError:
        raise ChMoEConfigError("Invalid shape %r" % text)


def format_float(value):
    """
    Deterministic text form for floats written to CSV outputs.
    """
    return '%.10g' % value
