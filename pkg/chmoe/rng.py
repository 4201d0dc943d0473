"""
Seeded randomness.

Every random draw in chmoe comes from numpy's counter-based Philox generator. A run has a single integer seed;
independent streams are split off it with ``SeedSequence(seed, spawn_key=(stream, *extra))`` so that e.g. the data
generator and the channel sampler never consume from each other. Recording the generated inputs (rather than this
module) is enough to share fixtures with other implementations.
"""

import numpy as np

__all__ = ('STREAMS', 'make_rng', 'rng_state', 'set_rng_state')

# Stream ids are part of the reproducibility contract: never renumber them.
STREAMS = {
    'init': 1,
    'data': 2,
    'eval_data': 3,
    'batches': 4,
    'hcs': 5,
    'check': 6,
    'task': 7,
}


def make_rng(seed, stream='init', *extra):
    """
    Create the generator for one named stream.

    :param int seed:    The run seed.
    :param str stream:  One of :data:`STREAMS`.
    :param extra:       Further integers to split on, e.g. a case number.
    :rtype:             numpy.random.Generator
    """
    try:
        stream_id = STREAMS[stream]
    except KeyError:
        raise ValueError("Unknown random stream %r" % stream)
    seq = np.random.SeedSequence(int(seed), spawn_key=(stream_id,) + tuple(int(x) for x in extra))
    return np.random.Generator(np.random.Philox(seq))


def rng_state(rng):
    """
    Return a JSON-compatible copy of a generator's state.
    """
    state = rng.bit_generator.state

    def _plain(v):
        if isinstance(v, dict):
            return {k: _plain(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return [int(x) for x in v]
        if isinstance(v, np.integer):
            return int(v)
        return v
    return _plain(state)


def set_rng_state(rng, state):
    """
    Restore a state produced by :func:`rng_state`.
    """
    restored = dict(state)
    restored['state'] = {k: np.array(v, dtype=np.uint64) for k, v in state['state'].items()}
    restored['buffer'] = np.array(state['buffer'], dtype=np.uint64)
    rng.bit_generator.state = restored
