"""Counter-based normal variates keyed by (seed, stream_id, step).

Each (seed, stream_id) pair is a Philox key; the step index is the block
counter. A block holds four 64-bit words, of which the first two are mapped
to standard normals. Draws therefore do not depend on how trajectories are
grouped into chunks or threads.
"""
import numpy as np
from scipy.special import ndtri

_MASK = (1 << 64) - 1
WORDS_PER_BLOCK = 4
NORMALS_PER_STEP = 2


def _key(seed, stream_id):
    if seed < 0 or stream_id < 0:
        raise ValueError("seed and stream_id must be non-negative")
    if seed > _MASK or stream_id > _MASK:
        raise ValueError("seed and stream_id must fit in 64 bits")
    return np.array([seed, stream_id], dtype=np.uint64)


def _to_normal(words):
    # 53-bit uniform on the open interval (0, 1), then the inverse normal CDF
    u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def stream_normals(seed, stream_id, first_step, n_steps):
    """(n_steps, 2) standard normals of one stream for steps first_step, first_step+1, ..."""
    if n_steps < 0 or first_step < 0:
        raise ValueError("step indices must be non-negative")
    bg = np.random.Philox(key=_key(seed, stream_id), counter=int(first_step))
    raw = bg.random_raw(WORDS_PER_BLOCK * n_steps).reshape(n_steps, WORDS_PER_BLOCK)
    return _to_normal(raw[:, :NORMALS_PER_STEP])


def step_normals(seed, stream_id, step):
    """The two normals of a single (stream, step) pair."""
    return stream_normals(seed, stream_id, step, 1)[0]


def block_normals(seed, stream_ids, first_step, n_steps):
    """(n_steps, n_streams, 2) normals for a group of streams."""
    out = np.empty((n_steps, len(stream_ids), NORMALS_PER_STEP))
    for j, sid in enumerate(stream_ids):
        out[:, j] = stream_normals(seed, int(sid), first_step, n_steps)
    return out
