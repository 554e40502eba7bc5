from __future__ import annotations

from collections import deque
from collections.abc import Sequence

import numpy as np

from metricmm.errors import ConfigurationError


def stack_frames(history: deque | None, new_frame: Sequence[np.ndarray], frames: int = 3):
    """Append ``new_frame`` to ``history`` and return the stacked observation.

    ``history`` is a deque of per-step frames (each a tuple of modality
    vectors). ``None`` or an empty deque starts a new episode, in which case
    the frame is replicated ``frames`` times. Returns ``(observation, history)``
    where each modality is the oldest-to-newest concatenation.
    """
    if frames < 1:
        raise ConfigurationError(f"frame-stack depth must be >= 1, got {frames}")
    new_frame = tuple(np.asarray(m, dtype=np.float64) for m in new_frame)
    if not history:
        history = deque([new_frame] * frames, maxlen=frames)
    else:
        history.append(new_frame)
    n_mod = len(new_frame)
    obs = tuple(np.concatenate([f[i] for f in history]) for i in range(n_mod))
    return obs, history


class FrameStacker:
    def __init__(self, frames: int = 3):
        if frames < 1:
            raise ConfigurationError(f"frame-stack depth must be >= 1, got {frames}")
        self.frames = frames
        self.history: deque | None = None

    def reset(self, frame):
        self.history = None
        return self.push(frame)

    def push(self, frame):
        obs, self.history = stack_frames(self.history, frame, self.frames)
        return obs
