"""Small shared helpers: seeding, one-hot encoding, JSONL writing, timing."""

import json
import time

import numpy as np


def make_rng(seed, stream=0):
    """Independent generator for (seed, stream); streams never collide."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream])))


def one_hot(labels, num_classes, dtype=np.float32):
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def now_ms():
    return time.perf_counter() * 1000.0


class JsonlWriter:
    """Line-oriented JSON log; one self-contained record per line."""

    def __init__(self, path=None):
        self.path = path
        self.records = []
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, record):
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
