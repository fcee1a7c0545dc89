"""ctxmi: how much a per-word continuous signal is predictable from its token context.

The toolkit estimates the mutual information between a word-level signal
(pitch, energy, duration, pause, prominence) and a window of n past plus
m future words, sweeps the (n, m) grid, and finds the context length at
which the information saturates.
"""

__version__ = "0.1.0"
