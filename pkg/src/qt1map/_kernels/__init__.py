"""Hot numeric kernels: numba-compiled loops with pure-numpy fallbacks.

Backend selection lives in :mod:`qt1map.backend`.
"""
