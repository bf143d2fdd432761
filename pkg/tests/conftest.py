import math

import numpy as np
import pytest

from qt1map.mp2rage import AcquisitionParams


@pytest.fixture(scope="session")
def paper_protocol() -> AcquisitionParams:
    return AcquisitionParams(
        mp2rage_tr=8.25,
        tr=0.006,
        ti=(1.010, 3.683, 6.355),
        n_pulses=225,
        flip_angles=(4.0, 4.0, 4.0),
        inv_eff=0.84,
    )


def iterate_gre_signals(params: AcquisitionParams, t1: float, b1: float,
                        periods: int = 300) -> np.ndarray:
    """Independent oracle: explicit per-pulse iteration of the MP2RAGE
    longitudinal magnetization from mz=1 through many full periods."""
    n = params.n_pulses
    h = n // 2
    ta = params.ti[0] - 0.5 * n * params.tr
    td = params.mp2rage_tr - params.ti[-1] - 0.5 * n * params.tr
    etr = math.exp(-params.tr / t1)
    flips = params.flips_rad

    def relax(mz, t):
        e = math.exp(-t / t1)
        return e * mz + (1.0 - e)

    mz = 1.0
    out = np.zeros(len(flips))
    for _ in range(periods):
        mz = -params.inv_eff * mz
        mz = relax(mz, ta)
        for k, alpha in enumerate(flips):
            if k > 0:
                mz = relax(mz, params.ti[k] - params.ti[k - 1] - n * params.tr)
            c = math.cos(b1 * alpha)
            for j in range(n):
                if j == h:
                    out[k] = math.sin(b1 * alpha) * mz
                mz = c * mz * etr + (1.0 - etr)
        mz = relax(mz, td)
    return out
