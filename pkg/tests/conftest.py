import numpy as np
import pytest

from msset.model import MetaDataset, ModelParams, generate_dataset


@pytest.fixture
def bivariate():
    """40 complete bivariate studies under the null."""
    return generate_dataset(ModelParams((0.0, 0.0), (0.5, 0.5), 0.3, 0.2), 40, 11)


@pytest.fixture
def with_missing():
    d = generate_dataset(ModelParams((0.0, 0.0), (0.8, 0.4), 0.0, 0.4), 30, 5)
    eff = np.array(d.effects)
    se = np.array(d.stderrs)
    eff[::4, 1] = np.nan
    se[::4, 1] = np.nan
    eff[3::8, 0] = np.nan
    se[3::8, 0] = np.nan
    return MetaDataset(eff, se)
