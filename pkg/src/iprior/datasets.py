"""Bundled example data."""

from __future__ import annotations

from importlib import resources

import pandas as pd


def load_orange() -> pd.DataFrame:
    """Growth of 5 orange trees: ``tree`` (label), ``age`` (days), ``circ`` (mm).

    35 rows, 7 measurements per tree.  ``tree`` is returned as strings so
    that it is treated as a nominal covariate.
    """
    with resources.files(__package__).joinpath("data/orange.csv").open() as fh:
        df = pd.read_csv(fh, dtype={"tree": str})
    return df
