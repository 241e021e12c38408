"""Bundled CSV corpora (regenerate with scripts/make_fixtures.py)."""

import os

HERE = os.path.dirname(os.path.abspath(__file__))
SINUSOID = os.path.join(HERE, "sinusoid_p24.csv")
ETTH1_EXCERPT = os.path.join(HERE, "etth1_excerpt.csv")


def path(name: str) -> str:
    return os.path.join(HERE, name)
