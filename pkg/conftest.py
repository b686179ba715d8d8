# Sybil runs the ```python blocks of the Markdown docs and README as tests.

import torch
from sybil import Sybil
from sybil.parsers.myst import PythonCodeBlockParser


def seed_namespace(namespace: dict) -> None:
    """Each document starts from the same global torch generator state."""
    torch.manual_seed(0)


pytest_collect_file = Sybil(
    parsers=[PythonCodeBlockParser()],
    patterns=["*.md"],
    setup=seed_namespace,
).pytest()
