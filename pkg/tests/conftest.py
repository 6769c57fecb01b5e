import numpy as np
import pandas as pd
import pytest

from ertgap import synth
from ertgap.corpus import TokenTable, make_length_bins, pooled_stats, trim_outliers
from ertgap.modeling import ModelConfig, fit_all

SMALL = dict(n_control=10, n_dyslexic=10, tokens_per_subject=1500, seed=3)
FROZEN = {(g, pw): 10.0 for g in ("control", "dyslexic") for pw in ("skip", "duration")}


def token_frame(n_per_subject=20, subjects=("c1", "c2", "d1", "d2"), seed=0) -> pd.DataFrame:
    """A small valid token frame with every column filled."""
    rng = np.random.default_rng(seed)
    rows = []
    for s in subjects:
        group = "control" if s.startswith("c") else "dyslexic"
        for i in range(n_per_subject):
            length = int(rng.integers(1, 10))
            skip = int(rng.random() < 0.3)
            rows.append({
                "subject_id": s,
                "group": group,
                "doc_id": 1,
                "sentence_id": i // 10,
                "word_pos": i,
                "word": "a" * length,
                "skip": skip,
                "trt_ms": np.nan if skip else float(rng.uniform(100, 400)),
                "length": length,
                "zipf": float(rng.uniform(2, 7)),
                "surprisal": float(rng.uniform(0, 15)),
            })
    return pd.DataFrame(rows)


@pytest.fixture(scope="session")
def small_synth():
    """(raw table, truth) for a small `paper_shaped` synthetic sample."""
    return synth.generate(synth.preset("paper_shaped", **SMALL))


@pytest.fixture(scope="session")
def small_table(small_synth) -> TokenTable:
    raw, _ = small_synth
    table, _ = trim_outliers(raw)
    return table.complete()


@pytest.fixture(scope="session")
def small_context(small_table):
    return pooled_stats(small_table), make_length_bins(small_table, 7)


@pytest.fixture(scope="session")
def small_bundle(small_table):
    return fit_all(small_table, ModelConfig(n_splines=12), frozen_lams=FROZEN, validate_model=False)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
