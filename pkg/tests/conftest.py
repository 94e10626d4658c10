from __future__ import annotations

import logging

import pytest

from latent_map_attack.artifacts import (
    CORPUS_COUNT, CORPUS_SEED, default_artifact_dir, load_models, set_determinism, train_all,
)
from latent_map_attack.corpus import Corpus

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}

set_determinism(1)


@pytest.fixture(scope="session")
def models(tmp_path_factory):
    """Shipped toy artifacts; a quick throwaway training run if they are missing."""
    root = default_artifact_dir()
    if not (root / "victim").is_dir():
        logging.getLogger(__name__).warning("artifacts missing under %s; training a quick set", root)
        root = tmp_path_factory.mktemp("artifacts")
        train_all(root, count=200, ae_steps=800, den_steps=800, guidance_steps=300, victim_steps=800)
    return load_models(root, require_guidance=True)


@pytest.fixture(scope="session")
def corpus():
    return Corpus.generate(CORPUS_COUNT, CORPUS_SEED)


@pytest.fixture(scope="session")
def eval_scenes(corpus):
    return [corpus.scene(i) for i in corpus.split("evaluate")[:20]]


@pytest.fixture(scope="session")
def scene(eval_scenes):
    return eval_scenes[0]


@pytest.fixture
def acceptance():
    def record(number: int, name: str, passed: bool, detail: str = "") -> None:
        ACCEPTANCE[number] = (name, bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {name}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
