from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import pytest

from ..libs.curation_loop import RunConfig
from ..libs.proposers import build_proposers, tag_skill_text
from ..libs.replay_cache import ReplayCache
from ..libs.retrieval import HybridRetriever, RetrievalConfig
from ..libs.rollout import TAG_VOCABULARY, SyntheticTask, SyntheticWorker, SyntheticWorld, format_tag_annotation
from ..libs.skill_model import EmbeddingProvider, Skill, make_skill
from ..libs.utils import tokenize


class KeywordEmbedder(EmbeddingProvider):
    """One axis per capability tag; text naming no tag falls on a shared spare axis

    Texts about different tags are orthogonal, so retrieval in tests is exact.
    """

    def __init__(self, vocabulary: Sequence[str] = TAG_VOCABULARY):
        self.vocabulary = tuple(vocabulary)
        self._index = {tag: i for i, tag in enumerate(self.vocabulary)}

    @property
    def dimension(self) -> int:
        return len(self.vocabulary) + 1

    @property
    def version_tag(self) -> str:
        return f"keyword-{self.dimension}"

    def embed(self, text: str) -> np.ndarray:
        vector = np.zeros(self.dimension)
        hits = {self._index[token] for token in tokenize(text) if token in self._index}
        for i in hits:
            vector[i] = 1.0
        if not hits:
            vector[-1] = 1.0
        return vector / np.linalg.norm(vector)


def tag_skill(tag: str, embedder: Optional[EmbeddingProvider] = None, origin: str = 'add') -> Skill:
    title, principle, when_to_apply = tag_skill_text(tag)
    return make_skill(title, principle, when_to_apply, origin=origin, embedder=embedder)


def annotated_skill(title: str, tag: str, helpful: Iterable[str] = (), harmful: Iterable[str] = (),
                    embedder: Optional[EmbeddingProvider] = None) -> Skill:
    """Skill retrieved for `tag` tasks whose worker effect is set by the helpful/harmful annotation"""
    return make_skill(
        title,
        f"When you need to {tag} the object, follow this routine.",
        f"Use when the task requires you to {tag} something. {format_tag_annotation(helpful, harmful)}",
        embedder=embedder,
    )


def build_world(rows: Iterable[Tuple[str, str, str, bool]], tags: Sequence[str] = None) -> SyntheticWorld:
    """World from (task_id, split, required_tag, base_solvable) rows"""
    rows = list(rows)
    tags = tuple(tags or sorted({row[2] for row in rows}))
    tasks = tuple(
        SyntheticTask(task_id=task_id, split=split, required_tag=tag, base_solvable=solvable,
                      text=f"You need to {tag} the mug, then put it on the shelf.")
        for task_id, split, tag, solvable in rows
    )
    return SyntheticWorld(tags=tags, tasks=tasks, seed=None)


@pytest.fixture
def keyword_embedder():
    return KeywordEmbedder()


@pytest.fixture
def retriever(keyword_embedder):
    return HybridRetriever(RetrievalConfig(), keyword_embedder)


@pytest.fixture
def cache():
    return ReplayCache()


@pytest.fixture
def heat_cool_world():
    """Two tags, nothing base-solvable except one heat task per split"""
    rows = []
    for split in ('support', 'query', 'test'):
        rows += [
            (f"{split}-heat-0", split, 'heat', False),
            (f"{split}-heat-1", split, 'heat', False),
            (f"{split}-heat-2", split, 'heat', True),
            (f"{split}-cool-0", split, 'cool', False),
            (f"{split}-cool-1", split, 'cool', False),
        ]
    return build_world(rows, tags=('cool', 'heat'))


@pytest.fixture
def heat_cool_worker(heat_cool_world):
    return SyntheticWorker(heat_cool_world)


@pytest.fixture
def rule_proposers(keyword_embedder):
    return build_proposers(embedder=keyword_embedder)


@pytest.fixture
def small_config():
    return RunConfig(rounds=3, candidates=4, max_workers=2)
