import logging
import math
import sys

import numpy as np
import pytest

from ..libs.errors import InvalidInputError
from ..libs.retrieval import HybridRetriever, RetrievalConfig, bm25_raw, hybrid_retrieve, minmax_normalize
from ..libs.skill_model import EmbeddingProvider, SkillBank, embed_text, make_skill

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.StreamHandler(sys.stdout)
    ]
)

logger = logging.getLogger(__name__)


class StubEmbedder(EmbeddingProvider):
    """Looks vectors up by exact text; unknown text maps to a fixed fallback axis"""

    def __init__(self, vectors, dimension=4):
        self.vectors = {text: np.asarray(v, dtype=float) for text, v in vectors.items()}
        self._dimension = dimension

    @property
    def dimension(self):
        return self._dimension

    @property
    def version_tag(self):
        return "stub"

    def embed(self, text):
        vector = self.vectors.get(text.strip())
        if vector is None:
            vector = np.zeros(self._dimension)
            vector[-1] = 1.0
        return vector / np.linalg.norm(vector)


def test_bm25_no_overlap_scores_zero():
    bank = SkillBank.from_skills([make_skill("Heat mug", "use microwave", "when hot"),
                                  make_skill("Cool mug", "use fridge", "when cold")])
    assert bm25_raw("zebra quartz", bank) == {skill.id: 0.0 for skill in bank.skills}


def test_bm25_single_skill_title_scores_positive():
    skill = make_skill("Heat the mug", "Use the microwave", "When the task says heat")
    bank = SkillBank.from_skills([skill])
    assert bm25_raw(skill.title, bank)[skill.id] > 0


def test_bm25_term_frequency_ordering():
    """Equal-length documents with query-term frequencies 2, 1, 0"""
    s1 = make_skill("heat heat", "alpha beta", "gamma delta")
    s2 = make_skill("heat mug", "alpha beta", "gamma delta")
    s3 = make_skill("cool mug", "alpha beta", "gamma delta")
    scores = bm25_raw("heat", SkillBank.from_skills([s1, s2, s3]))
    print(f"BM25 scores: {scores}")
    assert scores[s1.id] > scores[s2.id] > scores[s3.id] == 0.0

    # hand evaluation: N=3, n=2, every document has 6 tokens so the length norm is k1
    idf = math.log(1 + (3 - 2 + 0.5) / (2 + 0.5))
    assert scores[s1.id] == pytest.approx(idf * 2 * 2.2 / (2 + 1.2), abs=1e-12)
    assert scores[s2.id] == pytest.approx(idf * 1 * 2.2 / (1 + 1.2), abs=1e-12)


def test_bm25_empty_bank():
    assert bm25_raw("heat", SkillBank.empty()) == {}


@pytest.mark.parametrize("scores, expected", [
    ({'a': 2.0, 'b': 1.0, 'c': 0.0}, {'a': 1.0, 'b': 0.5, 'c': 0.0}),
    ({'a': 0.7, 'b': 0.7}, {'a': 0.0, 'b': 0.0}),
    ({'a': 5.0}, {'a': 0.0}),
    ({}, {}),
])
def test_minmax_normalize(scores, expected):
    assert minmax_normalize(scores) == expected


def test_hybrid_formula_and_threshold():
    """bm25_norm=1, cos=0.2 is kept at 0.44; bm25_norm=0, cos=0.3 is dropped at 0.21"""
    kept = make_skill("heat", "first", "one")
    dropped = make_skill("cool", "second", "two")
    embedder = StubEmbedder({
        "heat query": [1.0, 0.0, 0.0, 0.0],
        kept.canonical_text: [0.2, math.sqrt(1 - 0.04), 0.0, 0.0],
        dropped.canonical_text: [0.3, 0.0, math.sqrt(1 - 0.09), 0.0],
    })
    kept = make_skill("heat", "first", "one", embedder=embedder)
    dropped = make_skill("cool", "second", "two", embedder=embedder)
    bank = SkillBank.from_skills([kept, dropped])

    result = hybrid_retrieve("heat query", bank, embedder=embedder)
    assert result.skill_ids == [kept.id]
    entry = result.entries[0]
    assert entry.bm25_norm == 1.0
    assert entry.cosine == pytest.approx(0.2, abs=1e-12)
    assert entry.combined_score == pytest.approx(0.44, abs=1e-12)
    assert entry.rank == 1


def test_hybrid_reproduces_formula_on_default_embedder():
    bank = SkillBank.from_skills([
        make_skill("Heat the mug", "Use the microwave to heat things", "When the task says heat"),
        make_skill("Cool the apple", "Use the fridge to cool things", "When the task says cool"),
        make_skill("Clean the plate", "Rinse at the sink", "When the task says clean"),
        make_skill("Heat and clean", "Clean first, then heat", "When both heat and clean are needed"),
    ])
    query = "You need to heat the mug, then put it on the shelf."
    result = hybrid_retrieve(query, bank, score_threshold=-10.0, k_top=4)
    lexical = minmax_normalize(bm25_raw(query, bank))
    q = embed_text(query)
    for entry in result.entries:
        expected = 0.30 * lexical[entry.skill_id] + 0.70 * float(np.dot(q, bank.get(entry.skill_id).vector))
        assert abs(entry.combined_score - expected) <= 1e-12


def test_hybrid_keeps_top_k_sorted_with_id_tiebreak():
    """Five skills with identical scores: three entries, ids ascending"""
    embedder = StubEmbedder({})
    skills = [make_skill(f"skill {i}", "same principle", "same condition", embedder=embedder) for i in range(5)]
    bank = SkillBank.from_skills(skills)
    result = hybrid_retrieve("unrelated words", bank, embedder=embedder)
    assert result.size == 3
    assert result.skill_ids == sorted(skill.id for skill in skills)[:3]
    assert [entry.rank for entry in result.entries] == [1, 2, 3]


def test_hybrid_empty_bank_and_bad_arguments():
    assert hybrid_retrieve("heat", SkillBank.empty()).is_empty
    bank = SkillBank.from_skills([make_skill("a", "b", "c")])
    with pytest.raises(InvalidInputError):
        hybrid_retrieve("heat", bank, k_top=0)
    with pytest.raises(InvalidInputError):
        hybrid_retrieve("heat", bank, w_bm25=0.5, w_dense=0.6)
    with pytest.raises(ValueError):
        RetrievalConfig(w_bm25=0.4, w_dense=0.4)


def test_retrieval_contract_on_random_banks():
    """|R| <= 3, every score >= 0.30, descending order, repeatable"""
    rng = np.random.default_rng(11)
    words = ["heat", "cool", "clean", "slice", "mug", "apple", "shelf", "sink", "microwave", "fridge",
             "take", "put", "open", "drawer"]
    for _ in range(30):
        skills = []
        for i in range(int(rng.integers(1, 9))):
            text = " ".join(rng.choice(words, size=4))
            skills.append(make_skill(f"{text} {i}", " ".join(rng.choice(words, size=6)), text))
        bank = SkillBank.from_skills(skills)
        query = " ".join(rng.choice(words, size=5))
        result = hybrid_retrieve(query, bank)
        assert result.size <= 3
        assert all(entry.combined_score >= 0.30 for entry in result.entries)
        scores = [entry.combined_score for entry in result.entries]
        assert scores == sorted(scores, reverse=True)
        assert hybrid_retrieve(query, bank) == result


def test_removing_unretrieved_skill_keeps_cosines():
    skills = [
        make_skill("Heat the mug", "Use the microwave to heat the mug", "When the task says heat the mug"),
        make_skill("Heat the cup", "Use the stove to heat the cup", "When the task says heat the cup"),
        make_skill("Slice bread", "Use a knife", "When slicing"),
    ]
    bank = SkillBank.from_skills(skills)
    query = "heat the mug"
    retriever = HybridRetriever(RetrievalConfig(k_top=1))
    result = retriever.retrieve(query, bank)
    retained = {entry.skill_id: entry.cosine for entry in result.entries}
    for skill in skills:
        if skill.id in retained:
            continue
        smaller = SkillBank.from_skills([s for s in skills if s.id != skill.id])
        again = hybrid_retrieve(query, smaller, k_top=3, score_threshold=-10.0)
        for entry in again.entries:
            if entry.skill_id in retained:
                assert entry.cosine == retained[entry.skill_id]


def test_retrieve_skills_resolves_in_rank_order(keyword_embedder):
    from .conftest import tag_skill
    heat, cool = tag_skill('heat', keyword_embedder), tag_skill('cool', keyword_embedder)
    retriever = HybridRetriever(RetrievalConfig(), keyword_embedder)
    result, skills = retriever.retrieve_skills("You need to heat the mug, then put it on the shelf.",
                                               SkillBank.from_skills([cool, heat]))
    assert [s.id for s in skills] == result.skill_ids == [heat.id]
