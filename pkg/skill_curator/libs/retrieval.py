import logging
import math
from collections import Counter
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import InvalidInputError
from .skill_model import EmbeddingProvider, Skill, SkillBank, embed_text
from .utils import tokenize

logger = logging.getLogger(__name__)

BM25_K1 = 1.2
BM25_B = 0.75
WEIGHT_TOLERANCE = 1e-9


class RetrievalConfig(BaseModel):
    """Hybrid retriever settings"""
    model_config = ConfigDict(frozen=True)

    k_top: int = Field(default=3, ge=1)
    w_bm25: float = Field(default=0.30, ge=0.0, le=1.0)
    w_dense: float = Field(default=0.70, ge=0.0, le=1.0)
    score_threshold: float = 0.30
    k1: float = Field(default=BM25_K1, gt=0.0)
    b: float = Field(default=BM25_B, ge=0.0, le=1.0)

    @model_validator(mode='after')
    def _check_weights(self) -> 'RetrievalConfig':
        if abs(self.w_bm25 + self.w_dense - 1.0) > WEIGHT_TOLERANCE:
            raise ValueError(f"w_bm25 + w_dense must equal 1, got {self.w_bm25 + self.w_dense}")
        return self


class RetrievalEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    skill_id: str
    combined_score: float
    bm25_norm: float = Field(ge=0.0, le=1.0)
    cosine: float
    rank: int = Field(ge=1)


class RetrievalResult(BaseModel):
    """Rank-ordered retrieval set for one query"""
    model_config = ConfigDict(frozen=True)

    query_text: str
    entries: Tuple[RetrievalEntry, ...] = ()

    @property
    def skill_ids(self) -> List[str]:
        return [entry.skill_id for entry in self.entries]

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def is_empty(self) -> bool:
        return not self.entries


def bm25_raw(query_text: str,
             bank: SkillBank,
             k1: float = BM25_K1,
             b: float = BM25_B) -> Dict[str, float]:
    """Okapi BM25 of the query against each skill's canonical text

    Document statistics come from the current bank only. The IDF term is
    log(1 + (N - n + 0.5) / (n + 0.5)), which stays positive for terms present
    in every document, so a single-skill bank still scores its own title above 0.

    Returns:
        Dict mapping skill id to a non-negative score; empty for an empty bank
    """
    if bank.size == 0:
        return {}

    documents = [tokenize(skill.canonical_text) for skill in bank.skills]
    term_freqs = [Counter(doc) for doc in documents]
    doc_lens = np.array([len(doc) for doc in documents], dtype=np.float64)
    n_docs = len(documents)
    avgdl = float(doc_lens.mean()) or 1.0

    doc_freq = Counter()
    for tf in term_freqs:
        doc_freq.update(tf.keys())

    scores = np.zeros(n_docs, dtype=np.float64)
    length_norm = k1 * (1.0 - b + b * doc_lens / avgdl)
    for term in tokenize(query_text):
        n = doc_freq.get(term, 0)
        if n == 0:
            continue
        idf = math.log(1.0 + (n_docs - n + 0.5) / (n + 0.5))
        freqs = np.array([tf.get(term, 0) for tf in term_freqs], dtype=np.float64)
        scores += idf * freqs * (k1 + 1.0) / (freqs + length_norm)

    return {skill.id: float(score) for skill, score in zip(bank.skills, scores)}


def minmax_normalize(scores: Dict[str, float]) -> Dict[str, float]:
    """Min-max scale scores into [0, 1]

    If every score is equal (including the single-score case) all outputs are 0,
    leaving ranking to the dense term.
    """
    if not scores:
        return {}
    values = np.array(list(scores.values()), dtype=np.float64)
    low, high = float(values.min()), float(values.max())
    if high == low:
        return {key: 0.0 for key in scores}
    span = high - low
    return {key: (value - low) / span for key, value in scores.items()}


def hybrid_retrieve(query_text: str,
                    bank: SkillBank,
                    k_top: int = 3,
                    w_bm25: float = 0.30,
                    w_dense: float = 0.70,
                    score_threshold: float = 0.30,
                    embedder: Optional[EmbeddingProvider] = None,
                    k1: float = BM25_K1,
                    b: float = BM25_B) -> RetrievalResult:
    """Retrieve the top-k skills by w_bm25 * normalized BM25 + w_dense * cosine

    Entries scoring below score_threshold are dropped; ties on the combined score
    are broken by skill id ascending.
    """
    if k_top < 1:
        raise InvalidInputError(f"k_top must be at least 1, got {k_top}")
    if abs(w_bm25 + w_dense - 1.0) > WEIGHT_TOLERANCE:
        raise InvalidInputError(f"Retrieval weights must sum to 1, got {w_bm25} + {w_dense}")
    if bank.size == 0:
        return RetrievalResult(query_text=query_text)

    bm25_norm = minmax_normalize(bm25_raw(query_text, bank, k1=k1, b=b))
    query_vector = embed_text(query_text, embedder)

    scored = []
    for skill in bank.skills:
        cosine = float(np.dot(query_vector, skill.vector))
        lexical = bm25_norm[skill.id]
        combined = w_bm25 * lexical + w_dense * cosine
        if combined >= score_threshold:
            scored.append((skill.id, combined, lexical, cosine))

    scored.sort(key=lambda item: (-item[1], item[0]))
    entries = tuple(
        RetrievalEntry(skill_id=skill_id, combined_score=combined, bm25_norm=lexical,
                       cosine=cosine, rank=rank)
        for rank, (skill_id, combined, lexical, cosine) in enumerate(scored[:k_top], 1)
    )
    return RetrievalResult(query_text=query_text, entries=entries)


class HybridRetriever:
    """Binds a retrieval config and an embedding provider; stateless across calls"""

    def __init__(self, config: Optional[RetrievalConfig] = None,
                 embedder: Optional[EmbeddingProvider] = None):
        self.config = config or RetrievalConfig()
        self.embedder = embedder

    def retrieve(self, query_text: str, bank: SkillBank) -> RetrievalResult:
        return hybrid_retrieve(
            query_text,
            bank,
            k_top=self.config.k_top,
            w_bm25=self.config.w_bm25,
            w_dense=self.config.w_dense,
            score_threshold=self.config.score_threshold,
            embedder=self.embedder,
            k1=self.config.k1,
            b=self.config.b,
        )

    def retrieve_skills(self, query_text: str, bank: SkillBank) -> Tuple[RetrievalResult, List[Skill]]:
        """Retrieve and resolve entries to skills in rank order"""
        result = self.retrieve(query_text, bank)
        skills = [bank.get(skill_id) for skill_id in result.skill_ids]
        return result, skills
