import hashlib
import logging
from abc import ABC, abstractmethod
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import BankParseError, BankValidationError, InvalidInputError
from .utils import read_json, sha256_hex, write_json

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-6
SKILL_ID_LENGTH = 16

Origin = Literal['cold_start', 'add', 'rewrite']


class EmbeddingProvider(ABC):
    """Maps text to a deterministic unit vector of fixed dimension"""

    @property
    @abstractmethod
    def dimension(self) -> int:
        ...

    @property
    @abstractmethod
    def version_tag(self) -> str:
        ...

    @abstractmethod
    def embed(self, text: str) -> np.ndarray:
        ...


@lru_cache(maxsize=8192)
def _hashed_ngram_vector(text: str, dimension: int, n: int) -> Tuple[float, ...]:
    padded = f" {text} "
    vector = np.zeros(dimension, dtype=np.float64)
    for i in range(max(1, len(padded) - n + 1)):
        gram = padded[i:i + n].encode('utf-8')
        digest = hashlib.sha256(gram).digest()
        bucket = int.from_bytes(digest[:8], 'big') % dimension
        sign = 1.0 if digest[-1] & 1 == 0 else -1.0
        vector[bucket] += sign

    norm = np.linalg.norm(vector)
    if norm == 0.0:
        # every gram cancelled out; fall back to a single bucket keyed by the whole text
        digest = hashlib.sha256(padded.encode('utf-8')).digest()
        vector[int.from_bytes(digest[:8], 'big') % dimension] = 1.0
        norm = 1.0
    return tuple((vector / norm).tolist())


class HashingEmbedder(EmbeddingProvider):
    """Hashed character n-gram embedding

    Each n-gram of the (optionally trimmed) text is hashed into one of `dimension`
    buckets, signed by hash parity, and the bucket vector is L2-normalized.
    """

    def __init__(self, dimension: int = 256, ngram: int = 3, trim: bool = True):
        if dimension < 1:
            raise InvalidInputError(f"Embedding dimension must be positive, got {dimension}")
        if ngram < 1:
            raise InvalidInputError(f"n-gram size must be positive, got {ngram}")
        self._dimension = dimension
        self.ngram = ngram
        self.trim = trim

    @property
    def dimension(self) -> int:
        return self._dimension

    @property
    def version_tag(self) -> str:
        return f"hashing-char{self.ngram}-d{self._dimension}-{'trim' if self.trim else 'raw'}"

    def embed(self, text: str) -> np.ndarray:
        if self.trim:
            text = text.strip()
        if not text:
            raise InvalidInputError("Cannot embed empty text")
        return np.array(_hashed_ngram_vector(text, self._dimension, self.ngram))


DEFAULT_EMBEDDER = HashingEmbedder()


def embed_text(text: str, embedder: Optional[EmbeddingProvider] = None) -> np.ndarray:
    """Embed text with the given provider, or the default hashed trigram provider"""
    if not text or not text.strip():
        raise InvalidInputError("Cannot embed empty text")
    return (embedder or DEFAULT_EMBEDDER).embed(text)


class Provenance(BaseModel):
    model_config = ConfigDict(frozen=True)

    round_created: int = Field(ge=0)
    origin: Origin


class Skill(BaseModel):
    """One retrievable unit of procedural knowledge"""
    model_config = ConfigDict(frozen=True)

    id: str
    title: str
    principle: str
    when_to_apply: str
    embedding: Tuple[float, ...]
    provenance: Provenance

    @field_validator('id')
    @classmethod
    def _check_id(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("skill id must be non-empty")
        return value

    @field_validator('title', 'principle', 'when_to_apply')
    @classmethod
    def _check_text(cls, value: str) -> str:
        value = value.strip()
        if not value:
            raise ValueError("text fields must be non-empty after trimming")
        return value

    @field_validator('embedding')
    @classmethod
    def _check_embedding(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if not value:
            raise ValueError("embedding must be non-empty")
        norm = float(np.linalg.norm(np.asarray(value, dtype=np.float64)))
        if abs(norm - 1.0) > NORM_TOLERANCE:
            raise ValueError(f"embedding must have unit L2 norm, got {norm:.9f}")
        return value

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.embedding, dtype=np.float64)

    @property
    def canonical_text(self) -> str:
        return canonical_text(self.title, self.principle, self.when_to_apply)

    def to_record(self) -> Dict:
        """Bank-file record with fixed key order"""
        return {
            'id': self.id,
            'title': self.title,
            'principle': self.principle,
            'when_to_apply': self.when_to_apply,
            'embedding': list(self.embedding),
            'provenance': {
                'round_created': self.provenance.round_created,
                'origin': self.provenance.origin,
            },
        }

    def __str__(self):
        return f"Skill(id='{self.id}', title='{self.title}')"


def canonical_text(title: str, principle: str, when_to_apply: str) -> str:
    """Text seen by retrieval and embedding: the three fields joined by newlines"""
    return f"{title}\n{principle}\n{when_to_apply}"


def _canonical_fields_bytes(title: str, principle: str, when_to_apply: str) -> bytes:
    out = bytearray()
    for field in (title, principle, when_to_apply):
        raw = field.encode('utf-8')
        out += str(len(raw)).encode('ascii') + b':' + raw + b'\n'
    return bytes(out)


def canonical_bytes(skill: Skill) -> bytes:
    """Canonical content of a skill: title, principle, when_to_apply

    Each field is written as decimal byte length, ':', the UTF-8 bytes and a newline,
    so fields containing newlines stay unambiguous. Embedding and provenance are excluded.

    Example:
        {title: "a", principle: "b", when_to_apply: "c"} -> b"1:a\\n1:b\\n1:c\\n"
    """
    return _canonical_fields_bytes(skill.title, skill.principle, skill.when_to_apply)


def content_skill_id(title: str, principle: str, when_to_apply: str) -> str:
    raw = _canonical_fields_bytes(title.strip(), principle.strip(), when_to_apply.strip())
    return hashlib.sha256(raw).hexdigest()[:SKILL_ID_LENGTH]


def make_skill(title: str,
               principle: str,
               when_to_apply: str,
               round_created: int = 0,
               origin: Origin = 'add',
               embedder: Optional[EmbeddingProvider] = None) -> Skill:
    """Build a skill whose id is the content hash and whose embedding covers the canonical text"""
    title, principle, when_to_apply = title.strip(), principle.strip(), when_to_apply.strip()
    if not (title and principle and when_to_apply):
        raise InvalidInputError("title, principle and when_to_apply must be non-empty")
    vector = embed_text(canonical_text(title, principle, when_to_apply), embedder)
    return Skill(
        id=content_skill_id(title, principle, when_to_apply),
        title=title,
        principle=principle,
        when_to_apply=when_to_apply,
        embedding=tuple(float(x) for x in vector),
        provenance=Provenance(round_created=round_created, origin=origin),
    )


def bank_content_id(skill_ids: Iterable[str]) -> str:
    return sha256_hex(*(skill_id.encode('utf-8') for skill_id in skill_ids))[:SKILL_ID_LENGTH]


class SkillBank(BaseModel):
    """Ordered, id-unique collection of skills"""
    model_config = ConfigDict(frozen=True)

    skills: Tuple[Skill, ...] = ()
    bank_id: str
    round: int = Field(default=0, ge=0)

    @model_validator(mode='after')
    def _check_unique_ids(self) -> 'SkillBank':
        seen = set()
        for skill in self.skills:
            if skill.id in seen:
                raise ValueError(f"duplicate skill id in bank: {skill.id}")
            seen.add(skill.id)
        return self

    @classmethod
    def from_skills(cls, skills: Sequence[Skill], round: int = 0) -> 'SkillBank':
        """Build a bank whose id is derived from its ordered skill ids"""
        ids = [skill.id for skill in skills]
        duplicates = sorted({skill_id for skill_id in ids if ids.count(skill_id) > 1})
        if duplicates:
            raise BankValidationError(f"Duplicate skill ids: {', '.join(duplicates)}")
        return cls(skills=tuple(skills), bank_id=bank_content_id(ids), round=round)

    @classmethod
    def empty(cls, round: int = 0) -> 'SkillBank':
        return cls.from_skills([], round=round)

    @property
    def size(self) -> int:
        return len(self.skills)

    @property
    def skill_ids(self) -> List[str]:
        return [skill.id for skill in self.skills]

    def get(self, skill_id: str) -> Optional[Skill]:
        for skill in self.skills:
            if skill.id == skill_id:
                return skill
        return None

    def contains(self, skill_id: str) -> bool:
        return self.get(skill_id) is not None

    def with_round(self, round: int) -> 'SkillBank':
        """Same skills and lineage, advanced to another curation round"""
        return self.model_copy(update={'round': round})

    def to_record(self) -> Dict:
        return {
            'bank_id': self.bank_id,
            'round': self.round,
            'skills': [skill.to_record() for skill in self.skills],
        }


def save_bank(bank: SkillBank, path: Union[str, Path]) -> Path:
    """Write a bank file with fixed key order"""
    path = write_json(path, bank.to_record())
    logger.info(f"Saved bank {bank.bank_id} ({bank.size} skills, round {bank.round}) to {path}")
    return path


def _skill_from_record(index: int, record: Dict, embedder: Optional[EmbeddingProvider]) -> Skill:
    if not isinstance(record, dict):
        raise BankParseError(f"Record {index} is not an object")
    record_id = record.get('id', '<missing id>')
    try:
        data = dict(record)
        if data.get('embedding') is None:
            text = canonical_text(str(data['title']).strip(),
                                  str(data['principle']).strip(),
                                  str(data['when_to_apply']).strip())
            data['embedding'] = tuple(float(x) for x in embed_text(text, embedder))
        return Skill.model_validate(data)
    except (KeyError, ValidationError, InvalidInputError) as e:
        raise BankParseError(f"Invalid skill record {index} (id={record_id}): {e}") from e


def load_bank(path: Union[str, Path], embedder: Optional[EmbeddingProvider] = None) -> SkillBank:
    """Load a bank file

    Accepts either the object form written by save_bank ({bank_id, round, skills}) or
    a bare JSON array of skill records. Records without an embedding get one computed
    from their canonical text.

    Raises:
        FileNotFoundError: If the file does not exist
        BankParseError: If the file or one of its records is malformed
        BankValidationError: If two records share an id
    """
    try:
        payload = read_json(path)
    except FileNotFoundError:
        raise
    except ValueError as e:
        raise BankParseError(f"Bank file {path} is not valid JSON: {e}") from e

    if isinstance(payload, list):
        records, round, bank_id = payload, 0, None
    elif isinstance(payload, dict) and isinstance(payload.get('skills'), list):
        records, round, bank_id = payload['skills'], int(payload.get('round', 0)), payload.get('bank_id')
    else:
        raise BankParseError(f"Bank file {path} must hold a list of skills or an object with 'skills'")

    skills = [_skill_from_record(i, record, embedder) for i, record in enumerate(records)]
    bank = SkillBank.from_skills(skills, round=round)
    if bank_id is not None and bank_id != bank.bank_id:
        bank = bank.model_copy(update={'bank_id': str(bank_id)})
    logger.debug(f"Loaded bank {bank.bank_id} with {bank.size} skills from {path}")
    return bank
