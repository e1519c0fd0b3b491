from typing import Optional


class SkillCuratorError(Exception):
    """Base class for every error raised by skill_curator"""
    pass


class InvalidInputError(SkillCuratorError, ValueError):
    """Raised when an operation receives arguments outside its contract"""
    pass


class ConfigError(SkillCuratorError):
    """Raised when a run configuration cannot be parsed or is inconsistent"""
    pass


class BankParseError(SkillCuratorError):
    """Raised when a bank file is malformed; the message names the offending record"""
    pass


class BankValidationError(SkillCuratorError):
    """Raised when a bank or an edit pool violates an invariant (duplicate or unknown ids)"""
    pass


class WorldValidationError(SkillCuratorError):
    """Raised when a synthetic world file is malformed or its splits overlap"""
    pass


class RolloutError(SkillCuratorError):
    """Raised when a worker fails to produce a trajectory"""

    def __init__(self, task_id: str, message: str):
        super().__init__(f"Rollout failed for task {task_id}: {message}")
        self.task_id = task_id


class ProposerError(SkillCuratorError):
    """Raised when a proposer role cannot produce usable output

    The raw model payload, if any, is kept for debugging.
    """

    def __init__(self, role: str, message: str, raw_payload: Optional[str] = None):
        super().__init__(f"{role}: {message}")
        self.role = role
        self.raw_payload = raw_payload


class MalformedReplyError(ProposerError):
    """Raised when a remote model reply does not match the expected JSON schema"""
    pass
