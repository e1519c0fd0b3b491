from typing import Optional
from pydantic import BaseModel
from langchain_anthropic import ChatAnthropic
from langchain_openai import ChatOpenAI
from langchain.schema import SystemMessage, HumanMessage
import logging

logger = logging.getLogger(__name__)

class LLMConfig(BaseModel):
    """Configuration for Language Models"""
    model_config = {
        'protected_namespaces': ()
    }

    provider: str
    model_name: str
    api_key: Optional[str] = None
    temperature: float = 0.0
    max_tokens: int = 2000
    base_url: Optional[str] = None
    timeout: float = 60.0
    seed: Optional[int] = None

class Role(BaseModel):
    """Role configuration with optional system prompt"""
    name: str
    description: str
    system_prompt: Optional[str] = None

    @classmethod
    def skill_distiller(cls) -> 'Role':
        return cls(
            name="skill_distiller",
            description="Turns failed agent trajectories into reusable skills",
            system_prompt="""You curate a library of short, reusable skills for a household task agent.

Each skill has:
- title: a short imperative name
- principle: the strategy, in one or two sentences
- when_to_apply: the conditions under which the strategy helps

Your skills should be:
- Grounded in the failure evidence you are shown
- General enough to transfer across tasks of the same kind
- Free of task-specific object names unless essential
- Distinct from each other"""
        )

    @classmethod
    def skill_diagnoser(cls) -> 'Role':
        return cls(
            name="skill_diagnoser",
            description="Judges a skill from factual and leave-one-out outcomes",
            system_prompt="""You audit skills in an agent's skill library.

For one skill you see pairs of outcomes on the same task: the reward with the skill retrieved,
and the reward when the skill was left out. A positive difference means the skill helped.

Decide one verdict:
1. keep - the skill helps on balance
2. rewrite - the skill is inert or mixed and a sharper version could help
3. remove - the skill hurts on balance"""
        )

    @classmethod
    def edit_planner(cls) -> 'Role':
        return cls(
            name="edit_planner",
            description="Composes proposed skill edits into candidate banks",
            system_prompt="""You plan edits to an agent's skill library.

You see the current skills and three pools of proposed edits: new skills to add, rewrites of
existing skills and removals. Skills marked keep are protected and always stay.
Compose alternative edit selections that are each worth evaluating on their own."""
        )

    @classmethod
    def custom(cls, system_prompt: str, name: str = "custom", description: str = "Custom role") -> 'Role':
        return cls(
            name=name,
            description=description,
            system_prompt=system_prompt
        )

class Task(BaseModel):
    """Task configuration"""
    name: str
    description: str
    prompt_template: str

    @classmethod
    def failure_analysis(cls) -> 'Task':
        return cls(
            name="failure_analysis",
            description="Cluster failed trajectories into failure patterns",
            prompt_template="""Group these failed tasks by the capability the agent was missing.
Successful tasks are listed as positive references; a pattern they already cover needs no skill.

Reply with JSON only:
{{"patterns": [{{"name": "...", "task_ids": ["..."], "missing_capability": "..."}}]}}

Content:
{text}"""
        )

    @classmethod
    def skill_synthesis(cls) -> 'Task':
        return cls(
            name="skill_synthesis",
            description="Write one skill per failure pattern",
            prompt_template="""Write one skill for each failure pattern below.

Reply with JSON only:
{{"skills": [{{"title": "...", "principle": "...", "when_to_apply": "..."}}]}}

Content:
{text}"""
        )

    @classmethod
    def diagnosis(cls) -> 'Task':
        return cls(
            name="skill_diagnosis",
            description="Keep, rewrite or remove one skill",
            prompt_template="""Diagnose the skill below from its outcome pairs.
For a rewrite, give the full rewritten skill; otherwise set "rewritten" to null.

Reply with JSON only:
{{"verdict": "keep|rewrite|remove", "rewritten": {{"title": "...", "principle": "...", "when_to_apply": "..."}}}}

Content:
{text}"""
        )

    @classmethod
    def edit_planning(cls) -> 'Task':
        return cls(
            name="edit_planning",
            description="Choose edit selections for candidate banks",
            prompt_template="""Propose up to the requested number of edit selections, best first.
Each selection names the entries of each pool to apply by index.

Reply with JSON only:
{{"selections": [{{"add": [0], "rewrite": [], "remove": []}}]}}

Content:
{text}"""
        )

    @classmethod
    def custom(cls, prompt: str, name: str = "custom", description: str = "Custom task") -> 'Task':
        """Create a custom task with consistent formatting

        Args:
            prompt: The custom task instruction
            name: Task name (default: "custom")
            description: Task description (default: "Custom task")

        Returns:
            Task with formatted prompt template including content placeholder
        """
        return cls(
            name=name,
            description=description,
            prompt_template=f"{prompt}\n\nContent: {{text}}"
        )

class LLMProcessor:
    """Processes text using language models with configurable roles and tasks"""

    def __init__(self, config: LLMConfig):
        """Initialize processor with config"""
        self.config = config
        self._init_client()

    def _init_client(self):
        """Initialize LangChain client based on provider"""
        try:
            if self.config.provider == "anthropic":
                kwargs = {'base_url': self.config.base_url} if self.config.base_url else {}
                self.client = ChatAnthropic(
                    model=self.config.model_name,
                    temperature=self.config.temperature,
                    max_tokens=self.config.max_tokens,
                    anthropic_api_key=self.config.api_key,
                    default_request_timeout=self.config.timeout,
                    **kwargs
                )
            elif self.config.provider == "openai":
                kwargs = {'base_url': self.config.base_url} if self.config.base_url else {}
                self.client = ChatOpenAI(
                    model=self.config.model_name,
                    temperature=self.config.temperature,
                    max_tokens=self.config.max_tokens,
                    openai_api_key=self.config.api_key,
                    timeout=self.config.timeout,
                    seed=self.config.seed,
                    **kwargs
                )
            else:
                raise ValueError(f"Unsupported provider: {self.config.provider}")
        except Exception as e:
            logger.error(f"Error initializing client: {str(e)}")
            raise

    def process_text(self, text: str, task: Task, role: Optional[Role] = None) -> Optional[str]:
        """Process text using specified task and optional role

        Args:
            text: Input text to process
            task: Task to perform
            role: Optional role to use (defaults to None)

        Returns:
            Processed text or None if processing fails
        """
        try:
            messages = []

            if role and role.system_prompt:
                messages.append(SystemMessage(content=role.system_prompt))

            formatted_prompt = task.prompt_template.format(text=text)
            messages.append(HumanMessage(content=formatted_prompt))

            logger.info(f"Role: {role.name if role else 'None'}")
            logger.info(f"Task: {task.name}")
            logger.debug(f"Task prompt: {formatted_prompt}")

            response = self.client.invoke(messages)
            return response.content

        except Exception as e:
            logger.error(f"Error processing text: {str(e)}")
            return None
