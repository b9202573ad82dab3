from dataclasses import dataclass, field
from typing import Mapping, Optional
from bppo.base.exceptions import ConfigurationException, TaskException
from bppo.objective import ObjectiveConfig
from bppo.policy import PolicyConfig
from bppo.tasks import TaskSpec

ALGOS = ("grpo", "bppo")


@dataclass(frozen=True)
class WarmupConfig:
    """
    Supervised warmup on oracle responses.

    Attributes:
        lr:                 Adam learning rate.
        batch_size:         Oracle instances per step.
        max_steps:          Step cap.
        target_accuracy:    Greedy exact-match accuracy that ends warmup.
        eval_every:         Steps between accuracy checks.
        eval_size:          Held-out instances per accuracy check.
    """

    lr: float = 1e-3
    batch_size: int = 32
    max_steps: int = 2000
    target_accuracy: float = 0.3
    eval_every: int = 50
    eval_size: int = 200

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigurationException("warmup.lr must be >= 0")
        for attr in ["batch_size", "max_steps", "eval_every", "eval_size"]:
            if int(getattr(self, attr)) < 1:
                raise ConfigurationException(f"warmup.{attr} must be >= 1")
        if not 0 <= self.target_accuracy <= 1:
            raise ConfigurationException("warmup.target_accuracy must be in [0, 1]")

    def to_dict(self) -> dict:
        return dict(
            lr=self.lr,
            batch_size=self.batch_size,
            max_steps=self.max_steps,
            target_accuracy=self.target_accuracy,
            eval_every=self.eval_every,
            eval_size=self.eval_size,
        )


@dataclass(frozen=True)
class TrainConfig:
    """
    Everything a run needs. Every field maps to a config-file key
    (nested sections task / objective / policy / warmup) and a CLI flag.
    """

    algo: str = "bppo"
    task: TaskSpec = field(default_factory=TaskSpec)
    group_size: int = 8
    batch_prompts: int = 16
    steps: int = 200
    inner_epochs: int = 1
    lr: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    temperature: float = 1.0
    max_response_len: int = 6
    eval_size: int = 200
    eval_every: int = 10
    checkpoint_every: int = 50
    seed: int = 0
    exit_depth: Optional[int] = None
    prompt_pool: Optional[str] = None
    ref_checkpoint: Optional[str] = None
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)

    def __post_init__(self):

        object.__setattr__(self, "algo", str(self.algo).lower())
        if self.algo not in ALGOS:
            raise ConfigurationException(f"algo must be one of {ALGOS}, not {self.algo}")

        if self.steps < 1:
            raise ConfigurationException("steps must be >= 1")
        if self.batch_prompts < 1:
            raise ConfigurationException("batch_prompts must be >= 1")
        if self.group_size < 2:
            raise ConfigurationException("group_size must be >= 2")
        if self.inner_epochs < 1:
            raise ConfigurationException("inner_epochs must be >= 1")
        if self.lr < 0:
            raise ConfigurationException("lr must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigurationException("Adam betas must be in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigurationException("adam_eps must be positive")
        if self.temperature < 0:
            raise ConfigurationException("temperature must be >= 0")
        for attr in ["max_response_len", "eval_size", "eval_every", "checkpoint_every"]:
            if int(getattr(self, attr)) < 1:
                raise ConfigurationException(f"{attr} must be >= 1")

        if self.exit_depth is not None and self.exit_depth not in self.policy.exit_depths:
            msg = f"exit_depth {self.exit_depth} is not one of {list(self.policy.exit_depths)}"
            raise ConfigurationException(msg)

        if self.policy.vocab_size < 32:
            raise ConfigurationException("policy.vocab_size must cover the 32-token task vocabulary")

    @property
    def train_exit(self) -> int:
        return self.exit_depth if self.exit_depth is not None else self.policy.deepest

    def to_dict(self) -> dict:
        return dict(
            algo=self.algo,
            task=self.task.to_dict(),
            group_size=self.group_size,
            batch_prompts=self.batch_prompts,
            steps=self.steps,
            inner_epochs=self.inner_epochs,
            lr=self.lr,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            temperature=self.temperature,
            max_response_len=self.max_response_len,
            eval_size=self.eval_size,
            eval_every=self.eval_every,
            checkpoint_every=self.checkpoint_every,
            seed=self.seed,
            exit_depth=self.exit_depth,
            prompt_pool=self.prompt_pool,
            ref_checkpoint=self.ref_checkpoint,
            objective=self.objective.to_dict(),
            policy=self.policy.to_dict(),
            warmup=self.warmup.to_dict(),
        )

    @classmethod
    def from_dict(cls, values: Mapping) -> "TrainConfig":
        """Build from a nested dict (missing keys take their defaults)."""

        values = dict(values)
        sections = dict(
            task=(TaskSpec, values.pop("task", {})),
            objective=(ObjectiveConfig, values.pop("objective", {})),
            policy=(PolicyConfig, values.pop("policy", {})),
            warmup=(WarmupConfig, values.pop("warmup", {})),
        )

        kwargs = {}
        for name, (section_cls, section_values) in sections.items():
            if isinstance(section_values, section_cls):
                kwargs[name] = section_values
                continue
            try:
                kwargs[name] = section_cls(**dict(section_values or {}))
            except TypeError as e:
                raise ConfigurationException(f"Invalid {name} config ({str(e)})")
            except TaskException as e:
                raise ConfigurationException(str(e))

        try:
            return cls(**values, **kwargs)
        except TypeError as e:
            raise ConfigurationException(f"Invalid config ({str(e)})")


def default_config() -> dict:
    """The built-in defaults, as a nested dict."""

    return TrainConfig().to_dict()
