from dataclasses import dataclass
import logging
from pathlib import Path
import time
from typing import List, Optional, Sequence, Union
import numpy as np
from bppo.base import run
from bppo.base.exceptions import ConfigurationException, NumericsException, TrainingAbortedException
from bppo.base.helpers import derive_rng, step_seed
from bppo.base.io import append_jsonl, save_checkpoint, write_json
from bppo.objective import BatchResult, batch_gradients
from bppo.policy import PolicyParams
from bppo.rollout import Group, collect_batch
from bppo.tasks import TaskInstance, gen_instances
from bppo.trainer.adam import Adam
from bppo.trainer.config import TrainConfig
from bppo.trainer.evaluate import evaluate

# RL prompts come from their own stream of the seed
PROMPT_STREAM = 5


@dataclass
class MetricsRecord:
    """
    One line of the metrics log.

    sample_ms and update_ms are wall-clock measurements and are kept
    out of metrics.jsonl (they go to timings.jsonl) so that seeded
    reruns write byte-identical metrics.
    """

    step: int
    algo: str
    mean_reward: float
    frac_groups_skipped: float
    loss: float
    kl: float
    clip_fraction: float
    grad_token_count: int
    sample_ms: float
    update_ms: float
    eval_accuracy: Optional[float]
    seed: int

    def metrics_dict(self) -> dict:
        return dict(
            step=self.step,
            algo=self.algo,
            mean_reward=self.mean_reward,
            frac_groups_skipped=self.frac_groups_skipped,
            loss=self.loss,
            kl=self.kl,
            clip_fraction=self.clip_fraction,
            grad_token_count=self.grad_token_count,
            eval_accuracy=self.eval_accuracy,
            seed=self.seed,
        )

    def timings_dict(self) -> dict:
        return dict(step=self.step, sample_ms=self.sample_ms, update_ms=self.update_ms)

    def to_dict(self) -> dict:
        return {**self.metrics_dict(), **self.timings_dict()}


def _all_zero(grads) -> bool:
    return all(not np.any(g) for g in grads.values())


class RLTrainer:
    """
    The RL outer loop.

    Each step snapshots θ_old, collects one group per prompt, and runs
    the configured number of inner epochs of the GRPO or BPPO objective,
    each epoch ending in one Adam update. π_ref never changes.

    Attributes:
        config:     Resolved run config.
        ref:        Frozen reference policy (the warmup result).
        params:     Current θ.
        optimizer:  Adam state for θ.
        run_dir:    Directory receiving logs and checkpoints (optional).
        workers:    Thread count for rollout and per-group gradients.
        history:    MetricsRecord per completed step.
    """

    def __init__(
        self,
        config: TrainConfig,
        params_ref: PolicyParams,
        params: Optional[PolicyParams] = None,
        run_dir: Optional[Union[str, Path]] = None,
        workers: int = 1,
        prompt_pool: Optional[Sequence[TaskInstance]] = None
    ):

        self.config = config
        self.ref = params_ref.clone()
        self.params = params.clone() if params is not None else params_ref.clone()
        self.optimizer = Adam(
            self.params,
            lr=config.lr,
            beta1=config.adam_beta1,
            beta2=config.adam_beta2,
            eps=config.adam_eps
        )
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.workers = max(1, int(workers))
        self.prompt_pool = list(prompt_pool) if prompt_pool is not None else None
        self.history: List[MetricsRecord] = []

        if self.prompt_pool is not None and len(self.prompt_pool) == 0:
            raise ConfigurationException("The prompt pool is empty")

        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)

    def prompts(self, step: int) -> List[TaskInstance]:
        """The B prompts of one step, a pure function of (seed, step)."""

        B = self.config.batch_prompts

        # If no pool was given, generate fresh instances
        if self.prompt_pool is None:
            return gen_instances(
                self.config.task, B, step_seed(self.config.seed, step), stream=PROMPT_STREAM
            )

        # Otherwise draw from the pool, without replacement while it lasts
        rng = derive_rng(self.config.seed, PROMPT_STREAM, step)
        ix = rng.choice(len(self.prompt_pool), size=B, replace=B > len(self.prompt_pool))
        return [self.prompt_pool[int(i)] for i in ix]

    def evaluate(self) -> float:
        return evaluate(
            self.params,
            self.config.task,
            self.config.eval_size,
            self.config.seed,
            max_len=self.config.max_response_len,
            exit_depth=self.config.train_exit
        )

    def _abort(self, step: int, epoch: int, groups: Sequence[Group], error: Exception):
        """Find the first group whose loss cannot be evaluated, dump it and abort."""

        offending = None
        for group in groups:
            try:
                result = self._gradients(step, [group])
            except NumericsException:
                offending = group
                break
            if not np.isfinite(result.loss):
                offending = group
                break

        dump = dict(
            step=step,
            epoch=epoch,
            error=str(error),
            group=offending.to_dict() if offending is not None else None,
        )

        if self.run_dir is not None:
            write_json(self.run_dir / run.ABORT_FILE, dump)

        logging.error(f"Training aborted at step {step}: {str(error)}")
        raise TrainingAbortedException(f"Non-finite loss at step {step} ({str(error)})")

    def _gradients(self, step: int, groups: Sequence[Group]) -> BatchResult:
        return batch_gradients(
            self.params,
            groups,
            self.config.algo,
            self.ref,
            self.config.objective,
            seed=step_seed(self.config.seed, step),
            exit_depth=self.config.train_exit,
            workers=self.workers
        )

    def train_step(self, step: int) -> MetricsRecord:
        """Run one step (1-based) and return its record."""

        config = self.config
        seed = step_seed(config.seed, step)

        # Rollout under the θ_old snapshot
        params_old = self.params.clone()
        start = time.perf_counter()
        groups = collect_batch(
            params_old,
            config.task,
            self.prompts(step),
            config.group_size,
            config.temperature,
            config.max_response_len,
            seed,
            exit_depth=config.train_exit,
            workers=self.workers
        )
        sample_ms = (time.perf_counter() - start) * 1000.0

        rewards = [r for group in groups for r in group.rewards]

        start = time.perf_counter()
        losses, kls, clip_fractions = [], [], []
        grad_tokens = 0
        frac_skipped = 0.0

        for epoch in range(config.inner_epochs):

            try:
                result = self._gradients(step, groups)
            except NumericsException as e:
                self._abort(step, epoch, groups, e)

            if not np.isfinite(result.loss):
                self._abort(step, epoch, groups, ValueError(f"loss={result.loss}"))

            losses.append(result.loss)
            kls.append(result.stats.kl)
            clip_fractions.append(result.stats.clip_fraction)
            grad_tokens += result.stats.grad_token_count
            frac_skipped = result.frac_skipped

            # A step without signal leaves θ and the moments untouched
            if _all_zero(result.grads):
                logging.debug(f"Step {step} epoch {epoch}: zero gradient, no update")
                continue

            try:
                self.params = self.optimizer.step(self.params, result.grads)
            except NumericsException as e:
                self._abort(step, epoch, groups, e)

        update_ms = (time.perf_counter() - start) * 1000.0

        eval_accuracy = None
        if step % config.eval_every == 0 or step == config.steps:
            eval_accuracy = self.evaluate()

        record = MetricsRecord(
            step=step,
            algo=config.algo,
            mean_reward=float(np.mean(rewards)),
            frac_groups_skipped=frac_skipped,
            loss=float(np.mean(losses)),
            kl=float(np.mean(kls)),
            clip_fraction=float(np.mean(clip_fractions)),
            grad_token_count=int(grad_tokens),
            sample_ms=sample_ms,
            update_ms=update_ms,
            eval_accuracy=eval_accuracy,
            seed=config.seed,
        )

        msg = (
            f"Step {step}: reward={record.mean_reward:.3f} loss={record.loss:.5f} "
            f"kl={record.kl:.5f} skipped={record.frac_groups_skipped:.2f} "
            f"tokens={record.grad_token_count}"
        )
        if eval_accuracy is not None:
            msg += f" eval={eval_accuracy:.3f}"
        logging.info(msg)

        return record

    def _checkpoint(self, path: Path, step: int) -> None:
        save_checkpoint(
            path,
            self.params,
            dict(step=step, seed=self.config.seed, algo=self.config.algo)
        )

    def run(self) -> List[MetricsRecord]:
        """Train for config.steps steps, writing logs and checkpoints as it goes."""

        initial_accuracy = self.evaluate()
        logging.info(f"Initial eval accuracy: {initial_accuracy:.3f}")

        for step in range(1, self.config.steps + 1):

            record = self.train_step(step)
            self.history.append(record)

            if self.run_dir is None:
                continue

            append_jsonl(self.run_dir / run.METRICS_FILE, record.metrics_dict())
            append_jsonl(self.run_dir / run.TIMINGS_FILE, record.timings_dict())

            if step % self.config.checkpoint_every == 0:
                self._checkpoint(run.checkpoint_path(self.run_dir, step), step)

        if self.run_dir is not None:
            self._checkpoint(self.run_dir / run.FINAL_CHECKPOINT, self.config.steps)
            write_json(
                self.run_dir / run.SUMMARY_FILE,
                dict(
                    algo=self.config.algo,
                    seed=self.config.seed,
                    steps=self.config.steps,
                    initial_eval_accuracy=initial_accuracy,
                    final_eval_accuracy=self.history[-1].eval_accuracy,
                    total_grad_tokens=sum(r.grad_token_count for r in self.history),
                )
            )

        return self.history


def train(
    config: TrainConfig,
    params_ref: PolicyParams,
    run_dir: Optional[Union[str, Path]] = None,
    workers: int = 1,
    params: Optional[PolicyParams] = None,
    prompt_pool: Optional[Sequence[TaskInstance]] = None
) -> List[MetricsRecord]:
    """
    Run RL from the warmup policy params_ref (also the starting θ unless
    params is given) and return the metrics history, one record per step.
    """

    trainer = RLTrainer(
        config,
        params_ref,
        params=params,
        run_dir=run_dir,
        workers=workers,
        prompt_pool=prompt_pool
    )
    return trainer.run()
