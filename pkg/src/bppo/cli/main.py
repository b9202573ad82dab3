import functools
import json
import logging
from pathlib import Path
import sys
import click
from bppo.analysis import (
    build_scenario,
    commitment_curve,
    compare_runs,
    finite_diff_check,
    gradient_redundancy
)
from bppo.analysis.compare import REPORT_CSV
from bppo.analysis.gradcheck import DEFAULT_STEP, DEFAULT_THRESHOLD, LOSS_KINDS
from bppo.base import run
from bppo.base.exceptions import (
    BPPOException,
    ConfigurationException,
    GradientCheckException,
    WarmupFailedException
)
from bppo.base.helpers import get_path, merge_config, set_path
from bppo.base.io import load_checkpoint, read_json, save_checkpoint, write_json
from bppo.curation import curate, pool_instances, read_prompt_pool, write_prompt_pool
from bppo.objective import KLMode, SelectionStrategy
from bppo.policy import PolicyParams
from bppo.tasks import TaskKind, TaskSpec, gen_instances
from bppo.trainer import TrainConfig, default_config, evaluate, supervised_warmup, train
from bppo.trainer.config import ALGOS

CURATED_POOL = "curated_pool.txt"


def handle_errors(fn):
    """Report a lab exception as one machine-parsable line and exit with its code."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except BPPOException as e:
            message = " ".join(str(e).split())
            click.echo(
                f"error={type(e).__name__} code={e.exit_code} message={message}",
                err=True
            )
            sys.exit(e.exit_code)

    return wrapper


def _parse_set(items) -> dict:
    """Parse KEY=VALUE overrides; values are read as JSON when possible."""

    values = {}
    for item in items:

        if "=" not in item:
            raise ConfigurationException(f"Override must look like key=value, not {item}")

        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw

        set_path(values, key.strip(), value)

    return values


def resolve_values(config_path, flags: dict, sets=()) -> dict:
    """Built-in defaults < config file < CLI flags (including --set)."""

    values = default_config()

    if config_path is not None:
        values = merge_config(values, read_json(config_path))

    values = merge_config(values, flags, _parse_set(sets))
    logging.debug(f"Resolved config: {values}")

    return values


def resolve_config(config_path, flags: dict, sets=()) -> TrainConfig:
    return TrainConfig.from_dict(resolve_values(config_path, flags, sets))


def _task_flags(task, modulus, length) -> dict:
    return dict(task=dict(kind=task, modulus=modulus, length=length))


def _task_spec(task, modulus, length) -> TaskSpec:
    """Task spec from flags alone (defaults where unset)."""

    values = {k: v for k, v in _task_flags(task, modulus, length)["task"].items() if v is not None}
    return TaskSpec(**values)


def _open(run_dir, subcommand: str, seed: int, config: dict) -> Path:
    return run.open_run_dir(
        run_dir,
        run.RunManifest(subcommand=subcommand, seed=seed, config=config)
    )


def task_options(fn):
    fn = click.option("--task", type=click.Choice([k.value for k in TaskKind]), default=None, help="Task kind")(fn)
    fn = click.option("--modulus", type=int, default=None, help="ModAdd modulus")(fn)
    fn = click.option("--length", type=int, default=None, help="Reverse / PlanParity length")(fn)
    return fn


def run_options(fn):
    fn = click.option("--seed", type=int, default=None, help="Single seed for all randomness")(fn)
    fn = click.option("--run-dir", type=click.Path(), default=None, help="Run directory (default: runs/<time>-seed<seed>)")(fn)
    return fn


@click.group()
@click.option('--debug/--no-debug', default=False, help="DEBUG logging")
def main(debug):
    """Binary prefix policy optimization lab"""
    logging.basicConfig(
        format='%(process)d-%(levelname)s-%(message)s',
        level=logging.DEBUG if debug else logging.INFO
    )


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON config file")
@task_options
@run_options
@click.option("--lr", type=float, default=None, help="Warmup learning rate")
@click.option("--batch-size", type=int, default=None, help="Oracle instances per step")
@click.option("--max-steps", type=int, default=None, help="Warmup step cap")
@click.option("--target", type=float, default=None, help="Target greedy accuracy")
@click.option("--init", "init_path", type=click.Path(), default=None, help="Start from this checkpoint")
@click.option("--set", "sets", multiple=True, help="Dotted override, e.g. policy.d_model=32")
@handle_errors
def warmup(config_path, task, modulus, length, seed, run_dir, lr, batch_size, max_steps, target, init_path, sets):
    """
    Supervised warmup on oracle responses

    Writes final.ckpt (the reference policy) into the run directory.
    Exits with code 5 if the target accuracy is not reached; the best
    checkpoint is still written.
    """

    logging.debug("Subcommand: warmup")

    flags = dict(
        seed=seed,
        warmup=dict(lr=lr, batch_size=batch_size, max_steps=max_steps, target_accuracy=target),
        **_task_flags(task, modulus, length)
    )
    config = resolve_config(config_path, flags, sets)

    if init_path is not None:
        params, _ = load_checkpoint(init_path)
        config = TrainConfig.from_dict({**config.to_dict(), "policy": params.config.to_dict()})
    else:
        params = PolicyParams.init(config.policy, config.seed)

    run_dir = _open(run_dir, "warmup", config.seed, config.to_dict())

    result = supervised_warmup(config, params)

    save_checkpoint(
        run_dir / run.FINAL_CHECKPOINT,
        result.params,
        dict(warmup_accuracy=result.accuracy, reached=result.reached, steps=result.steps, seed=config.seed)
    )
    write_json(
        run_dir / run.SUMMARY_FILE,
        dict(accuracy=result.accuracy, reached=result.reached, steps=result.steps)
    )
    click.echo(f"accuracy={result.accuracy:.4f} steps={result.steps} checkpoint={run_dir / run.FINAL_CHECKPOINT}")

    if not result.reached:
        raise WarmupFailedException(
            f"Warmup reached {result.accuracy:.4f} < target {config.warmup.target_accuracy}",
            best_accuracy=result.accuracy
        )


@main.command(name="train")
@click.option("--ref", "ref_path", type=click.Path(), default=None, help="Warmup checkpoint (π_ref and the initial θ); overrides ref_checkpoint")
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON config file")
@click.option("--algo", type=click.Choice(ALGOS), default=None, help="Objective")
@task_options
@run_options
@click.option("--steps", type=int, default=None, help="RL steps")
@click.option("--group-size", type=int, default=None, help="Responses per prompt (G)")
@click.option("--batch-prompts", type=int, default=None, help="Prompts per step (B)")
@click.option("--inner-epochs", type=int, default=None, help="Updates per batch (μ)")
@click.option("--lr", type=float, default=None, help="Learning rate")
@click.option("--temperature", type=float, default=None, help="Sampling temperature")
@click.option("--max-response-len", type=int, default=None, help="Response token cap")
@click.option("--epsilon", type=float, default=None, help="Clip coefficient")
@click.option("--beta", type=float, default=None, help="KL weight")
@click.option("--prefix", default=None, help="Prefix spec, frac:F or abs:N")
@click.option("--selection", type=click.Choice([s.value for s in SelectionStrategy]), default=None, help="How BPPO picks its positive and negative response")
@click.option("--kl-mode", type=click.Choice([k.value for k in KLMode]), default=None, help="KL estimator against the reference")
@click.option("--exit-depth", type=int, default=None, help="Familial member to train")
@click.option("--prompt-pool", type=click.Path(), default=None, help="Draw prompts from this pool file")
@click.option("--eval-every", type=int, default=None, help="Steps between held-out evaluations")
@click.option("--eval-size", type=int, default=None, help="Held-out evaluation instances")
@click.option("--checkpoint-every", type=int, default=None, help="Steps between checkpoints")
@click.option("--workers", type=int, default=1, help="Threads (never changes results)")
@click.option("--set", "sets", multiple=True, help="Dotted override, e.g. objective.log_ratio_clamp=10")
@handle_errors
def train_command(
    ref_path, config_path, algo, task, modulus, length, seed, run_dir, steps,
    group_size, batch_prompts, inner_epochs, lr, temperature, max_response_len,
    epsilon, beta, prefix, selection, kl_mode, exit_depth, prompt_pool,
    eval_every, eval_size, checkpoint_every, workers, sets
):
    """
    Train with GRPO or BPPO from a warmup checkpoint

    Writes manifest.json, config.json, metrics.jsonl, timings.jsonl,
    checkpoints/, final.ckpt and summary.json into the run directory.
    """

    logging.debug("Subcommand: train")

    flags = dict(
        algo=algo,
        seed=seed,
        steps=steps,
        group_size=group_size,
        batch_prompts=batch_prompts,
        inner_epochs=inner_epochs,
        lr=lr,
        temperature=temperature,
        max_response_len=max_response_len,
        exit_depth=exit_depth,
        prompt_pool=prompt_pool,
        eval_every=eval_every,
        eval_size=eval_size,
        checkpoint_every=checkpoint_every,
        ref_checkpoint=ref_path,
        objective=dict(epsilon=epsilon, beta=beta, prefix=prefix, selection=selection, kl_mode=kl_mode),
        **_task_flags(task, modulus, length)
    )

    values = resolve_values(config_path, flags, sets)
    ref_checkpoint = get_path(values, "ref_checkpoint")
    if ref_checkpoint is None:
        raise click.UsageError("No reference checkpoint: pass --ref or set ref_checkpoint in the config file")

    # The policy shape always comes from the checkpoint
    params_ref, _ = load_checkpoint(ref_checkpoint)
    values["policy"] = params_ref.config.to_dict()
    config = TrainConfig.from_dict(values)

    pool = None
    if config.prompt_pool is not None:
        pool = pool_instances(read_prompt_pool(config.prompt_pool))

    run_dir = _open(run_dir, "train", config.seed, config.to_dict())

    history = train(config, params_ref, run_dir=run_dir, workers=workers, prompt_pool=pool)

    click.echo(
        f"steps={len(history)} final_eval_accuracy={history[-1].eval_accuracy:.4f} "
        f"run_dir={run_dir}"
    )


@main.command(name="eval")
@click.argument("checkpoint", type=click.Path())
@task_options
@run_options
@click.option("-n", "--n-instances", type=int, default=200, help="Held-out instances")
@click.option("--exit-depth", type=int, default=None, help="Familial member to evaluate")
@click.option("--max-len", type=int, default=6, help="Response token cap")
@handle_errors
def eval_command(checkpoint, task, modulus, length, seed, run_dir, n_instances, exit_depth, max_len):
    """
    Greedy exact-match accuracy of a checkpoint

    Arguments:

        checkpoint      Checkpoint file written by warmup or train

    """

    logging.debug("Subcommand: eval")

    params, _ = load_checkpoint(checkpoint)
    spec = _task_spec(task, modulus, length)
    seed = 0 if seed is None else seed

    run_dir = _open(run_dir, "eval", seed, dict(
        checkpoint=str(checkpoint), task=spec.to_dict(), n_instances=n_instances,
        exit_depth=exit_depth, max_len=max_len, seed=seed
    ))

    accuracy = evaluate(params, spec, n_instances, seed, max_len=max_len, exit_depth=exit_depth)
    write_json(run_dir / "eval.json", dict(accuracy=accuracy, n_instances=n_instances))
    click.echo(f"accuracy={accuracy:.4f}")


@main.group()
def analyze():
    """Gradient checks and the redundancy / prefix measurements"""
    pass


@analyze.command()
@click.option("--loss", "loss_kind", type=click.Choice(LOSS_KINDS), default="bppo", help="Loss to differentiate")
@click.option("--coords", type=int, default=200, help="Coordinates to check")
@click.option("--step", type=float, default=DEFAULT_STEP, help="Finite-difference step")
@click.option("--threshold", type=float, default=DEFAULT_THRESHOLD, help="Maximum relative error")
@run_options
@handle_errors
def fdcheck(loss_kind, coords, step, threshold, seed, run_dir):
    """
    Compare analytic gradients with finite differences

    Exits with code 6 if the maximum relative error is not below the threshold.
    """

    logging.debug("Subcommand: analyze fdcheck")

    seed = 0 if seed is None else seed
    run_dir = _open(run_dir, "analyze fdcheck", seed, dict(
        loss=loss_kind, coords=coords, step=step, threshold=threshold, seed=seed
    ))

    result = finite_diff_check(loss_kind, build_scenario(loss_kind, seed), coords, step, seed)
    write_json(run_dir / "fdcheck.json", dict(
        loss=loss_kind,
        coords=len(result.coords),
        max_rel_error=result.max_rel_error,
        worst=list(result.worst) if result.worst else None,
    ))
    click.echo(f"loss={loss_kind} coords={len(result.coords)} max_rel_error={result.max_rel_error:.3e}")

    if not result.passed(threshold):
        raise GradientCheckException(
            f"max relative error {result.max_rel_error:.3e} >= {threshold:.1e} at {result.worst}"
        )


@analyze.command(name="grad-sim")
@click.argument("checkpoint", type=click.Path())
@task_options
@run_options
@click.option("--groups", type=int, default=100, help="Mixed-reward groups to measure")
@click.option("--group-size", type=int, default=8, help="Responses per prompt (G)")
@click.option("--temperature", type=float, default=1.0, help="Sampling temperature")
@click.option("--max-len", type=int, default=6, help="Response token cap")
@click.option("--exit-depth", type=int, default=None, help="Familial member to measure (default: deepest)")
@click.option("--workers", type=int, default=1, help="Threads (never changes results)")
@handle_errors
def grad_sim(checkpoint, task, modulus, length, seed, run_dir, groups, group_size, temperature, max_len, exit_depth, workers):
    """
    Cosine similarity of per-response gradients within groups

    Writes grad_sim.csv (one row per group) into the run directory.
    """

    logging.debug("Subcommand: analyze grad-sim")

    params, _ = load_checkpoint(checkpoint)
    spec = _task_spec(task, modulus, length)
    seed = 0 if seed is None else seed

    run_dir = _open(run_dir, "analyze grad-sim", seed, dict(
        checkpoint=str(checkpoint), task=spec.to_dict(), groups=groups, group_size=group_size,
        temperature=temperature, max_len=max_len, exit_depth=exit_depth, seed=seed
    ))

    df = gradient_redundancy(
        params, spec, n_groups=groups, group_size=group_size, temperature=temperature,
        max_len=max_len, seed=seed, exit_depth=exit_depth, workers=workers
    )
    df.to_csv(run_dir / "grad_sim.csv", index=False)

    click.echo(
        f"groups={df.shape[0]} intra_positive={df['intra_positive'].mean():.4f} "
        f"intra_negative={df['intra_negative'].mean():.4f} intra={df['intra'].mean():.4f} "
        f"cross={df['cross'].mean():.4f}"
    )


@analyze.command()
@click.argument("checkpoint", type=click.Path())
@task_options
@run_options
@click.option("--instances", type=int, default=50, help="Instances to average over")
@click.option("--prefix-lens", default="0,1,2,3", help="Comma-separated prefix lengths")
@click.option("-K", "--suffixes", "K", type=int, default=200, help="Suffixes resampled per instance")
@click.option("--temperature", type=float, default=1.0, help="Sampling temperature")
@click.option("--max-len", type=int, default=6, help="Response token cap")
@click.option("--exit-depth", type=int, default=None, help="Familial member to measure (default: deepest)")
@handle_errors
def prefix(checkpoint, task, modulus, length, seed, run_dir, instances, prefix_lens, K, temperature, max_len, exit_depth):
    """
    Commitment score as a function of the frozen prefix length

    Writes commitment.csv (prefix_len, mean_score, n_instances) into the run directory.
    """

    logging.debug("Subcommand: analyze prefix")

    try:
        lens = [int(x) for x in prefix_lens.split(",") if x.strip()]
    except ValueError:
        raise ConfigurationException(f"Could not parse prefix lengths: {prefix_lens}")

    params, _ = load_checkpoint(checkpoint)
    spec = _task_spec(task, modulus, length)
    seed = 0 if seed is None else seed

    run_dir = _open(run_dir, "analyze prefix", seed, dict(
        checkpoint=str(checkpoint), task=spec.to_dict(), instances=instances,
        prefix_lens=lens, K=K, temperature=temperature, max_len=max_len,
        exit_depth=exit_depth, seed=seed
    ))

    df = commitment_curve(
        params, spec, gen_instances(spec, instances, seed), lens, K, seed,
        temperature=temperature, max_len=max_len, exit_depth=exit_depth
    )
    df.to_csv(run_dir / "commitment.csv", index=False)
    click.echo(df.to_string(index=False))


@main.command(name="curate")
@click.argument("pool_path", type=click.Path())
@click.argument("checkpoint", type=click.Path())
@click.option("-k", "--clusters", "k", type=int, required=True, help="Number of clusters")
@click.option("-m", "--per-cluster", "m", type=int, required=True, help="Prompts kept per cluster")
@run_options
@handle_errors
def curate_command(pool_path, checkpoint, k, m, seed, run_dir):
    """
    Select a diverse subset of a prompt pool

    Arguments:

        pool_path       Prompt pool, one prompt per line (space-separated token ids)
        checkpoint      Policy whose hidden states embed the prompts

    Writes curated_pool.txt (same format) into the run directory.
    """

    logging.debug("Subcommand: curate")

    params, _ = load_checkpoint(checkpoint)
    prompts = read_prompt_pool(pool_path)
    seed = 0 if seed is None else seed

    run_dir = _open(run_dir, "curate", seed, dict(
        pool=str(pool_path), checkpoint=str(checkpoint), k=k, m=m, seed=seed
    ))

    result = curate(prompts, k, m, params)
    write_prompt_pool(run_dir / CURATED_POOL, result.prompts)
    click.echo(f"selected={len(result.prompts)} pool={len(prompts)} output={run_dir / CURATED_POOL}")


@main.command(name="compare")
@click.argument("run_a", type=click.Path())
@click.argument("run_b", type=click.Path())
@run_options
@handle_errors
def compare_command(run_a, run_b, seed, run_dir):
    """
    Compare the cost of two training runs

    Arguments:

        run_a       Run directory (or metrics.jsonl), the ratio numerator
        run_b       Run directory (or metrics.jsonl), the ratio denominator

    Prints a table (ratio = run_a / run_b) and writes cost_report.csv.
    """

    logging.debug("Subcommand: compare")

    report = compare_runs(run_a, run_b)

    seed = 0 if seed is None else seed
    run_dir = _open(run_dir, "compare", seed, dict(run_a=str(run_a), run_b=str(run_b), seed=seed))

    report.write_csv(run_dir / REPORT_CSV)
    click.echo(report.to_text(), nl=False)
