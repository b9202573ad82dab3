from typing import Any, Dict, List, Sequence, Union
from jinja2 import Environment, PackageLoader
import json
import numpy as np
from bppo.base.exceptions import ConfigurationException


def render_template(template_name: str, **kwargs):
    """Return a jinja2 template defined in this library."""

    # Set up the jinja2 environment
    env = Environment(
        loader=PackageLoader("bppo"),
        keep_trailing_newline=True
    )

    # Get the template being used
    template = env.get_template(template_name)

    # Render the template
    return template.render(**kwargs)


def derive_rng(*keys: int) -> np.random.Generator:
    """
    Return a random generator whose stream is a pure function of the keys.

    Every random draw in the lab flows from a tuple like
    (global_seed, stream, prompt_index, response_index), so the number of
    workers used to evaluate the draws never changes the values.
    """

    return np.random.default_rng(
        np.random.SeedSequence([int(k) for k in keys])
    )


def canonical_json(value: Any) -> str:
    """Serialize to JSON with a stable key order, for byte-identical files."""

    return json.dumps(value, sort_keys=True, separators=(", ", ": "))


def flatten_config(values: dict, _prefix: str = "", _running=None) -> dict:
    """
    Flatten a nested config dict into dotted keys.

    {"objective": {"epsilon": 0.2}} -> {"objective.epsilon": 0.2}
    """

    if _running is None:
        _running = {}

    for kw, val in values.items():

        key = f"{_prefix}{kw}"

        if isinstance(val, dict):
            _running = flatten_config(val, _prefix=f"{key}.", _running=_running)

        else:

            if key in _running:
                msg = f"Cannot flatten, duplicate key found: {key}"
                raise ConfigurationException(msg)

            _running[key] = val

    return _running


def get_path(values: dict, path: Union[str, List[str]], default=None) -> Any:
    """Get the value at a dotted path within a nested dict."""

    if isinstance(path, str):
        path = path.split(".")

    node = values
    for key in path:
        if not isinstance(node, dict) or key not in node:
            return default
        node = node[key]

    return node


def set_path(values: dict, path: Union[str, List[str]], value: Any) -> dict:
    """
    Set the value at a dotted path within a nested dict,
    creating intermediate sections as needed.
    """

    if isinstance(path, str):
        path = path.split(".")

    if len(path) == 0:
        raise ConfigurationException("Cannot set an empty config path")

    node = values
    for key in path[:-1]:

        # If the section does not exist yet, make it
        if key not in node:
            node[key] = {}

        # A leaf cannot be used as a section
        elif not isinstance(node[key], dict):
            msg = f"Config key {key} is a value, not a section"
            raise ConfigurationException(msg)

        node = node[key]

    node[path[-1]] = value
    return values


def merge_config(base: dict, *overrides: Dict[str, Any]) -> dict:
    """
    Apply dotted-key overrides on top of a nested config, in order.
    Values of None are ignored, so unset CLI flags fall through.
    """

    merged = json.loads(json.dumps(base))

    for override in overrides:
        for key, val in flatten_config(override).items():
            if val is None:
                continue
            set_path(merged, key, val)

    return merged


def parse_tokens(line: str) -> List[int]:
    """Parse a line of space-separated token ids."""

    try:
        return [int(tok) for tok in line.split()]
    except ValueError as e:
        raise ConfigurationException(f"Could not parse token ids ({str(e)})")


def format_tokens(tokens: Sequence[int]) -> str:
    """Format token ids as a space-separated line."""

    return " ".join(str(int(t)) for t in tokens)


def step_seed(seed: int, step: int) -> int:
    """Integer seed for one training step, a pure function of (seed, step)."""

    return int(np.random.SeedSequence([int(seed), int(step)]).generate_state(1)[0])
