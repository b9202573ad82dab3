from bppo.rollout.group import Group, collect_batch, collect_group, compute_advantages, make_group # noqa
