from bppo.objective.config import KLMode, ObjectiveConfig, PrefixSpec, SelectionStrategy # noqa
from bppo.objective.selection import BinaryPair, GroupSkipped, ResponseSelection # noqa
from bppo.objective.selection import make_prefix_mask, select_binary, select_full_group, select_indices # noqa
from bppo.objective.loss import BatchResult, LossStats, batch_gradients, bppo_loss, grpo_loss # noqa
from bppo.objective.loss import group_loss_and_gradients, surrogate_loss, token_kl # noqa
