from bppo.policy.params import FamilyMember, PolicyConfig, PolicyParams # noqa
from bppo.policy.model import forward_logits, forward_logprobs, hidden_states, token_logprob # noqa
from bppo.policy.sampling import Trajectory, greedy_response, sample_response # noqa
