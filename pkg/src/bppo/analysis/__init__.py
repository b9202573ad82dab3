from bppo.analysis.gradcheck import GradCheckResult, MaskedCheckResult, Scenario # noqa
from bppo.analysis.gradcheck import build_scenario, finite_diff_check, masked_coordinate_check # noqa
from bppo.analysis.similarity import CosineMatrix, gradient_cosine_matrix, gradient_redundancy # noqa
from bppo.analysis.commitment import commitment_curve, prefix_commitment # noqa
from bppo.analysis.compare import CostReport, compare_runs, read_metrics # noqa
