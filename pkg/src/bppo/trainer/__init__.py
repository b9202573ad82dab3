from bppo.trainer.config import TrainConfig, WarmupConfig, default_config # noqa
from bppo.trainer.adam import Adam, AdamState # noqa
from bppo.trainer.evaluate import evaluate, evaluate_instances # noqa
from bppo.trainer.warmup import WarmupResult, cross_entropy, supervised_warmup # noqa
from bppo.trainer.loop import MetricsRecord, RLTrainer, train # noqa
