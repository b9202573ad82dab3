from bppo.tasks.tasks import TaskInstance, TaskKind, TaskSpec # noqa
from bppo.tasks.tasks import gen_instance, gen_instances, verify # noqa
