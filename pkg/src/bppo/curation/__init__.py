from bppo.curation.embedding import EmbeddingSet, embed_prompt, embed_prompts # noqa
from bppo.curation.clustering import cosine_distances, hier_cluster # noqa
from bppo.curation.selection import greedy_diverse_select # noqa
from bppo.curation.pool import CurationResult, curate, pool_instances, read_prompt_pool, write_prompt_pool # noqa
