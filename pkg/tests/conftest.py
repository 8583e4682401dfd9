import numpy as np
import pytest

from dbsa import masks, model, pipeline, synthetic, tokenizer


def small_config(n_heads=4, n_kv_heads=2, head_dim=8, n_layers=2, ffn_dim=64):
    return model.ModelConfig(
        d_model=n_heads * head_dim,
        n_layers=n_layers,
        n_heads=n_heads,
        n_kv_heads=n_kv_heads,
        head_dim=head_dim,
        ffn_dim=ffn_dim,
        vocab_size=tokenizer.VOCAB_SIZE,
        max_seq_len=16384,
    )


@pytest.fixture(scope="session")
def config():
    return small_config()


@pytest.fixture(scope="session")
def weights(config):
    return model.init_random(config, seed=11)


@pytest.fixture(scope="session")
def recall_task():
    data = synthetic.generate_recall_task(n_demos=40, n_tests=6, n_labels=3, seed=5)
    return pipeline.TaskSpec(data.pool, data.labels), list(data.tests)


def make_pool_task(n_demos=40, n_labels=3, seed=5, n_tests=6):
    data = synthetic.generate_recall_task(
        n_demos=n_demos, n_tests=n_tests, n_labels=n_labels, seed=seed
    )
    return pipeline.TaskSpec(data.pool, data.labels), list(data.tests)


def pool_tokens_and_mask(task, partition, pattern):
    """Token ids, positions and the full sparse token mask of an encoded pool,
    for single-pass oracle comparisons."""
    rendered = [
        pipeline._render_block(task.template, task.pool, members)
        for members in partition.blocks
    ]
    counts = [len(ids) for _, ids, _ in rendered]
    all_ids = [tok for _, ids, _ in rendered for tok in ids]
    block_mask = masks.build_block_mask(len(counts), pattern)
    token_mask = masks.full_token_mask(block_mask, counts)
    return all_ids, counts, token_mask


def combined_query_mask(pool_mask: np.ndarray, n_query: int) -> np.ndarray:
    """Extend a pool token mask with query rows: full attention to the pool,
    causal within the query."""
    t = pool_mask.shape[0]
    total = t + n_query
    out = np.zeros((total, total), dtype=bool)
    out[:t, :t] = pool_mask
    out[t:, :t] = True
    out[t:, t:] = np.tril(np.ones((n_query, n_query), dtype=bool))
    return out
