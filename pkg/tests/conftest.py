import numpy as np
import pytest

from dialectid.encoder import ModelConfig, init_model

ACCEPTANCE_LINES: list[str] = []


def toy_config(**overrides) -> ModelConfig:
    kw = dict(num_layers=2, hidden=32, heads=2, ffn_dim=64, vocab_size=100, max_positions=64,
              num_classes=5, adapter_enabled=True, adapter_bottleneck=8, vatt_enabled=True,
              mode="fine_tune")
    kw.update(overrides)
    return ModelConfig(**kw)


def random_batch(rng, batch=3, seq=10, vocab=100):
    ids = rng.integers(4, vocab, size=(batch, seq))
    ids[:, 0] = 2
    lengths = rng.integers(2, seq + 1, size=batch)
    mask = (np.arange(seq)[None, :] < lengths[:, None]).astype(np.int64)
    ids[mask == 0] = 0
    return ids, mask


def perturbed(model, rng, scale=0.3):
    """Push every parameter away from its init so no gradient is structurally zero."""
    for p in model.params.values():
        p.data = p.data + scale * rng.standard_normal(p.shape).astype(p.dtype)
    return model


@pytest.fixture
def toy64():
    return init_model(toy_config(), seed=0, dtype=np.float64)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_datasets(n_train=40, n_dev=24, num_classes=3, seed=0, max_len=16):
    """Encoded synthetic train/dev sets plus their vocab and labels."""
    from dialectid.corpus import LabelSet, build_vocab, encode_dataset
    from dialectid.synthetic import make_corpus

    tr = make_corpus(n_train, num_classes, seed=seed, lexicon_seed=seed, id_prefix="tr")
    dv = make_corpus(n_dev, num_classes, seed=seed + 1, lexicon_seed=seed, id_prefix="dv")
    vocab = build_vocab([e.text for e in tr], 120)
    labels = LabelSet(tuple(f"class_{c}" for c in range(num_classes)))
    return (encode_dataset(tr, vocab, labels, max_len), encode_dataset(dv, vocab, labels, max_len),
            vocab, labels)


def tiny_model(vocab, labels, seed=0, **overrides):
    kw = dict(num_layers=1, hidden=8, heads=2, ffn_dim=16, vocab_size=len(vocab), max_positions=16,
              num_classes=len(labels), adapter_enabled=True, adapter_bottleneck=4, vatt_enabled=True)
    kw.update(overrides)
    return init_model(ModelConfig(**kw), seed=seed)
