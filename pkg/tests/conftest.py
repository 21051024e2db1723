import numpy as np
import pytest

from bridgecodec.config import ArConfig, BridgeConfig, Config, CorpusConfig, TrainConfig
from bridgecodec.features import generate_corpus
from bridgecodec.training import train_ar, train_bridge


def small_config(**train_overrides) -> Config:
    """Quick-to-train stack shared by integration-style tests."""
    train = dict(lr=3e-4, batch_size=8, eval_every=200, checkpoint_every=10**9, seed=3)
    train.update(train_overrides)
    return Config(
        corpus=CorpusConfig(n_utterances=24, feature_dim=16, min_text_len=3, max_text_len=5,
                            vocabulary="abcd", n_speakers=2, seed=0),
        bridge=BridgeConfig(codebook_size=16, predictor_embed=16, predictor_hidden=32, seed=1),
        ar=ArConfig(layers=2, heads=2, width=64, context=256, seed=2),
        train=TrainConfig(**train),
    )


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_corpus(small_cfg):
    return generate_corpus(small_cfg.corpus.to_spec())


@pytest.fixture(scope="session")
def trained_bridge(small_cfg, small_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("bridge")
    sparse, dense, ckpt, history = train_bridge(small_cfg, small_corpus, out, steps=400)
    return {"sparse": sparse, "dense": dense, "ckpt": ckpt, "history": history}


@pytest.fixture(scope="session")
def trained_ar(small_cfg, small_corpus, trained_bridge, tmp_path_factory):
    out = tmp_path_factory.mktemp("ar")
    model, vocab, ckpt, history = train_ar(
        small_cfg, small_corpus, trained_bridge["sparse"], trained_bridge["dense"], out, steps=400
    )
    return {"model": model, "vocab": vocab, "ckpt": ckpt, "history": history}


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
