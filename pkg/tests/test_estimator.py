import pytest
from sklearn.base import clone

from bridgepath.estimator import PathMixupGenerator


CORPUS = [
    ["hello there", "hi how are you", "fine thanks"],
    ["hello again", "hi how are you", "great thanks"],
    ["good morning", "morning to you", "fine thanks"],
    ["see you later", "bye for now", "bye"],
]


@pytest.fixture(scope="module")
def fitted():
    est = PathMixupGenerator(
        paths_per_dialogue=1, d_model=8, n_heads=2, max_steps=4,
        batch_size=4, dropout=0.0, seed=0,
    )
    return est.fit(CORPUS)


class TestSklearnContract:
    def test_get_params_roundtrip(self):
        est = PathMixupGenerator(paths_per_dialogue=3, d_model=16)
        params = est.get_params()
        assert params["paths_per_dialogue"] == 3
        cloned = clone(est)
        assert cloned.get_params() == params

    def test_set_params(self):
        est = PathMixupGenerator()
        est.set_params(top_k=9, seed=4)
        assert est.top_k == 9 and est.seed == 4

    def test_unfitted_predict_rejected(self):
        with pytest.raises(RuntimeError):
            PathMixupGenerator().predict([["hi", "there"]])


class TestValidation:
    def test_rejects_non_sequences(self):
        est = PathMixupGenerator()
        with pytest.raises(ValueError):
            est.fit("not dialogues")
        with pytest.raises(ValueError):
            est.fit([["hi", ""]])
        with pytest.raises(ValueError):
            est.fit([["single turn only"]])


class TestFitted:
    def test_fit_exposes_artifacts(self, fitted):
        assert fitted.state_.step == 4
        assert len(fitted.train_log_) == 4
        assert len(fitted.vocab_) > 4

    def test_predict_shape_and_determinism(self, fitted):
        contexts = [["hello there"], ["good morning", "morning to you"]]
        a = fitted.predict(contexts)
        b = fitted.predict(contexts)
        assert a == b
        assert len(a) == 2
        assert all(isinstance(r, str) for r in a)

    def test_sample_counts(self, fitted):
        pairs = fitted.sample(["hello there", "hi how are you"], n=5)
        assert sum(c for _r, c in pairs) == 5
        assert all(isinstance(r, str) for r, _c in pairs)

    def test_perplexity_positive(self, fitted):
        assert fitted.perplexity(CORPUS) > 1.0

    def test_fit_with_validation_set(self):
        est = PathMixupGenerator(
            d_model=8, n_heads=2, max_steps=2, batch_size=4, dropout=0.0
        )
        est.fit(CORPUS[:3], val_X=CORPUS[3:])
        assert est.state_.step == 2
