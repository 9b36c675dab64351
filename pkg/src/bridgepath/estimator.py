"""Scikit-learn style front door for the whole pipeline.

``PathMixupGenerator.fit`` takes multi-turn dialogues (lists of turn
strings), builds the vocabulary, and runs the joint training objective;
``predict`` maps contexts to deterministic expectation-mode responses
and ``sample`` draws diverse sampled-path responses.
"""

from __future__ import annotations

from typing import Optional, Sequence

from sklearn.base import BaseEstimator

from . import distill, infer
from .config import TrainConfig
from .corpus import Dialogue, Utterance, Vocab


def _as_turn_lists(X) -> list[list[str]]:
    if not isinstance(X, Sequence) or isinstance(X, (str, bytes)):
        raise ValueError("expected a sequence of dialogues (lists of strings)")
    out = []
    for i, item in enumerate(X):
        if isinstance(item, Dialogue):
            out.append([u.text for u in item.utterances])
            continue
        if not isinstance(item, Sequence) or isinstance(item, (str, bytes)):
            raise ValueError(f"dialogue {i}: expected a list of turn strings")
        turns = list(item)
        if not all(isinstance(t, str) and t.strip() for t in turns):
            raise ValueError(f"dialogue {i}: turns must be nonempty strings")
        out.append(turns)
    return out


class PathMixupGenerator(BaseEstimator):
    """Dialogue response generator trained with latent-path augmentation.

    Parameters mirror the training configuration; see ``TrainConfig``.
    ``paths_per_dialogue`` is the number of latent paths mixed in per
    training dialogue.
    """

    def __init__(
        self,
        paths_per_dialogue: int = 1,
        d_model: int = 32,
        n_heads: int = 2,
        n_encoder_layers: int = 1,
        n_decoder_layers: int = 1,
        dropout: float = 0.1,
        delta: float = 0.5,
        window: int = 5,
        learning_rate: float = 1e-3,
        batch_size: int = 16,
        warmup_steps: int = 100,
        max_steps: int = 500,
        seed: int = 0,
        min_token_freq: int = 1,
        decoding: str = "greedy",
        beam_width: int = 5,
        top_k: int = 5,
        max_new_tokens: int = 32,
    ):
        self.paths_per_dialogue = paths_per_dialogue
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_encoder_layers = n_encoder_layers
        self.n_decoder_layers = n_decoder_layers
        self.dropout = dropout
        self.delta = delta
        self.window = window
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.max_steps = max_steps
        self.seed = seed
        self.min_token_freq = min_token_freq
        self.decoding = decoding
        self.beam_width = beam_width
        self.top_k = top_k
        self.max_new_tokens = max_new_tokens

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            K=self.paths_per_dialogue,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_encoder_layers=self.n_encoder_layers,
            n_decoder_layers=self.n_decoder_layers,
            dropout=self.dropout,
            delta=self.delta,
            window=self.window,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            warmup_steps=self.warmup_steps,
            max_steps=self.max_steps,
            seed=self.seed,
            min_token_freq=self.min_token_freq,
        )

    def fit(self, X, y=None, val_X=None):
        """Train on dialogues; each item is a list of >= 2 turn strings."""
        turn_lists = _as_turn_lists(X)
        if any(len(t) < 2 for t in turn_lists):
            raise ValueError("every dialogue needs at least 2 turns")
        vocab = Vocab.from_texts(
            (t for turns in turn_lists for t in turns),
            min_freq=self.min_token_freq,
        )
        corpus = [Dialogue.from_turns(t, vocab) for t in turn_lists]
        val = (
            [Dialogue.from_turns(t, vocab) for t in _as_turn_lists(val_X)]
            if val_X is not None
            else None
        )
        state, log = distill.train(
            corpus, self._train_config(), vocab, val_corpus=val
        )
        self.vocab_ = vocab
        self.state_ = state
        self.model_ = state.model
        self.mapper_ = state.mapper
        self.train_log_ = log
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit first")

    def _context(self, turns: Sequence[str]) -> list[Utterance]:
        return [Utterance.from_text(t, self.vocab_) for t in turns]

    def predict(self, X) -> list[str]:
        """Deterministic expectation-mode response per context."""
        self._check_fitted()
        responses = []
        for turns in _as_turn_lists(X):
            req = infer.GenerationRequest(
                context=self._context(turns),
                mode="expectation",
                decoding=self.decoding,
                beam_width=self.beam_width,
                top_k=self.top_k,
                max_new_tokens=self.max_new_tokens,
                seed=self.seed,
            )
            result = infer.generate(
                req, self.model_, self.mapper_, delta=self.delta
            )
            responses.append(result.text(self.vocab_))
        return responses

    def sample(
        self, context: Sequence[str], n: int = 10, base_seed: Optional[int] = None
    ) -> list[tuple[str, int]]:
        """n sampled-path responses for one context, with frequencies."""
        self._check_fitted()
        base = self.seed if base_seed is None else base_seed
        pairs = infer.diverse_generate(
            self._context(context),
            n,
            self.model_,
            self.mapper_,
            base_seed=base,
            delta=self.delta,
            decoding=self.decoding if self.decoding != "greedy" else "beam",
            beam_width=self.beam_width,
            top_k=self.top_k,
            max_new_tokens=self.max_new_tokens,
        )
        return [(self.vocab_.decode(tokens), count) for tokens, count in pairs]

    def perplexity(self, X) -> float:
        from .metrics import perplexity

        self._check_fitted()
        dialogues = [
            Dialogue.from_turns(t, self.vocab_) for t in _as_turn_lists(X)
        ]
        return perplexity(self.model_, self.mapper_, dialogues)
