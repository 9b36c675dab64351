"""Many-to-many dialogue augmentation via latent bridge path sampling."""

from .config import RunConfig, TrainConfig, derive_seed
from .corpus import (
    Dialogue,
    SynthSpec,
    Utterance,
    Vocab,
    load_corpus,
    synth_corpus,
    window_dialogue,
)
from .bridge import (
    BridgeParams,
    IsotropicGaussian,
    LatentPath,
    infer_mu_T,
    interior_covariance,
    marginal,
    sample_path,
)
from .estimator import PathMixupGenerator
from .infer import GenerationRequest, diverse_generate, generate
from .mapper import MapperNet, contrastive_loss, triplet_distance
from .seq2seq import SegmentedContext, Seq2SeqModel

__version__ = "0.1.0"

__all__ = [
    "BridgeParams",
    "Dialogue",
    "GenerationRequest",
    "IsotropicGaussian",
    "LatentPath",
    "MapperNet",
    "PathMixupGenerator",
    "RunConfig",
    "SegmentedContext",
    "Seq2SeqModel",
    "SynthSpec",
    "TrainConfig",
    "Utterance",
    "Vocab",
    "contrastive_loss",
    "derive_seed",
    "diverse_generate",
    "generate",
    "infer_mu_T",
    "interior_covariance",
    "load_corpus",
    "marginal",
    "sample_path",
    "synth_corpus",
    "triplet_distance",
    "window_dialogue",
]
